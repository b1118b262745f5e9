//! Ready-made scenario configs shaped after the two case studies.

use super::{CallsiteSpec, CongestionScenarioConfig, IterScenarioConfig, KernelSpec, RackScheme};

/// GPU kernels with their per-iteration (mean across ranks, max across ranks)
/// times in seconds.
pub const GAMESS_KERNELS: [(&str, f64, f64); 6] = [
    ("gpu_rhf_j05_ppps_", 2.963, 4.650),
    ("gpu_rhf_j06_pppp_", 2.483, 2.599),
    ("gpu_rhf_j03_ppss_", 0.734, 0.945),
    ("gpu_rhf_j04_psps_", 0.483, 0.958),
    ("gpu_rhf_j02_psss_", 0.239, 0.300),
    ("gpu_rhf_j01_ssss_", 0.007, 0.010),
];

/// Across-rank time CV (percent) per kernel, same order as [`GAMESS_KERNELS`].
pub const GAMESS_ACROSS_RANK_CV_PCT: [f64; 6] = [34.21, 7.20, 19.84, 46.31, 19.68, 27.51];

/// Per-rank factors with mean 1, maximum `max_over_mean` (rank 0) and, where
/// reachable, population CV `cv_pct`. Ranks 1.. form an evenly spaced ramp;
/// if the requested CV needs a ramp reaching above the maximum, the ramp is
/// clamped at the maximum and the CV falls short.
pub fn rank_spread(n_ranks: usize, max_over_mean: f64, cv_pct: f64) -> Vec<f64> {
    assert!(n_ranks >= 3 && max_over_mean >= 1.0);
    let n = n_ranks as f64;
    let rest = n - 1.0;
    let center = (n - max_over_mean) / rest;
    // variance of rest evenly spaced points over unit width
    let unit_var = (rest * rest - 1.0) / (12.0 * (rest - 1.0) * (rest - 1.0));
    let cv = cv_pct / 100.0;
    let target = n * cv * cv - (max_over_mean - 1.0).powi(2);
    let width_sq = (target / rest - (center - 1.0).powi(2)) / unit_var;
    let mut width = width_sq.max(0.0).sqrt();
    width = width.min(2.0 * (max_over_mean - center)).min(2.0 * center);
    let lo = center - width / 2.0;
    let mut out = vec![max_over_mean];
    out.extend((0..n_ranks - 1).map(|k| lo + width * k as f64 / (rest - 1.0)));
    out
}

/// 8 ranks, 11 iterations, six kernels whose per-iteration cross-rank mean
/// and max equal [`GAMESS_KERNELS`] exactly (no jitter).
pub fn gamess_table5() -> IterScenarioConfig {
    let n_ranks = 8;
    let kernels = GAMESS_KERNELS
        .iter()
        .zip(GAMESS_ACROSS_RANK_CV_PCT)
        .map(|(&(name, mean, max), cv)| KernelSpec {
            name: name.into(),
            mean_time_s: mean,
            across_rank_spread: rank_spread(n_ranks, max / mean, cv),
            within_rank_jitter_frac: 0.0,
        })
        .collect();
    IterScenarioConfig {
        n_ranks: n_ranks as u32,
        n_iterations: 11,
        kernels,
        anchor_name: "scf_iteration".into(),
        kernel_parent: "gpu_ompmod_twoei_jk_".into(),
        copy_time_s: 0.05,
        setup_s: 1.0,
        loop_overhead_s: 0.01,
        gap_s: 0.1,
        ranks_per_node: 8,
        seed: 2024,
    }
}

const AMG_OUTLIER_RACK_OFFSETS: [u32; 22] = [
    0, 1, 2, 3, 5, 6, 8, 9, 10, 12, 13, 15, 16, 17, 19, 20, 22, 23, 25, 26, 28, 29,
];

/// 1,000 nodes x 10 ranks; 202 nodes across 22 racks are slowed in the
/// second `MPI_Allreduce` so that node means of total time are 3.12 s
/// (normal) and 5.19 s (outliers).
pub fn amg_congestion() -> CongestionScenarioConfig {
    let racks = RackScheme::default();
    let site = |routine: &str, chain: &[&str], base: f64| CallsiteSpec {
        routine_name: routine.into(),
        call_chain: chain.iter().map(|s| s.to_string()).collect(),
        base_time_s: base,
    };
    CongestionScenarioConfig {
        n_nodes: 1000,
        ranks_per_node: 10,
        racks,
        outlier_node_count: 202,
        outlier_racks: AMG_OUTLIER_RACK_OFFSETS
            .iter()
            .map(|o| racks.first_rack + o)
            .collect(),
        mpi_callsites: vec![
            site(
                "MPI_Allreduce",
                &["hypre_GMRESSolve", "hypre_ParVectorInnerProd"],
                0.20,
            ),
            site(
                "MPI_Allreduce",
                &[
                    "hypre_GMRESSetup",
                    "hypre_BoomerAMGSetup",
                    "hypre_ParCSRMatrixSetNumNonzeros_core",
                ],
                0.69,
            ),
            site(
                "MPI_Waitall",
                &["hypre_GMRESSolve", "hypre_BoomerAMGSolve", "hypre_ParCSRMatrixMatvec"],
                0.15,
            ),
            site(
                "MPI_Isend",
                &["hypre_GMRESSolve", "hypre_BoomerAMGSolve", "hypre_ParCSRCommHandleCreate"],
                0.08,
            ),
            site(
                "MPI_Irecv",
                &["hypre_GMRESSolve", "hypre_BoomerAMGSolve", "hypre_ParCSRCommHandleCreate"],
                0.07,
            ),
            site("MPI_Bcast", &["hypre_GMRESSetup", "hypre_BoomerAMGSetup"], 0.03),
        ],
        congested_callsite: 1,
        compute_time_s: 1.90,
        congestion_multiplier: 4.0,
        jitter_frac: 0.02,
        root_name: "main".into(),
        seed: 100_000,
    }
}
