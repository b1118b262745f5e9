//! Random databases and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use perfslice::store::{
    write_database, CtxId, DatabaseImage, Meta, MetricDesc, MetricId, ProfileBody, ProfileDesc,
    ProfileId, ProfileRecord, Scope, TraceBody, TraceEvent,
};
use perfslice::synthgen::{generate_cct, XorShift64Star};

pub struct RandomDb {
    pub n_ranks: u32,
    pub depth: u32,
    pub fanout: u32,
    /// Chance that a context carries exclusive time in a rank profile.
    pub density: f64,
    pub events_per_trace: usize,
}

impl Default for RandomDb {
    fn default() -> Self {
        RandomDb {
            n_ranks: 12,
            depth: 4,
            fanout: 3,
            density: 0.4,
            events_per_trace: 200,
        }
    }
}

/// A consistent profile database: per-rank exclusive times, inclusive sums
/// over subtrees, and a summary that adds the ranks up. Metric 0/1 is
/// cputime (i)/(e), metric 2 a sparse "gker" (i).
pub fn random_image(cfg: &RandomDb, seed: u64) -> DatabaseImage {
    let mut rng = XorShift64Star::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xA5A5);
    let cct = generate_cct(cfg.depth, cfg.fanout, "f", seed);
    let n = cct.len();
    let metrics = vec![
        MetricDesc { id: 0, name: "cputime".into(), scope: Scope::Inclusive, unit: "s".into() },
        MetricDesc { id: 1, name: "cputime".into(), scope: Scope::Exclusive, unit: "s".into() },
        MetricDesc { id: 2, name: "gker".into(), scope: Scope::Inclusive, unit: "s".into() },
    ];
    let mut profiles = vec![ProfileDesc::summary()];
    for r in 0..cfg.n_ranks {
        profiles.push(ProfileDesc {
            id: r + 1,
            rank: r as i32,
            thread: 0,
            hostname: format!("x{}c0s{}b0n0", 1000 + r / 4, r % 4),
            posix_node_id: u64::from(r / 4),
        });
    }

    let mut bodies = Vec::new();
    let mut summary_excl = vec![0.0f64; n];
    let mut summary_gker = vec![0.0f64; n];
    let mut rank_bodies = Vec::new();
    for r in 0..cfg.n_ranks {
        let mut excl = vec![0.0f64; n];
        let mut gker = vec![0.0f64; n];
        for (c, e) in excl.iter_mut().enumerate() {
            if c == 0 || rng.next_f64() < cfg.density {
                *e = (rng.below(1000) + 1) as f64 / 8.0;
            }
            if rng.next_f64() < cfg.density / 4.0 {
                gker[c] = (rng.below(100) + 1) as f64 / 4.0;
            }
        }
        for c in 0..n {
            summary_excl[c] += excl[c];
            summary_gker[c] += gker[c];
        }
        rank_bodies.push(body(r + 1, &cct, &excl, &gker));
    }
    bodies.push(body(0, &cct, &summary_excl, &summary_gker));
    bodies.extend(rank_bodies);

    let mut traces = Vec::new();
    for r in 0..cfg.n_ranks {
        let mut t = 1_000u64;
        let mut events = Vec::with_capacity(cfg.events_per_trace);
        for _ in 0..cfg.events_per_trace {
            // Occasional zero gaps give duplicate timestamps.
            t += rng.below(5) * rng.below(1000);
            events.push(TraceEvent { timestamp_ns: t, ctx_id: rng.below(n as u64) as CtxId });
        }
        traces.push(TraceBody { profile_id: r + 1, t_begin_ns: 1_000, t_end_ns: t + 10, events });
    }
    DatabaseImage { meta: Meta { metrics, profiles, cct }, profiles: bodies, traces }
}

fn body(pid: ProfileId, cct: &perfslice::store::CallingContextTree, excl: &[f64], gker: &[f64]) -> ProfileBody {
    let n = excl.len();
    let mut incl = excl.to_vec();
    let mut gincl = gker.to_vec();
    // Children have larger ids than their parents.
    for c in (1..n).rev() {
        let p = cct.parent(c as CtxId).expect("non-root") as usize;
        incl[p] += incl[c];
        gincl[p] += gincl[c];
    }
    let mut records = Vec::new();
    for c in 0..n {
        let mut push = |m: MetricId, v: f64| {
            if v != 0.0 {
                records.push(ProfileRecord { ctx_id: c as CtxId, metric_id: m, value: v });
            }
        };
        push(0, incl[c]);
        push(1, excl[c]);
        push(2, gincl[c]);
    }
    ProfileBody { profile_id: pid, records }
}

pub fn write_random(dir: &Path, cfg: &RandomDb, seed: u64) -> DatabaseImage {
    let img = random_image(cfg, seed);
    write_database(&img, dir).expect("write");
    img
}

/// Full-scan filter: the oracle for selective reads.
pub fn scan_records(
    img: &DatabaseImage,
    pid: ProfileId,
    ctx: Option<&[CtxId]>,
    metrics: Option<&[MetricId]>,
) -> Vec<ProfileRecord> {
    img.profiles
        .iter()
        .filter(|b| b.profile_id == pid)
        .flat_map(|b| b.records.iter())
        .filter(|r| ctx.is_none_or(|s| s.contains(&r.ctx_id)))
        .filter(|r| metrics.is_none_or(|s| s.contains(&r.metric_id)))
        .copied()
        .collect()
}

/// Linear-scan trace window and carry-in.
pub fn scan_window(img: &DatabaseImage, pid: ProfileId, t0: u64, t1: u64) -> (Option<TraceEvent>, Vec<TraceEvent>) {
    let t = img.traces.iter().find(|t| t.profile_id == pid).expect("trace");
    let carry = t.events.iter().filter(|e| e.timestamp_ns < t0).next_back().copied();
    let inside = t.events.iter().filter(|e| e.timestamp_ns >= t0 && e.timestamp_ns < t1).copied().collect();
    (carry, inside)
}

/// (profile, ctx, metric) -> value over every stored record.
pub fn all_values(img: &DatabaseImage) -> BTreeMap<(ProfileId, CtxId, MetricId), f64> {
    img.profiles
        .iter()
        .flat_map(|b| b.records.iter().map(move |r| ((b.profile_id, r.ctx_id, r.metric_id), r.value)))
        .collect()
}

/// Random sorted subset of `0..n`, possibly empty.
pub fn random_subset(rng: &mut XorShift64Star, n: usize, p: f64) -> Vec<u32> {
    (0..n as u32).filter(|_| rng.next_f64() < p).collect()
}

/// Writes an image into a fresh temporary directory and opens it.
pub fn open_image(img: &DatabaseImage) -> (tempfile::TempDir, perfslice::store::DbHandle) {
    let dir = tempfile::tempdir().expect("tempdir");
    write_database(img, dir.path()).expect("write");
    let h = perfslice::store::open_database(dir.path()).expect("open");
    (dir, h)
}

/// Iterative scenario with randomized shape and the given kernel jitter.
pub fn jittered_iterative(seed: u64, jitter: f64) -> perfslice::synthgen::IterScenarioConfig {
    use perfslice::synthgen::{IterScenarioConfig, KernelSpec};
    let mut rng = XorShift64Star::new(seed ^ 0x5151);
    let n_ranks = 2 + rng.below(5) as u32;
    let n_kernels = 1 + rng.below(4) as usize;
    let kernels = (0..n_kernels)
        .map(|k| KernelSpec {
            name: format!("gpu_kernel_{k}_"),
            mean_time_s: 0.01 + rng.next_f64() * 0.5,
            across_rank_spread: (0..n_ranks).map(|_| 0.5 + rng.next_f64()).collect(),
            within_rank_jitter_frac: jitter,
        })
        .collect();
    IterScenarioConfig {
        n_ranks,
        n_iterations: 3 + rng.below(10) as u32,
        kernels,
        anchor_name: "scf_iteration".into(),
        kernel_parent: "gpu_twoei_".into(),
        copy_time_s: rng.next_f64() * 0.05,
        setup_s: rng.next_f64(),
        loop_overhead_s: 0.001 + rng.next_f64() * 0.01,
        gap_s: rng.next_f64() * 0.1,
        ranks_per_node: 2,
        seed,
    }
}
