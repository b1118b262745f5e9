use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{
    ns_to_s, records_from_costs, s_to_ns, summary_body, MetricCost, RackScheme, SynthError,
    XorShift64Star,
};
use crate::store::{
    CallingContextTree, CctNode, CtxId, DatabaseImage, Meta, MetricDesc, NodeKind, ProfileBody,
    ProfileDesc, ProfileId, Scope, TraceBody, TraceEvent,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    pub mean_time_s: f64,
    /// Multiplicative factor per rank; empty means 1.0 for every rank.
    #[serde(default)]
    pub across_rank_spread: Vec<f64>,
    #[serde(default)]
    pub within_rank_jitter_frac: f64,
}

fn default_anchor() -> String {
    "scf_iteration".into()
}

fn default_kernel_parent() -> String {
    "gpu_ompmod_twoei_jk_".into()
}

fn default_ranks_per_node() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterScenarioConfig {
    pub n_ranks: u32,
    pub n_iterations: u32,
    pub kernels: Vec<KernelSpec>,
    #[serde(default = "default_anchor")]
    pub anchor_name: String,
    #[serde(default = "default_kernel_parent")]
    pub kernel_parent: String,
    /// Explicit device copy per iteration, attributed to `gxcopy`.
    #[serde(default)]
    pub copy_time_s: f64,
    /// Host time before the first iteration.
    #[serde(default)]
    pub setup_s: f64,
    /// Time spent in the anchor itself at the start of each iteration.
    #[serde(default)]
    pub loop_overhead_s: f64,
    /// Host time outside the anchor after each iteration.
    #[serde(default)]
    pub gap_s: f64,
    #[serde(default = "default_ranks_per_node")]
    pub ranks_per_node: u32,
    #[serde(default)]
    pub seed: u64,
}

/// Ground truth of an iterative scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterTruth {
    pub anchor_ctx: CtxId,
    pub kernel_parent_ctx: CtxId,
    pub copy_ctx: CtxId,
    pub kernel_ctx: Vec<CtxId>,
    pub kernel_names: Vec<String>,
    /// Trace (profile) id of each rank.
    pub trace_ids: Vec<ProfileId>,
    /// `kernel_time_ns[kernel][rank][iteration]`
    pub kernel_time_ns: Vec<Vec<Vec<u64>>>,
    /// Start of each iteration, per rank.
    pub boundaries_ns: Vec<Vec<u64>>,
    pub t_end_ns: Vec<u64>,
    /// Mean over ranks of the per-rank kernel total, divided by the maximum.
    pub balance_ratio: Vec<f64>,
}

impl IterTruth {
    /// Seconds matrix `[rank][iteration]` for one kernel.
    pub fn kernel_matrix_s(&self, kernel: usize) -> Vec<Vec<f64>> {
        self.kernel_time_ns[kernel]
            .iter()
            .map(|row| row.iter().map(|&ns| ns_to_s(ns)).collect())
            .collect()
    }

    /// Mean over iterations of (max across ranks - mean across ranks).
    pub fn savings_per_iteration_s(&self, kernel: usize) -> f64 {
        let m = self.kernel_matrix_s(kernel);
        let n_iter = m[0].len();
        let n_ranks = m.len() as f64;
        let (mut mean_acc, mut max_acc) = (0.0, 0.0);
        for it in 0..n_iter {
            let col: Vec<f64> = m.iter().map(|row| row[it]).collect();
            mean_acc += col.iter().sum::<f64>() / n_ranks;
            max_acc += col.iter().cloned().fold(f64::MIN, f64::max);
        }
        (max_acc - mean_acc) / n_iter as f64
    }
}

impl IterScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_ranks == 0 {
            return bad("n_ranks must be at least 1".into());
        }
        if self.n_iterations == 0 {
            return bad("n_iterations must be at least 1".into());
        }
        if self.ranks_per_node == 0 {
            return bad("ranks_per_node must be at least 1".into());
        }
        for (what, v) in [
            ("copy_time_s", self.copy_time_s),
            ("setup_s", self.setup_s),
            ("loop_overhead_s", self.loop_overhead_s),
            ("gap_s", self.gap_s),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{what} must be finite and non-negative"));
            }
        }
        let mut names = HashSet::new();
        for name in [&self.anchor_name, &self.kernel_parent] {
            if name.is_empty() || !names.insert(name.as_str()) {
                return bad(format!("context name {name:?} is empty or repeated"));
            }
        }
        for k in &self.kernels {
            if k.name.is_empty() || !names.insert(k.name.as_str()) {
                return bad(format!("kernel name {:?} is empty or repeated", k.name));
            }
            if !k.mean_time_s.is_finite() || k.mean_time_s < 0.0 {
                return bad(format!("kernel {}: mean_time_s must be non-negative", k.name));
            }
            if !(0.0..0.5).contains(&k.within_rank_jitter_frac) {
                return bad(format!("kernel {}: jitter must lie in [0, 0.5)", k.name));
            }
            if !k.across_rank_spread.is_empty() {
                if k.across_rank_spread.len() != self.n_ranks as usize {
                    return bad(format!(
                        "kernel {}: {} spread factors for {} ranks",
                        k.name,
                        k.across_rank_spread.len(),
                        self.n_ranks
                    ));
                }
                if k.across_rank_spread.iter().any(|f| !f.is_finite() || *f <= 0.0) {
                    return bad(format!("kernel {}: spread factors must be positive", k.name));
                }
            }
        }
        Ok(())
    }
}

const COPY_NAME: &str = "<gpu copy>";

pub(super) const ITER_METRICS: [(&str, Scope); 6] = [
    ("cputime", Scope::Inclusive),
    ("cputime", Scope::Exclusive),
    ("gker", Scope::Inclusive),
    ("gker", Scope::Exclusive),
    ("gxcopy", Scope::Inclusive),
    ("gxcopy", Scope::Exclusive),
];

pub(super) fn metric_table(spec: &[(&str, Scope)]) -> Vec<MetricDesc> {
    spec.iter()
        .enumerate()
        .map(|(i, &(name, scope))| MetricDesc {
            id: i as u16,
            name: name.into(),
            scope,
            unit: "s".into(),
        })
        .collect()
}

/// Builds the database and ground truth for an iterative GPU workload.
///
/// Tree: `main` -> {`setup`, anchor (loop) -> kernel parent -> kernels + copy}.
/// Each iteration emits the anchor, then each kernel, then the optional copy,
/// then returns to `main` for `gap_s`.
pub fn generate_iterative_scenario(
    cfg: &IterScenarioConfig,
) -> Result<(DatabaseImage, IterTruth), SynthError> {
    cfg.validate()?;
    let mut nodes = vec![
        CctNode {
            id: 0,
            parent: None,
            kind: NodeKind::Function,
            name: "main".into(),
        },
        CctNode {
            id: 1,
            parent: Some(0),
            kind: NodeKind::Function,
            name: "setup".into(),
        },
        CctNode {
            id: 2,
            parent: Some(0),
            kind: NodeKind::Loop,
            name: cfg.anchor_name.clone(),
        },
        CctNode {
            id: 3,
            parent: Some(2),
            kind: NodeKind::Function,
            name: cfg.kernel_parent.clone(),
        },
    ];
    let (root, setup, anchor, kparent) = (0, 1, 2, 3);
    let kernel_ctx: Vec<CtxId> = (0..cfg.kernels.len() as CtxId).map(|i| 4 + i).collect();
    for (k, &id) in cfg.kernels.iter().zip(&kernel_ctx) {
        nodes.push(CctNode {
            id,
            parent: Some(kparent),
            kind: NodeKind::GpuKernel,
            name: k.name.clone(),
        });
    }
    let copy = nodes.len() as CtxId;
    nodes.push(CctNode {
        id: copy,
        parent: Some(kparent),
        kind: NodeKind::GpuContext,
        name: COPY_NAME.into(),
    });
    let cct = CallingContextTree::new(nodes).expect("generator tree is topological");

    let n_ranks = cfg.n_ranks as usize;
    let n_iter = cfg.n_iterations as usize;
    let mut rng = XorShift64Star::new(cfg.seed);
    let mut kernel_time_ns = vec![vec![vec![0u64; n_iter]; n_ranks]; cfg.kernels.len()];
    for r in 0..n_ranks {
        for it in 0..n_iter {
            for (k, spec) in cfg.kernels.iter().enumerate() {
                let u = rng.next_signed();
                let factor = spec.across_rank_spread.get(r).copied().unwrap_or(1.0);
                let secs = spec.mean_time_s * factor * (1.0 + spec.within_rank_jitter_frac * u);
                kernel_time_ns[k][r][it] = s_to_ns(secs);
            }
        }
    }

    let setup_ns = s_to_ns(cfg.setup_s);
    let overhead_ns = s_to_ns(cfg.loop_overhead_s);
    let copy_ns = s_to_ns(cfg.copy_time_s);
    let gap_ns = s_to_ns(cfg.gap_s);
    let placement = RackScheme::default();
    let metrics = metric_table(&ITER_METRICS);

    let mut profiles = vec![ProfileDesc::summary()];
    let mut bodies = Vec::with_capacity(n_ranks);
    let mut traces = Vec::with_capacity(n_ranks);
    let mut boundaries_ns = Vec::with_capacity(n_ranks);
    let mut t_end_ns = Vec::with_capacity(n_ranks);
    let mut trace_ids = Vec::with_capacity(n_ranks);

    for r in 0..n_ranks {
        let pid = r as ProfileId + 1;
        let node = r / cfg.ranks_per_node as usize;
        profiles.push(ProfileDesc {
            id: pid,
            rank: r as i32,
            thread: 0,
            hostname: placement.hostname(node),
            posix_node_id: node as u64,
        });

        let mut cpu = vec![0u64; cct.len()];
        let mut gker = vec![0u64; cct.len()];
        let mut gxcopy = vec![0u64; cct.len()];
        let mut events = Vec::new();
        let mut bounds = Vec::with_capacity(n_iter);
        let mut t = 0u64;
        let mut emit = |t: &mut u64, ctx: CtxId, dur: u64, events: &mut Vec<TraceEvent>| {
            events.push(TraceEvent {
                timestamp_ns: *t,
                ctx_id: ctx,
            });
            cpu[ctx as usize] += dur;
            *t += dur;
        };

        if setup_ns > 0 {
            emit(&mut t, setup, setup_ns, &mut events);
        }
        for it in 0..n_iter {
            bounds.push(t);
            emit(&mut t, anchor, overhead_ns, &mut events);
            for (k, &ctx) in kernel_ctx.iter().enumerate() {
                let d = kernel_time_ns[k][r][it];
                gker[ctx as usize] += d;
                emit(&mut t, ctx, d, &mut events);
            }
            if copy_ns > 0 {
                gxcopy[copy as usize] += copy_ns;
                emit(&mut t, copy, copy_ns, &mut events);
            }
            emit(&mut t, root, gap_ns, &mut events);
        }

        bodies.push(ProfileBody {
            profile_id: pid,
            records: records_from_costs(
                &cct,
                &[
                    MetricCost {
                        inclusive: 0,
                        exclusive: 1,
                        exclusive_ns: cpu,
                    },
                    MetricCost {
                        inclusive: 2,
                        exclusive: 3,
                        exclusive_ns: gker,
                    },
                    MetricCost {
                        inclusive: 4,
                        exclusive: 5,
                        exclusive_ns: gxcopy,
                    },
                ],
            ),
        });
        traces.push(TraceBody {
            profile_id: pid,
            t_begin_ns: 0,
            t_end_ns: t,
            events,
        });
        boundaries_ns.push(bounds);
        t_end_ns.push(t);
        trace_ids.push(pid);
    }

    let mut all_bodies = vec![summary_body(&bodies)];
    all_bodies.extend(bodies);

    let balance_ratio = kernel_time_ns
        .iter()
        .map(|per_rank| {
            let totals: Vec<f64> = per_rank
                .iter()
                .map(|row| ns_to_s(row.iter().sum()))
                .collect();
            let max = totals.iter().cloned().fold(0.0, f64::max);
            if max == 0.0 {
                1.0
            } else {
                totals.iter().sum::<f64>() / totals.len() as f64 / max
            }
        })
        .collect();

    let truth = IterTruth {
        anchor_ctx: anchor,
        kernel_parent_ctx: kparent,
        copy_ctx: copy,
        kernel_ctx,
        kernel_names: cfg.kernels.iter().map(|k| k.name.clone()).collect(),
        trace_ids,
        kernel_time_ns,
        boundaries_ns,
        t_end_ns,
        balance_ratio,
    };
    let image = DatabaseImage {
        meta: Meta {
            metrics,
            profiles,
            cct,
        },
        profiles: all_bodies,
        traces,
    };
    Ok((image, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_kernel() -> IterScenarioConfig {
        IterScenarioConfig {
            n_ranks: 1,
            n_iterations: 1,
            kernels: vec![KernelSpec {
                name: "k".into(),
                mean_time_s: 1.0,
                across_rank_spread: vec![],
                within_rank_jitter_frac: 0.0,
            }],
            anchor_name: default_anchor(),
            kernel_parent: default_kernel_parent(),
            copy_time_s: 0.0,
            setup_s: 0.0,
            loop_overhead_s: 0.0,
            gap_s: 0.0,
            ranks_per_node: 8,
            seed: 0,
        }
    }

    #[test]
    fn single_kernel_single_iteration() {
        let (image, truth) = generate_iterative_scenario(&one_kernel()).unwrap();
        let trace = &image.traces[0];
        let ctxs: Vec<CtxId> = trace.events.iter().map(|e| e.ctx_id).collect();
        assert_eq!(ctxs, vec![truth.anchor_ctx, truth.kernel_ctx[0], 0]);
        let k = image.profiles[1]
            .records
            .iter()
            .find(|r| r.ctx_id == truth.kernel_ctx[0] && r.metric_id == 0)
            .unwrap();
        assert_eq!(k.value, 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = one_kernel();
        c.n_iterations = 0;
        assert!(generate_iterative_scenario(&c).is_err());
        let mut c = one_kernel();
        c.kernels[0].within_rank_jitter_frac = 0.5;
        assert!(generate_iterative_scenario(&c).is_err());
        let mut c = one_kernel();
        c.kernels[0].across_rank_spread = vec![1.0, 2.0];
        assert!(generate_iterative_scenario(&c).is_err());
        let mut c = one_kernel();
        c.kernels[0].across_rank_spread = vec![0.0];
        assert!(generate_iterative_scenario(&c).is_err());
    }

    #[test]
    fn serde_defaults_fill_in() {
        let json = r#"{"n_ranks":2,"n_iterations":3,"kernels":[{"name":"k","mean_time_s":0.5}]}"#;
        let cfg: IterScenarioConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.anchor_name, "scf_iteration");
        assert!(generate_iterative_scenario(&cfg).is_ok());
    }
}
