//! Synthetic databases with known ground truth: an iterative GPU workload and
//! a congested multi-rack allocation.

mod congestion;
mod iterative;
pub mod presets;
mod rng;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{
    CallingContextTree, CctNode, CtxId, MetricId, NodeKind, ProfileBody, ProfileRecord,
};

pub use congestion::{
    generate_congestion_scenario, CallsiteSpec, CongestionScenarioConfig, CongestionTruth,
    RackScheme,
};
pub use iterative::{generate_iterative_scenario, IterScenarioConfig, IterTruth, KernelSpec};
pub use rng::XorShift64Star;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
}

/// Either scenario config, as accepted from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Iterative(IterScenarioConfig),
    Congestion(CongestionScenarioConfig),
}

impl ScenarioConfig {
    pub fn seed_mut(&mut self) -> &mut u64 {
        match self {
            ScenarioConfig::Iterative(c) => &mut c.seed,
            ScenarioConfig::Congestion(c) => &mut c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    Iterative(IterTruth),
    Congestion(CongestionTruth),
}

/// Nanoseconds to seconds, the unit stored in profile records.
pub fn ns_to_s(ns: u64) -> f64 {
    ns as f64 / 1e9
}

pub(crate) fn s_to_ns(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}

/// Balanced tree of the given depth (levels) and fanout, ids in breadth-first
/// order. Node kinds below the root are drawn from the seeded stream.
pub fn generate_cct(depth: u32, fanout: u32, name_prefix: &str, seed: u64) -> CallingContextTree {
    assert!(depth >= 1, "depth must be at least 1");
    let mut rng = XorShift64Star::new(seed);
    let mut nodes = vec![CctNode {
        id: 0,
        parent: None,
        kind: NodeKind::Function,
        name: name_prefix.to_string(),
    }];
    let mut level: Vec<CtxId> = vec![0];
    for d in 1..depth {
        let mut next = Vec::with_capacity(level.len() * fanout as usize);
        let leaf_level = d + 1 == depth;
        for &parent in &level {
            for _ in 0..fanout {
                let id = nodes.len() as CtxId;
                let roll = rng.below(10);
                let kind = match (leaf_level, roll) {
                    (true, 0..=2) => NodeKind::Line,
                    (false, 0..=1) => NodeKind::Loop,
                    _ => NodeKind::Function,
                };
                nodes.push(CctNode {
                    id,
                    parent: Some(parent),
                    kind,
                    name: format!("{name_prefix}_{id}"),
                });
                next.push(id);
            }
        }
        level = next;
    }
    CallingContextTree::new(nodes).expect("breadth-first ids are topological")
}

/// One metric pair (inclusive id, exclusive id) with dense per-context
/// exclusive nanoseconds.
pub(crate) struct MetricCost {
    pub inclusive: MetricId,
    pub exclusive: MetricId,
    pub exclusive_ns: Vec<u64>,
}

/// Sorted profile records from exclusive costs: inclusive values are the
/// exclusive values summed over each subtree. Zero values are not stored.
pub(crate) fn records_from_costs(cct: &CallingContextTree, costs: &[MetricCost]) -> Vec<ProfileRecord> {
    let n = cct.len();
    let inclusive: Vec<Vec<u64>> = costs
        .iter()
        .map(|c| {
            let mut incl = c.exclusive_ns.clone();
            for id in (1..n).rev() {
                let p = cct.parent(id as CtxId).expect("non-root") as usize;
                incl[p] += incl[id];
            }
            incl
        })
        .collect();
    let mut out = Vec::new();
    let mut row: Vec<(MetricId, u64)> = Vec::with_capacity(costs.len() * 2);
    for ctx in 0..n {
        row.clear();
        for (c, incl) in costs.iter().zip(&inclusive) {
            row.push((c.inclusive, incl[ctx]));
            row.push((c.exclusive, c.exclusive_ns[ctx]));
        }
        row.sort_unstable_by_key(|&(m, _)| m);
        for &(metric_id, ns) in &row {
            if ns > 0 {
                out.push(ProfileRecord {
                    ctx_id: ctx as CtxId,
                    metric_id,
                    value: ns_to_s(ns),
                });
            }
        }
    }
    out
}

/// Summary profile: per-key sums over the rank profiles, in rank order.
pub(crate) fn summary_body(bodies: &[ProfileBody]) -> ProfileBody {
    let mut acc: BTreeMap<(CtxId, MetricId), f64> = BTreeMap::new();
    for b in bodies {
        for r in &b.records {
            *acc.entry(r.key()).or_insert(0.0) += r.value;
        }
    }
    ProfileBody {
        profile_id: crate::store::SUMMARY_PROFILE,
        records: acc
            .into_iter()
            .map(|((ctx_id, metric_id), value)| ProfileRecord {
                ctx_id,
                metric_id,
                value,
            })
            .collect(),
    }
}
