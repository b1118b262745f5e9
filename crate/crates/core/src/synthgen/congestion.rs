use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    iterative::metric_table, ns_to_s, records_from_costs, s_to_ns, summary_body, MetricCost,
    SynthError, XorShift64Star,
};
use crate::store::{
    CallingContextTree, CctNode, CtxId, DatabaseImage, Meta, NodeKind, ProfileBody, ProfileDesc,
    ProfileId, Scope, TraceBody, TraceEvent,
};

/// Sequential placement of node indices onto rack/chassis/slot coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RackScheme {
    pub first_rack: u32,
    pub chassis_per_rack: u32,
    pub slots_per_chassis: u32,
}

impl Default for RackScheme {
    fn default() -> Self {
        RackScheme {
            first_rack: 4100,
            chassis_per_rack: 8,
            slots_per_chassis: 4,
        }
    }
}

impl RackScheme {
    pub fn nodes_per_rack(&self) -> usize {
        (self.chassis_per_rack * self.slots_per_chassis) as usize
    }

    /// (rack, chassis, slot) of a node index.
    pub fn coords(&self, node: usize) -> (u32, u32, u32) {
        let per_rack = self.nodes_per_rack();
        let rack = self.first_rack + (node / per_rack) as u32;
        let within = node % per_rack;
        let slots = self.slots_per_chassis as usize;
        (rack, (within / slots) as u32, (within % slots) as u32)
    }

    pub fn hostname(&self, node: usize) -> String {
        let (rack, chassis, slot) = self.coords(node);
        format!("x{rack}c{chassis}s{slot}b0n0")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallsiteSpec {
    pub routine_name: String,
    /// Callers from just below `main` down to the routine.
    #[serde(default)]
    pub call_chain: Vec<String>,
    pub base_time_s: f64,
}

fn default_root() -> String {
    "main".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionScenarioConfig {
    pub n_nodes: u32,
    pub ranks_per_node: u32,
    #[serde(default)]
    pub racks: RackScheme,
    pub outlier_node_count: u32,
    /// Rack ids hosting the outlier nodes; empty means any rack.
    #[serde(default)]
    pub outlier_racks: Vec<u32>,
    pub mpi_callsites: Vec<CallsiteSpec>,
    /// Index into `mpi_callsites` of the call site slowed on outlier nodes.
    #[serde(default)]
    pub congested_callsite: usize,
    /// Exclusive time of the root per rank.
    pub compute_time_s: f64,
    pub congestion_multiplier: f64,
    #[serde(default)]
    pub jitter_frac: f64,
    #[serde(default = "default_root")]
    pub root_name: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionTruth {
    pub callsite_ctx: Vec<CtxId>,
    pub congested_ctx: CtxId,
    /// Node indices (ascending) whose ranks were slowed.
    pub outlier_nodes: Vec<usize>,
    pub outlier_hostnames: Vec<String>,
    pub affected_racks: Vec<u32>,
    pub hostnames: Vec<String>,
    /// Per node: mean over its ranks of the congested call-site time.
    pub node_callsite_mean_s: Vec<f64>,
    /// Per node: mean over its ranks of total (root inclusive) time.
    pub node_total_mean_s: Vec<f64>,
}

impl CongestionScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_nodes == 0 || self.ranks_per_node == 0 {
            return bad("n_nodes and ranks_per_node must be at least 1".into());
        }
        if self.racks.chassis_per_rack == 0 || self.racks.slots_per_chassis == 0 {
            return bad("rack scheme needs at least one chassis and slot".into());
        }
        if self.outlier_node_count > self.n_nodes {
            return bad(format!(
                "{} outlier nodes exceed {} nodes",
                self.outlier_node_count, self.n_nodes
            ));
        }
        // A multiplier of exactly 1 is the no-congestion control case.
        if !self.congestion_multiplier.is_finite() || self.congestion_multiplier < 1.0 {
            return bad("congestion_multiplier must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.jitter_frac) {
            return bad("jitter_frac must lie in [0, 0.5)".into());
        }
        if !self.compute_time_s.is_finite() || self.compute_time_s < 0.0 {
            return bad("compute_time_s must be non-negative".into());
        }
        if self.mpi_callsites.is_empty() {
            return bad("at least one call site is required".into());
        }
        if self.congested_callsite >= self.mpi_callsites.len() {
            return bad(format!(
                "congested_callsite {} out of range",
                self.congested_callsite
            ));
        }
        let mut seen = BTreeSet::new();
        for c in &self.mpi_callsites {
            if c.routine_name.is_empty() || c.call_chain.iter().any(String::is_empty) {
                return bad("call-site names must be nonempty".into());
            }
            if !c.base_time_s.is_finite() || c.base_time_s < 0.0 {
                return bad(format!("{}: base_time_s must be non-negative", c.routine_name));
            }
            if !seen.insert((&c.call_chain, &c.routine_name)) {
                return bad(format!(
                    "call site {} repeated with identical chain",
                    c.routine_name
                ));
            }
        }
        let n_racks = (self.n_nodes as usize).div_ceil(self.racks.nodes_per_rack());
        let last_rack = self.racks.first_rack + n_racks as u32;
        let mut capacity = 0usize;
        let mut distinct = BTreeSet::new();
        for &r in &self.outlier_racks {
            if r < self.racks.first_rack || r >= last_rack {
                return bad(format!("outlier rack {r} hosts no nodes"));
            }
            if !distinct.insert(r) {
                return bad(format!("outlier rack {r} listed twice"));
            }
            let first = (r - self.racks.first_rack) as usize * self.racks.nodes_per_rack();
            capacity += (self.n_nodes as usize - first).min(self.racks.nodes_per_rack());
        }
        if !self.outlier_racks.is_empty() {
            let count = self.outlier_node_count as usize;
            if count > capacity {
                return bad(format!("{count} outliers do not fit in the listed racks"));
            }
            if count > 0 && count < self.outlier_racks.len() {
                return bad("fewer outlier nodes than outlier racks".into());
            }
        }
        Ok(())
    }
}

/// Picks outlier nodes: one node per listed rack, then whole chassis in a
/// seeded order, then a partial chassis for the remainder.
fn pick_outliers(cfg: &CongestionScenarioConfig, rng: &mut XorShift64Star) -> BTreeSet<usize> {
    let scheme = cfg.racks;
    let n_nodes = cfg.n_nodes as usize;
    let count = cfg.outlier_node_count as usize;
    let mut picked = BTreeSet::new();
    if count == 0 {
        return picked;
    }
    let per_rack = scheme.nodes_per_rack();
    let slots = scheme.slots_per_chassis as usize;
    let racks: Vec<u32> = if cfg.outlier_racks.is_empty() {
        let n_racks = n_nodes.div_ceil(per_rack);
        (0..n_racks as u32).map(|i| scheme.first_rack + i).collect()
    } else {
        cfg.outlier_racks.clone()
    };
    let rack_nodes = |rack: u32| {
        let first = (rack - scheme.first_rack) as usize * per_rack;
        first..(first + per_rack).min(n_nodes)
    };

    if !cfg.outlier_racks.is_empty() {
        for &rack in &racks {
            let nodes = rack_nodes(rack);
            let offset = rng.below(nodes.len() as u64) as usize;
            picked.insert(nodes.start + offset);
        }
    }

    let mut chassis: Vec<(u32, u32)> = racks
        .iter()
        .flat_map(|&r| (0..scheme.chassis_per_rack).map(move |c| (r, c)))
        .collect();
    rng.shuffle(&mut chassis);
    for (rack, c) in chassis {
        if picked.len() >= count {
            break;
        }
        let base = (rack - scheme.first_rack) as usize * per_rack + c as usize * slots;
        for node in base..base + slots {
            if node < n_nodes && picked.len() < count {
                picked.insert(node);
            }
        }
    }
    picked
}

/// Builds a multi-rack allocation where ranks on outlier nodes spend
/// `congestion_multiplier` times longer in the designated call site.
pub fn generate_congestion_scenario(
    cfg: &CongestionScenarioConfig,
) -> Result<(DatabaseImage, CongestionTruth), SynthError> {
    cfg.validate()?;

    let mut nodes = vec![CctNode {
        id: 0,
        parent: None,
        kind: NodeKind::Function,
        name: cfg.root_name.clone(),
    }];
    let mut by_path: BTreeMap<(CtxId, &str), CtxId> = BTreeMap::new();
    let mut callsite_ctx = Vec::with_capacity(cfg.mpi_callsites.len());
    for site in &cfg.mpi_callsites {
        let mut parent: CtxId = 0;
        for name in &site.call_chain {
            parent = *by_path.entry((parent, name.as_str())).or_insert_with(|| {
                let id = nodes.len() as CtxId;
                nodes.push(CctNode {
                    id,
                    parent: Some(parent),
                    kind: NodeKind::Function,
                    name: name.clone(),
                });
                id
            });
        }
        let id = nodes.len() as CtxId;
        nodes.push(CctNode {
            id,
            parent: Some(parent),
            kind: NodeKind::Function,
            name: site.routine_name.clone(),
        });
        callsite_ctx.push(id);
    }
    let cct = CallingContextTree::new(nodes).expect("generator tree is topological");

    let mut rng = XorShift64Star::new(cfg.seed);
    let outliers = pick_outliers(cfg, &mut rng);
    let scheme = cfg.racks;
    let n_nodes = cfg.n_nodes as usize;
    let rpn = cfg.ranks_per_node as usize;
    let hostnames: Vec<String> = (0..n_nodes).map(|n| scheme.hostname(n)).collect();

    let metrics = metric_table(&[("cputime", Scope::Inclusive), ("cputime", Scope::Exclusive)]);
    let compute_ns = s_to_ns(cfg.compute_time_s);
    let mut profiles = vec![ProfileDesc::summary()];
    let mut bodies = Vec::with_capacity(n_nodes * rpn);
    let mut traces = Vec::with_capacity(n_nodes * rpn);
    let mut node_site = vec![0.0; n_nodes];
    let mut node_total = vec![0.0; n_nodes];

    for node in 0..n_nodes {
        let slow = outliers.contains(&node);
        for local in 0..rpn {
            let rank = node * rpn + local;
            let pid = rank as ProfileId + 1;
            profiles.push(ProfileDesc {
                id: pid,
                rank: rank as i32,
                thread: 0,
                hostname: hostnames[node].clone(),
                posix_node_id: node as u64,
            });

            let mut excl = vec![0u64; cct.len()];
            let mut events = Vec::with_capacity(cfg.mpi_callsites.len() + 1);
            let jitter = |rng: &mut XorShift64Star| 1.0 + cfg.jitter_frac * rng.next_signed();
            let root_ns = s_to_ns(ns_to_s(compute_ns) * jitter(&mut rng));
            events.push(TraceEvent {
                timestamp_ns: 0,
                ctx_id: 0,
            });
            excl[0] = root_ns;
            let mut t = root_ns;
            for (i, (site, &ctx)) in cfg.mpi_callsites.iter().zip(&callsite_ctx).enumerate() {
                let mult = if slow && i == cfg.congested_callsite {
                    cfg.congestion_multiplier
                } else {
                    1.0
                };
                let d = s_to_ns(site.base_time_s * mult * jitter(&mut rng));
                events.push(TraceEvent {
                    timestamp_ns: t,
                    ctx_id: ctx,
                });
                excl[ctx as usize] += d;
                t += d;
                if i == cfg.congested_callsite {
                    node_site[node] += ns_to_s(d);
                }
            }
            node_total[node] += ns_to_s(t);

            bodies.push(ProfileBody {
                profile_id: pid,
                records: records_from_costs(
                    &cct,
                    &[MetricCost {
                        inclusive: 0,
                        exclusive: 1,
                        exclusive_ns: excl,
                    }],
                ),
            });
            traces.push(TraceBody {
                profile_id: pid,
                t_begin_ns: 0,
                t_end_ns: t,
                events,
            });
        }
    }
    for v in node_site.iter_mut().chain(node_total.iter_mut()) {
        *v /= rpn as f64;
    }

    let mut all_bodies = vec![summary_body(&bodies)];
    all_bodies.extend(bodies);

    let outlier_nodes: Vec<usize> = outliers.into_iter().collect();
    let affected_racks: BTreeSet<u32> = outlier_nodes
        .iter()
        .map(|&n| scheme.coords(n).0)
        .collect();
    let truth = CongestionTruth {
        congested_ctx: callsite_ctx[cfg.congested_callsite],
        callsite_ctx,
        outlier_hostnames: outlier_nodes.iter().map(|&n| hostnames[n].clone()).collect(),
        outlier_nodes,
        affected_racks: affected_racks.into_iter().collect(),
        hostnames,
        node_callsite_mean_s: node_site,
        node_total_mean_s: node_total,
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

    fn small() -> CongestionScenarioConfig {
        CongestionScenarioConfig {
            n_nodes: 40,
            ranks_per_node: 2,
            racks: RackScheme::default(),
            outlier_node_count: 6,
            outlier_racks: vec![4100, 4101],
            mpi_callsites: vec![
                CallsiteSpec {
                    routine_name: "MPI_Allreduce".into(),
                    call_chain: vec!["solve".into()],
                    base_time_s: 0.5,
                },
                CallsiteSpec {
                    routine_name: "MPI_Allreduce".into(),
                    call_chain: vec!["setup".into(), "coarsen".into()],
                    base_time_s: 0.25,
                },
            ],
            congested_callsite: 1,
            compute_time_s: 1.0,
            congestion_multiplier: 3.0,
            jitter_frac: 0.0,
            root_name: "main".into(),
            seed: 3,
        }
    }

    #[test]
    fn hostnames_follow_scheme() {
        let s = RackScheme::default();
        assert_eq!(s.hostname(0), "x4100c0s0b0n0");
        assert_eq!(s.hostname(5), "x4100c1s1b0n0");
        assert_eq!(s.hostname(32), "x4101c0s0b0n0");
    }

    #[test]
    fn outliers_cover_listed_racks() {
        let (_, truth) = generate_congestion_scenario(&small()).unwrap();
        assert_eq!(truth.outlier_nodes.len(), 6);
        assert_eq!(truth.affected_racks, vec![4100, 4101]);
    }

    #[test]
    fn outlier_ranks_are_slowed() {
        let cfg = small();
        let (_, truth) = generate_congestion_scenario(&cfg).unwrap();
        for (node, &mean) in truth.node_callsite_mean_s.iter().enumerate() {
            let expected = if truth.outlier_nodes.contains(&node) {
                0.75
            } else {
                0.25
            };
            assert!((mean - expected).abs() < 1e-9, "node {node}: {mean}");
        }
    }

    #[test]
    fn shared_chain_prefix_is_one_context() {
        let mut cfg = small();
        cfg.mpi_callsites.push(CallsiteSpec {
            routine_name: "MPI_Bcast".into(),
            call_chain: vec!["setup".into()],
            base_time_s: 0.1,
        });
        let (image, _) = generate_congestion_scenario(&cfg).unwrap();
        let setups = image
            .meta
            .cct
            .nodes()
            .iter()
            .filter(|n| n.name == "setup")
            .count();
        assert_eq!(setups, 1);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small();
        c.outlier_node_count = 41;
        assert!(generate_congestion_scenario(&c).is_err());
        let mut c = small();
        c.congestion_multiplier = 0.5;
        assert!(generate_congestion_scenario(&c).is_err());
        let mut c = small();
        c.outlier_racks = vec![4200];
        assert!(generate_congestion_scenario(&c).is_err());
        let mut c = small();
        c.congested_callsite = 2;
        assert!(generate_congestion_scenario(&c).is_err());
    }
}
