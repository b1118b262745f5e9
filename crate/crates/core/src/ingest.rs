//! Read layer: pruning evaluated once on the summary profile, then selective
//! parallel extraction of profile and trace slices.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glob::glob_match;
pub use crate::par::hardware_concurrency;
use crate::par::with_workers;
use crate::store::{
    CtxId, DbHandle, MetricId, NodeKind, ProfileId, ProfileRecord, Scope, StoreError, TraceEvent,
    SUMMARY_PROFILE,
};

/// Name of the inclusive metric whose root value is the total run time.
pub const TOTAL_TIME_METRIC: &str = "cputime";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("database has no summary profile")]
    NoSummary,
    #[error("database has no inclusive \"{TOTAL_TIME_METRIC}\" metric")]
    NoTotalMetric,
    #[error("summary profile has zero total time at the root")]
    DegenerateSummary,
    #[error("invalid prune strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PruneStrategy {
    /// Drop contexts whose summary inclusive time is below this fraction of
    /// the root's.
    MinInclusiveShare { threshold_frac: f64 },
    DropKind { kind: NodeKind },
    /// Keep contexts matching the glob but drop everything beneath them.
    CollapseSubtreeGlob { name_glob: String },
}

impl PruneStrategy {
    pub fn min_share(threshold_frac: f64) -> Self {
        PruneStrategy::MinInclusiveShare { threshold_frac }
    }
}

/// Sorted set of retained context ids, closed under parent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeepSet {
    ids: Vec<CtxId>,
    universe: usize,
}

impl KeepSet {
    pub fn all(n_ctx: usize) -> Self {
        KeepSet {
            ids: (0..n_ctx as CtxId).collect(),
            universe: n_ctx,
        }
    }

    fn from_mask(mask: &[bool]) -> Self {
        KeepSet {
            ids: mask
                .iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(i, _)| i as CtxId)
                .collect(),
            universe: mask.len(),
        }
    }

    pub fn ids(&self) -> &[CtxId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: CtxId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// True when nothing was pruned.
    pub fn is_complete(&self) -> bool {
        self.ids.len() == self.universe
    }
}

/// Summary inclusive total-time value per context (dense, sparse zeros).
pub fn summary_inclusive_times(h: &DbHandle) -> Result<Vec<f64>, IngestError> {
    let meta = h.meta();
    if h.profile_entry(SUMMARY_PROFILE).is_none() {
        return Err(IngestError::NoSummary);
    }
    let metric = meta
        .metric_by_name(TOTAL_TIME_METRIC, Scope::Inclusive)
        .ok_or(IngestError::NoTotalMetric)?
        .id;
    let mut out = vec![0.0; meta.cct.len()];
    for r in h.read_profile_records(SUMMARY_PROFILE, None, Some(&[metric]))? {
        if let Some(v) = out.get_mut(r.ctx_id as usize) {
            *v = r.value;
        }
    }
    Ok(out)
}

/// Evaluates the pruning strategies on the summary profile. A context is
/// kept iff every strategy keeps it and its parent is kept; the root is
/// always kept.
pub fn compute_keep_set(h: &DbHandle, strategies: &[PruneStrategy]) -> Result<KeepSet, IngestError> {
    let cct = &h.meta().cct;
    let n = cct.len();
    let mut keep = vec![true; n];
    if strategies.is_empty() {
        return Ok(KeepSet::all(n));
    }

    let mut summary: Option<Vec<f64>> = None;
    for s in strategies {
        match s {
            PruneStrategy::MinInclusiveShare { threshold_frac } => {
                if !(0.0..=f64::MAX).contains(threshold_frac) {
                    return Err(IngestError::InvalidStrategy(format!(
                        "threshold {threshold_frac} is negative or not a number"
                    )));
                }
                if summary.is_none() {
                    summary = Some(summary_inclusive_times(h)?);
                }
                let incl = summary.as_ref().unwrap();
                let root = incl[0];
                if root <= 0.0 {
                    return Err(IngestError::DegenerateSummary);
                }
                let cutoff = threshold_frac * root;
                for (k, &v) in keep.iter_mut().zip(incl).skip(1) {
                    if v < cutoff {
                        *k = false;
                    }
                }
            }
            PruneStrategy::DropKind { kind } => {
                for node in &cct.nodes()[1..] {
                    if node.kind == *kind {
                        keep[node.id as usize] = false;
                    }
                }
            }
            PruneStrategy::CollapseSubtreeGlob { name_glob } => {
                if name_glob.is_empty() {
                    return Err(IngestError::InvalidStrategy("empty collapse glob".into()));
                }
                let mut collapsed = vec![false; n];
                for node in cct.nodes() {
                    let under = node.parent.is_some_and(|p| collapsed[p as usize]);
                    if under {
                        keep[node.id as usize] = false;
                    }
                    collapsed[node.id as usize] = under || glob_match(name_glob, &node.name);
                }
            }
        }
    }

    // parent closure: ids are topological, so one forward pass suffices
    keep[0] = true;
    for node in &cct.nodes()[1..] {
        let p = node.parent.expect("non-root") as usize;
        if !keep[p] {
            keep[node.id as usize] = false;
        }
    }
    Ok(KeepSet::from_mask(&keep))
}

/// Columnar (profile, context, metric, value) rows sorted by key.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SliceTable {
    pub profile_id: Vec<ProfileId>,
    pub ctx_id: Vec<CtxId>,
    pub metric_id: Vec<MetricId>,
    pub value: Vec<f64>,
}

impl SliceTable {
    pub fn len(&self) -> usize {
        self.profile_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profile_id.is_empty()
    }

    pub fn push(&mut self, profile_id: ProfileId, r: &ProfileRecord) {
        self.profile_id.push(profile_id);
        self.ctx_id.push(r.ctx_id);
        self.metric_id.push(r.metric_id);
        self.value.push(r.value);
    }

    pub fn rows(&self) -> impl Iterator<Item = (ProfileId, CtxId, MetricId, f64)> + '_ {
        (0..self.len()).map(|i| {
            (
                self.profile_id[i],
                self.ctx_id[i],
                self.metric_id[i],
                self.value[i],
            )
        })
    }

    /// Exact equality including the bit pattern of every value.
    pub fn bit_eq(&self, other: &SliceTable) -> bool {
        self.profile_id == other.profile_id
            && self.ctx_id == other.ctx_id
            && self.metric_id == other.metric_id
            && self.value.len() == other.value.len()
            && self
                .value
                .iter()
                .zip(&other.value)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Trace events of several profiles, sorted by (profile, timestamp).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TraceTable {
    pub profile_id: Vec<ProfileId>,
    pub timestamp_ns: Vec<u64>,
    pub ctx_id: Vec<CtxId>,
}

impl TraceTable {
    pub fn len(&self) -> usize {
        self.profile_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profile_id.is_empty()
    }

    pub fn events_of(&self, profile_id: ProfileId) -> Vec<TraceEvent> {
        let lo = self.profile_id.partition_point(|&p| p < profile_id);
        let hi = self.profile_id.partition_point(|&p| p <= profile_id);
        (lo..hi)
            .map(|i| TraceEvent {
                timestamp_ns: self.timestamp_ns[i],
                ctx_id: self.ctx_id[i],
            })
            .collect()
    }
}

/// One selective read against a single profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadRequest {
    pub profile_id: ProfileId,
    pub ctx_ids: Option<Vec<CtxId>>,
    pub metric_ids: Option<Vec<MetricId>>,
}

/// Executes the requests on `workers` threads; results keep request order.
pub fn read_requests(
    h: &DbHandle,
    requests: &[ReadRequest],
    workers: usize,
) -> Result<Vec<Vec<ProfileRecord>>, StoreError> {
    let read = |r: &ReadRequest| {
        h.read_profile_records(r.profile_id, r.ctx_ids.as_deref(), r.metric_ids.as_deref())
    };
    if workers <= 1 {
        return requests.iter().map(read).collect();
    }
    with_workers(workers, || requests.par_iter().map(read).collect())
}

fn sorted_unique(ids: &[ProfileId]) -> Vec<ProfileId> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Selectively reads the kept contexts and requested metrics of every listed
/// profile. The result does not depend on `workers`.
pub fn ingest_profiles(
    h: &DbHandle,
    profile_ids: &[ProfileId],
    keep: &KeepSet,
    metric_ids: Option<&[MetricId]>,
    workers: usize,
) -> Result<SliceTable, IngestError> {
    let ids = sorted_unique(profile_ids);
    let ctx = (!keep.is_complete()).then(|| keep.ids().to_vec());
    let requests: Vec<ReadRequest> = ids
        .iter()
        .map(|&profile_id| ReadRequest {
            profile_id,
            ctx_ids: ctx.clone(),
            metric_ids: metric_ids.map(<[MetricId]>::to_vec),
        })
        .collect();
    let parts = read_requests(h, &requests, workers)?;
    let mut out = SliceTable::default();
    for (pid, records) in ids.iter().zip(&parts) {
        for r in records {
            out.push(*pid, r);
        }
    }
    Ok(out)
}

/// Events in `[t0_ns, t1_ns)` of each listed trace plus each trace's
/// carry-in event.
pub fn ingest_traces(
    h: &DbHandle,
    profile_ids: &[ProfileId],
    t0_ns: u64,
    t1_ns: u64,
    workers: usize,
) -> Result<(TraceTable, BTreeMap<ProfileId, Option<TraceEvent>>), IngestError> {
    let ids = sorted_unique(profile_ids);
    let read = |&pid: &ProfileId| h.read_trace_window(pid, t0_ns, t1_ns);
    let windows: Vec<_> = if workers <= 1 {
        ids.iter().map(read).collect::<Result<_, _>>()?
    } else {
        with_workers(workers, || ids.par_iter().map(read).collect::<Result<_, _>>())?
    };
    let mut table = TraceTable::default();
    let mut carry = BTreeMap::new();
    for (&pid, w) in ids.iter().zip(windows) {
        for e in &w.events {
            table.profile_id.push(pid);
            table.timestamp_ns.push(e.timestamp_ns);
            table.ctx_id.push(e.ctx_id);
        }
        carry.insert(pid, w.carry_in);
    }
    Ok((table, carry))
}
