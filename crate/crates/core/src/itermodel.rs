//! Iterative-phase detection on traces, per-interval profile
//! re-materialization, and the (node x trace x iteration) model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::frame::{Column, Table};
use crate::par::with_workers;
use crate::store::{CallingContextTree, CtxId, DbHandle, ProfileId, StoreError, TraceEvent};

/// Iteration index reserved for time outside detected iterations.
pub const GAP_ITERATION: i64 = -1;

#[derive(Debug, Error)]
pub enum IterError {
    #[error("trace references context {0}, which is not in the tree")]
    DanglingContext(CtxId),
    #[error("no context repeats periodically")]
    NoPeriodicity,
    #[error("anchor context {0} is never entered")]
    NoIterations(CtxId),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Interval {
    pub t0_ns: u64,
    pub t1_ns: u64,
}

impl Interval {
    pub fn duration_ns(&self) -> u64 {
        self.t1_ns - self.t0_ns
    }
}

/// Events of one trace (or one window of it). `carry_in` is the event
/// active at the window start; the last event lasts until `t_end_ns`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSlice {
    pub carry_in: Option<TraceEvent>,
    pub events: Vec<TraceEvent>,
    pub t_end_ns: u64,
}

impl TraceSlice {
    pub fn whole(events: Vec<TraceEvent>, t_end_ns: u64) -> Self {
        TraceSlice {
            carry_in: None,
            events,
            t_end_ns,
        }
    }

    fn all_events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.carry_in.iter().chain(&self.events)
    }

    /// `(ctx, start, end)` for each segment, the last one ending at `t_end_ns`.
    fn segments(&self) -> impl Iterator<Item = (CtxId, u64, u64)> + '_ {
        let evs: Vec<&TraceEvent> = self.all_events().collect();
        (0..evs.len()).map(move |i| {
            let end = evs.get(i + 1).map_or(self.t_end_ns, |e| e.timestamp_ns);
            (evs[i].ctx_id, evs[i].timestamp_ns, end.max(evs[i].timestamp_ns))
        })
    }
}

/// Inclusive and exclusive nanoseconds per context, dense by ctx id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntervalProfile {
    pub inclusive_ns: Vec<u64>,
    pub exclusive_ns: Vec<u64>,
}

impl IntervalProfile {
    pub fn zeros(n_ctx: usize) -> Self {
        IntervalProfile {
            inclusive_ns: vec![0; n_ctx],
            exclusive_ns: vec![0; n_ctx],
        }
    }

    pub fn inclusive(&self, ctx: CtxId) -> u64 {
        self.inclusive_ns[ctx as usize]
    }

    pub fn exclusive(&self, ctx: CtxId) -> u64 {
        self.exclusive_ns[ctx as usize]
    }

    pub fn add(&mut self, other: &IntervalProfile) {
        for (a, b) in self.inclusive_ns.iter_mut().zip(&other.inclusive_ns) {
            *a += b;
        }
        for (a, b) in self.exclusive_ns.iter_mut().zip(&other.exclusive_ns) {
            *a += b;
        }
    }
}

fn check_ctx(cct: &CallingContextTree, ctx: CtxId) -> Result<(), IterError> {
    if cct.contains(ctx) {
        Ok(())
    } else {
        Err(IterError::DanglingContext(ctx))
    }
}

/// Integrates the trace segments clipped to `interval` over the tree.
pub fn rematerialize(
    trace: &TraceSlice,
    interval: Interval,
    cct: &CallingContextTree,
) -> Result<IntervalProfile, IterError> {
    let mut p = IntervalProfile::zeros(cct.len());
    for (ctx, s, e) in trace.segments() {
        check_ctx(cct, ctx)?;
        let lo = s.max(interval.t0_ns);
        let hi = e.min(interval.t1_ns);
        if hi > lo {
            p.exclusive_ns[ctx as usize] += hi - lo;
        }
    }
    p.inclusive_ns.clone_from(&p.exclusive_ns);
    // children have larger ids than their parents
    for node in cct.nodes().iter().rev() {
        if let Some(parent) = node.parent {
            p.inclusive_ns[parent as usize] += p.inclusive_ns[node.id as usize];
        }
    }
    Ok(p)
}

/// For each event, the contexts newly entered relative to the previous
/// event's call path.
fn entered_sets<'a>(
    events: &'a [TraceEvent],
    cct: &'a CallingContextTree,
) -> impl Iterator<Item = (u64, Vec<CtxId>)> + 'a {
    let mut prev: Option<CtxId> = None;
    events.iter().map(move |e| {
        let leaf = e.ctx_id;
        let mut entered = Vec::new();
        match prev {
            None => entered.extend(cct.ancestors_inclusive(leaf)),
            Some(p) => {
                // walk both paths up to their lowest common ancestor
                let (mut a, mut b) = (leaf, p);
                let (mut da, mut db) = (cct.depth(a), cct.depth(b));
                while da > db {
                    entered.push(a);
                    a = cct.parent(a).expect("depth > 0");
                    da -= 1;
                }
                while db > da {
                    b = cct.parent(b).expect("depth > 0");
                    db -= 1;
                }
                while a != b {
                    entered.push(a);
                    a = cct.parent(a).expect("distinct nodes are below the root");
                    b = cct.parent(b).expect("distinct nodes are below the root");
                }
            }
        }
        prev = Some(leaf);
        (e.timestamp_ns, entered)
    })
}

/// Distinct timestamps at which the call path enters `anchor`'s subtree.
fn entry_times(events: &[TraceEvent], cct: &CallingContextTree, anchor: CtxId) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    for (t, entered) in entered_sets(events, cct) {
        if entered.contains(&anchor) && out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

fn gap_cv(times: &[u64]) -> f64 {
    let gaps: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return f64::INFINITY;
    }
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub const DEFAULT_MIN_ITERS: usize = 3;
pub const DEFAULT_CV_MAX: f64 = 0.2;

/// The context that is entered at least `min_iters` times at regular
/// intervals (entry-gap CV at most `cv_max`) and covers the most time; ties
/// go to the smallest id.
pub fn suggest_anchor(
    trace: &TraceSlice,
    cct: &CallingContextTree,
    min_iters: usize,
    cv_max: f64,
) -> Result<CtxId, IterError> {
    for e in &trace.events {
        check_ctx(cct, e.ctx_id)?;
    }
    let mut entries: Vec<Vec<u64>> = vec![Vec::new(); cct.len()];
    for (t, entered) in entered_sets(&trace.events, cct) {
        for c in entered {
            let v = &mut entries[c as usize];
            if v.last() != Some(&t) {
                v.push(t);
            }
        }
    }
    let whole = Interval {
        t0_ns: 0,
        t1_ns: trace.t_end_ns,
    };
    let covered = rematerialize(&TraceSlice::whole(trace.events.clone(), trace.t_end_ns), whole, cct)?;
    let mut best: Option<(u64, CtxId)> = None;
    for (c, times) in entries.iter().enumerate() {
        if times.len() < min_iters.max(2) || gap_cv(times) > cv_max {
            continue;
        }
        let cov = covered.inclusive_ns[c];
        if best.is_none_or(|(b, _)| cov > b) {
            best = Some((cov, c as CtxId));
        }
    }
    best.map(|(_, c)| c).ok_or(IterError::NoPeriodicity)
}

/// One interval per entry into `anchor`'s subtree: iteration k spans
/// `[b_k, b_{k+1})` and the last one ends at `t_end_ns`.
pub fn detect_iterations(
    events: &[TraceEvent],
    t_end_ns: u64,
    cct: &CallingContextTree,
    anchor: CtxId,
) -> Result<Vec<Interval>, IterError> {
    check_ctx(cct, anchor)?;
    for e in events {
        check_ctx(cct, e.ctx_id)?;
    }
    let bounds: Vec<u64> = entry_times(events, cct, anchor)
        .into_iter()
        .filter(|&t| t < t_end_ns)
        .collect();
    if bounds.is_empty() {
        return Err(IterError::NoIterations(anchor));
    }
    Ok(bounds
        .iter()
        .enumerate()
        .map(|(k, &t0)| Interval {
            t0_ns: t0,
            t1_ns: bounds.get(k + 1).copied().unwrap_or(t_end_ns),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorPolicy {
    Explicit(CtxId),
    Auto,
}

/// One model cell; times are kept in integer nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TriRow {
    pub ctx_id: CtxId,
    pub trace_id: ProfileId,
    pub iteration: i64,
    pub incl_ns: u64,
    pub excl_ns: u64,
}

impl TriRow {
    pub fn time_incl_s(&self) -> f64 {
        self.incl_ns as f64 / 1e9
    }

    pub fn time_excl_s(&self) -> f64 {
        self.excl_ns as f64 / 1e9
    }
}

/// Rows keyed `(ctx_id, trace_id, iteration)` and sorted by that key.
/// Time before the first iteration is kept apart in `gap_rows`.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TriModel {
    pub anchor: Option<CtxId>,
    pub rows: Vec<TriRow>,
    pub gap_rows: Vec<TriRow>,
    pub iterations: BTreeMap<ProfileId, usize>,
    pub boundaries_ns: BTreeMap<ProfileId, Vec<u64>>,
    /// Traces without iterations, with the reason.
    pub skipped: Vec<(ProfileId, String)>,
}

struct TraceResult {
    trace_id: ProfileId,
    intervals: Vec<Interval>,
    gap: Option<IntervalProfile>,
    profiles: Vec<IntervalProfile>,
}

fn process_trace(
    h: &DbHandle,
    pid: ProfileId,
    anchor: CtxId,
) -> Result<Result<TraceResult, String>, IterError> {
    let cct = &h.meta().cct;
    let (events, entry) = h.read_trace(pid)?;
    let intervals = match detect_iterations(&events, entry.t_end_ns, cct, anchor) {
        Ok(iv) => iv,
        Err(e @ IterError::NoIterations(_)) => return Ok(Err(e.to_string())),
        Err(e) => return Err(e),
    };
    let slice = TraceSlice::whole(events, entry.t_end_ns);
    let lead = Interval {
        t0_ns: entry.t_begin_ns,
        t1_ns: intervals[0].t0_ns,
    };
    let gap = if lead.t1_ns > lead.t0_ns {
        Some(rematerialize(&slice, lead, cct)?)
    } else {
        None
    };
    let profiles = intervals
        .iter()
        .map(|&iv| rematerialize(&slice, iv, cct))
        .collect::<Result<_, _>>()?;
    Ok(Ok(TraceResult {
        trace_id: pid,
        intervals,
        gap,
        profiles,
    }))
}

fn push_rows(
    out: &mut Vec<TriRow>,
    p: &IntervalProfile,
    trace_id: ProfileId,
    iteration: i64,
    tracked: Option<&[CtxId]>,
) {
    let mut emit = |c: CtxId| {
        out.push(TriRow {
            ctx_id: c,
            trace_id,
            iteration,
            incl_ns: p.inclusive(c),
            excl_ns: p.exclusive(c),
        })
    };
    match tracked {
        Some(ids) => ids.iter().for_each(|&c| emit(c)),
        None => (0..p.inclusive_ns.len() as CtxId)
            .filter(|&c| p.inclusive(c) > 0)
            .for_each(emit),
    }
}

/// Detects iterations in each trace and re-materializes every iteration.
/// With `tracked`, every listed context gets a row for every iteration
/// (zeros included); otherwise only contexts with time in that iteration.
/// Traces where the anchor is never entered are listed in `skipped`.
pub fn build_tri_model(
    h: &DbHandle,
    profile_ids: &[ProfileId],
    anchor: AnchorPolicy,
    tracked: Option<&[CtxId]>,
    workers: usize,
) -> Result<TriModel, IterError> {
    let cct = &h.meta().cct;
    if let Some(ids) = tracked {
        for &c in ids {
            check_ctx(cct, c)?;
        }
    }
    let mut ids = profile_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let anchor = match anchor {
        AnchorPolicy::Explicit(c) => c,
        AnchorPolicy::Auto => {
            let Some(&first) = ids.first() else {
                return Ok(TriModel::default());
            };
            let (events, entry) = h.read_trace(first)?;
            suggest_anchor(
                &TraceSlice::whole(events, entry.t_end_ns),
                cct,
                DEFAULT_MIN_ITERS,
                DEFAULT_CV_MAX,
            )?
        }
    };
    check_ctx(cct, anchor)?;

    let run = |pid: &ProfileId| process_trace(h, *pid, anchor);
    let results: Vec<_> = if workers <= 1 {
        ids.iter().map(run).collect::<Result<_, _>>()?
    } else {
        with_workers(workers, || ids.par_iter().map(run).collect::<Result<_, _>>())?
    };

    let mut model = TriModel {
        anchor: Some(anchor),
        ..TriModel::default()
    };
    let mut tracked_sorted = tracked.map(<[CtxId]>::to_vec);
    if let Some(t) = tracked_sorted.as_mut() {
        t.sort_unstable();
        t.dedup();
    }
    for (pid, r) in ids.iter().zip(results) {
        let r = match r {
            Ok(r) => r,
            Err(reason) => {
                model.skipped.push((*pid, reason));
                continue;
            }
        };
        model.iterations.insert(r.trace_id, r.intervals.len());
        model
            .boundaries_ns
            .insert(r.trace_id, r.intervals.iter().map(|i| i.t0_ns).collect());
        if let Some(g) = &r.gap {
            push_rows(&mut model.gap_rows, g, r.trace_id, GAP_ITERATION, tracked_sorted.as_deref());
        }
        for (k, p) in r.profiles.iter().enumerate() {
            push_rows(&mut model.rows, p, r.trace_id, k as i64, tracked_sorted.as_deref());
        }
    }
    model.rows.sort_by_key(|r| (r.ctx_id, r.trace_id, r.iteration));
    model.gap_rows.sort_by_key(|r| (r.ctx_id, r.trace_id, r.iteration));
    Ok(model)
}

/// Which model dimension to fix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriFix {
    Iteration(i64),
    Trace(ProfileId),
    Node(CtxId),
}

fn rows_table(rows: &[&TriRow], drop: Option<TriFix>) -> Table {
    let mut cols = Vec::new();
    if !matches!(drop, Some(TriFix::Node(_))) {
        cols.push(Column::u64("ctx_id", rows.iter().map(|r| u64::from(r.ctx_id)).collect()));
    }
    if !matches!(drop, Some(TriFix::Trace(_))) {
        cols.push(Column::u64("trace_id", rows.iter().map(|r| u64::from(r.trace_id)).collect()));
    }
    if !matches!(drop, Some(TriFix::Iteration(_))) {
        cols.push(Column::i64("iteration", rows.iter().map(|r| r.iteration).collect()));
    }
    cols.push(Column::f64("time_incl_s", rows.iter().map(|r| r.time_incl_s()).collect()));
    cols.push(Column::f64("time_excl_s", rows.iter().map(|r| r.time_excl_s()).collect()));
    Table::new(cols).expect("equal-length columns")
}

impl TriModel {
    pub fn n_traces(&self) -> usize {
        self.iterations.len()
    }

    /// Iteration ordinals present in every trace.
    pub fn common_iterations(&self) -> usize {
        self.iterations.values().copied().min().unwrap_or(0)
    }

    pub fn ctx_ids(&self) -> Vec<CtxId> {
        let mut v: Vec<CtxId> = self.rows.iter().map(|r| r.ctx_id).collect();
        v.dedup();
        v
    }

    /// Columns `ctx_id, trace_id, iteration, time_incl_s, time_excl_s`.
    pub fn to_table(&self) -> Table {
        rows_table(&self.rows.iter().collect::<Vec<_>>(), None)
    }

    /// `matrix[trace][iteration]` of inclusive seconds for one context over
    /// the common iterations, traces in id order.
    pub fn matrix_s(&self, ctx: CtxId) -> Vec<Vec<f64>> {
        let n_it = self.common_iterations();
        let mut m: BTreeMap<ProfileId, Vec<f64>> = self
            .iterations
            .keys()
            .map(|&t| (t, vec![0.0; n_it]))
            .collect();
        let lo = self.rows.partition_point(|r| r.ctx_id < ctx);
        for r in self.rows[lo..].iter().take_while(|r| r.ctx_id == ctx) {
            if (r.iteration as usize) < n_it {
                if let Some(row) = m.get_mut(&r.trace_id) {
                    row[r.iteration as usize] = r.time_incl_s();
                }
            }
        }
        m.into_values().collect()
    }
}

/// Rows with one dimension fixed, that dimension's column dropped.
pub fn slice_tri(model: &TriModel, fix: TriFix) -> Result<Table, IterError> {
    if !model.rows.is_empty() {
        let ok = match fix {
            TriFix::Iteration(k) => {
                k >= 0 && model.iterations.values().any(|&n| (k as usize) < n)
            }
            TriFix::Trace(t) => model.iterations.contains_key(&t),
            TriFix::Node(c) => model.rows.iter().any(|r| r.ctx_id == c),
        };
        if !ok {
            return Err(IterError::NotFound(format!("{fix:?}")));
        }
    }
    let rows: Vec<&TriRow> = model
        .rows
        .iter()
        .filter(|r| match fix {
            TriFix::Iteration(k) => r.iteration == k,
            TriFix::Trace(t) => r.trace_id == t,
            TriFix::Node(c) => r.ctx_id == c,
        })
        .collect();
    Ok(rows_table(&rows, Some(fix)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{CctNode, NodeKind};
    use proptest::prelude::*;

    /// 0 root -> 1 a -> 2 leaf ; 0 -> 3 b
    fn tree() -> CallingContextTree {
        let n = |id, parent, name: &str| CctNode {
            id,
            parent,
            kind: NodeKind::Function,
            name: name.into(),
        };
        CallingContextTree::new(vec![
            n(0, None, "root"),
            n(1, Some(0), "a"),
            n(2, Some(1), "leaf"),
            n(3, Some(0), "b"),
        ])
        .unwrap()
    }

    fn ev(t: u64, c: CtxId) -> TraceEvent {
        TraceEvent {
            timestamp_ns: t,
            ctx_id: c,
        }
    }

    #[test]
    fn single_segment() {
        let cct = tree();
        let s = TraceSlice::whole(vec![ev(10, 2)], 15);
        let p = rematerialize(&s, Interval { t0_ns: 0, t1_ns: 100 }, &cct).unwrap();
        assert_eq!(p.exclusive_ns, vec![0, 0, 5, 0]);
        assert_eq!(p.inclusive_ns, vec![5, 5, 5, 0]);
    }

    #[test]
    fn carry_in_and_dangling() {
        let cct = tree();
        let s = TraceSlice {
            carry_in: Some(ev(0, 3)),
            events: vec![ev(20, 2)],
            t_end_ns: 30,
        };
        let p = rematerialize(&s, Interval { t0_ns: 15, t1_ns: 25 }, &cct).unwrap();
        assert_eq!(p.exclusive_ns, vec![0, 0, 5, 5]);
        let bad = TraceSlice::whole(vec![ev(0, 9)], 1);
        assert!(matches!(
            rematerialize(&bad, Interval { t0_ns: 0, t1_ns: 1 }, &cct),
            Err(IterError::DanglingContext(9))
        ));
    }

    #[test]
    fn detection_basics() {
        let cct = tree();
        // a, leaf (inside a), b, a, leaf, b
        let evs = vec![ev(0, 1), ev(2, 2), ev(5, 3), ev(7, 1), ev(8, 2), ev(11, 3)];
        let iv = detect_iterations(&evs, 14, &cct, 1).unwrap();
        assert_eq!(
            iv,
            vec![Interval { t0_ns: 0, t1_ns: 7 }, Interval { t0_ns: 7, t1_ns: 14 }]
        );
        let root = detect_iterations(&evs, 14, &cct, 0).unwrap();
        assert_eq!(root, vec![Interval { t0_ns: 0, t1_ns: 14 }]);
        assert!(matches!(
            detect_iterations(&[ev(0, 3)], 4, &cct, 1),
            Err(IterError::NoIterations(1))
        ));
    }

    #[test]
    fn anchor_suggestion() {
        let cct = tree();
        let mut evs = Vec::new();
        for k in 0..5u64 {
            evs.push(ev(10 * k, 1));
            evs.push(ev(10 * k + 3, 2));
            evs.push(ev(10 * k + 8, 3));
        }
        let s = TraceSlice::whole(evs, 50);
        assert_eq!(suggest_anchor(&s, &cct, 3, 0.2).unwrap(), 1);
        let single = TraceSlice::whole(vec![ev(0, 2)], 10);
        assert!(matches!(
            suggest_anchor(&single, &cct, 3, 0.2),
            Err(IterError::NoPeriodicity)
        ));
    }

    fn arb_trace() -> impl Strategy<Value = (Vec<TraceEvent>, u64)> {
        prop::collection::vec((0u64..40, 0u32..4), 1..30).prop_map(|v| {
            let mut t = 0;
            let evs: Vec<TraceEvent> = v
                .into_iter()
                .map(|(d, c)| {
                    let e = ev(t, c);
                    t += d;
                    e
                })
                .collect();
            (evs, t + 3)
        })
    }

    proptest! {
        #[test]
        fn matches_per_ns_brute_force((evs, t_end) in arb_trace(), a in 0u64..200, b in 0u64..200) {
            let cct = tree();
            let iv = Interval { t0_ns: a.min(b), t1_ns: a.max(b) };
            let p = rematerialize(&TraceSlice::whole(evs.clone(), t_end), iv, &cct).unwrap();
            let mut excl = vec![0u64; 4];
            let mut incl = vec![0u64; 4];
            for t in iv.t0_ns..iv.t1_ns.min(t_end) {
                let Some(e) = evs.iter().rev().find(|e| e.timestamp_ns <= t) else { continue };
                excl[e.ctx_id as usize] += 1;
                for c in cct.ancestors_inclusive(e.ctx_id) {
                    incl[c as usize] += 1;
                }
            }
            prop_assert_eq!(p.exclusive_ns, excl);
            prop_assert_eq!(p.inclusive_ns, incl);
        }

        #[test]
        fn iterations_and_gap_partition_whole((evs, t_end) in arb_trace(), anchor in 0u32..4) {
            let cct = tree();
            let s = TraceSlice::whole(evs.clone(), t_end);
            let whole = rematerialize(&s, Interval { t0_ns: 0, t1_ns: t_end }, &cct).unwrap();
            let Ok(ivs) = detect_iterations(&evs, t_end, &cct, anchor) else { return Ok(()) };
            let mut sum = rematerialize(&s, Interval { t0_ns: 0, t1_ns: ivs[0].t0_ns }, &cct).unwrap();
            for iv in &ivs {
                prop_assert!(iv.t0_ns < iv.t1_ns);
                sum.add(&rematerialize(&s, *iv, &cct).unwrap());
            }
            prop_assert_eq!(sum, whole);
        }
    }
}
