use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{resolve_query, IndexPlan, QueryError, QuerySpec};
use crate::frame::{Column, Table};
use crate::ingest::{ingest_traces, read_requests, KeepSet, ReadRequest, SliceTable, TraceTable};
use crate::store::{CtxId, DbHandle, MetricId, ProfileId, TraceEvent};

type Key = (ProfileId, CtxId, MetricId);

/// Accumulating slice cache over one open database. Keys that were requested
/// but have no stored record are remembered as resident too, so a repeated
/// fetch never touches the disk.
pub struct Session<'db> {
    h: &'db DbHandle,
    keep: KeepSet,
    workers: usize,
    values: BTreeMap<Key, f64>,
    resident: HashMap<(ProfileId, MetricId), BTreeSet<CtxId>>,
}

impl<'db> Session<'db> {
    pub fn new(h: &'db DbHandle, keep: KeepSet, workers: usize) -> Self {
        Session {
            h,
            keep,
            workers: workers.max(1),
            values: BTreeMap::new(),
            resident: HashMap::new(),
        }
    }

    pub fn handle(&self) -> &'db DbHandle {
        self.h
    }

    pub fn keep(&self) -> &KeepSet {
        &self.keep
    }

    pub fn plan(&self, q: &QuerySpec) -> Result<IndexPlan, QueryError> {
        resolve_query(q, self.h.meta(), &self.keep)
    }

    /// Number of (profile, context, metric) keys known to the cache.
    pub fn resident_keys(&self) -> usize {
        self.resident.values().map(BTreeSet::len).sum()
    }

    /// Stored records held in the cache.
    pub fn cached_rows(&self) -> usize {
        self.values.len()
    }

    pub fn is_resident(&self, key: Key) -> bool {
        self.resident
            .get(&(key.0, key.2))
            .is_some_and(|s| s.contains(&key.1))
    }

    /// Rows of the full plan; only keys missing from the cache are read.
    pub fn fetch(&mut self, q: &QuerySpec) -> Result<SliceTable, QueryError> {
        let plan = self.plan(q)?;
        self.fetch_plan(&plan)
    }

    pub fn fetch_plan(&mut self, plan: &IndexPlan) -> Result<SliceTable, QueryError> {
        let mut requests = Vec::new();
        for &pid in &plan.profile_ids {
            for &mid in &plan.metric_ids {
                let have = self.resident.get(&(pid, mid));
                let missing: Vec<CtxId> = plan
                    .ctx_ids
                    .iter()
                    .copied()
                    .filter(|c| !have.is_some_and(|s| s.contains(c)))
                    .collect();
                if !missing.is_empty() {
                    requests.push(ReadRequest {
                        profile_id: pid,
                        ctx_ids: Some(missing),
                        metric_ids: Some(vec![mid]),
                    });
                }
            }
        }
        let results = read_requests(self.h, &requests, self.workers)?;
        for (req, records) in requests.into_iter().zip(results) {
            for r in records {
                self.values.insert((req.profile_id, r.ctx_id, r.metric_id), r.value);
            }
            let mid = req.metric_ids.as_ref().expect("set above")[0];
            self.resident
                .entry((req.profile_id, mid))
                .or_default()
                .extend(req.ctx_ids.expect("set above"));
        }

        let mut metric_ids = plan.metric_ids.clone();
        metric_ids.sort_unstable();
        metric_ids.dedup();
        let mut out = SliceTable::default();
        for &pid in &plan.profile_ids {
            for &ctx in &plan.ctx_ids {
                for &mid in &metric_ids {
                    if let Some(&v) = self.values.get(&(pid, ctx, mid)) {
                        out.profile_id.push(pid);
                        out.ctx_id.push(ctx);
                        out.metric_id.push(mid);
                        out.value.push(v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Fetched rows joined with each profile's rank.
    pub fn to_frame(&mut self, q: &QuerySpec) -> Result<Table, QueryError> {
        let slice = self.fetch(q)?;
        Ok(slice_to_frame(&slice, self.h))
    }

    /// Trace events of the plan's profiles inside the query window (the
    /// whole trace when the query has none), plus carry-in events.
    pub fn fetch_traces(
        &self,
        q: &QuerySpec,
    ) -> Result<(TraceTable, BTreeMap<ProfileId, Option<TraceEvent>>), QueryError> {
        let plan = self.plan(q)?;
        let (t0, t1) = q.time_window.unwrap_or((0, u64::MAX));
        let ids: Vec<ProfileId> = plan
            .profile_ids
            .iter()
            .copied()
            .filter(|&p| self.h.trace_entry(p).is_some())
            .collect();
        Ok(ingest_traces(self.h, &ids, t0, t1, self.workers)?)
    }
}

/// Columns `profile_id, rank, ctx_id, metric_id, value`.
pub fn slice_to_frame(slice: &SliceTable, h: &DbHandle) -> Table {
    let meta = h.meta();
    let rank = slice
        .profile_id
        .iter()
        .map(|&p| meta.profile(p).map_or(-1, |d| i64::from(d.rank)))
        .collect();
    Table::new(vec![
        Column::u64("profile_id", slice.profile_id.iter().map(|&x| u64::from(x)).collect()),
        Column::i64("rank", rank),
        Column::u64("ctx_id", slice.ctx_id.iter().map(|&x| u64::from(x)).collect()),
        Column::u64("metric_id", slice.metric_id.iter().map(|&x| u64::from(x)).collect()),
        Column::f64("value", slice.value.clone()),
    ])
    .expect("equal-length columns")
}

#[cfg(test)]
mod tests {
    use super::super::parse_query;
    use super::*;
    use crate::ingest::ingest_profiles;
    use crate::store::{open_database, write_database};
    use crate::synthgen::{generate_congestion_scenario, presets};
    use tempfile::tempdir;

    fn open() -> (tempfile::TempDir, DbHandle) {
        let mut c = presets::amg_congestion();
        c.n_nodes = 10;
        c.ranks_per_node = 2;
        c.outlier_node_count = 2;
        c.outlier_racks = vec![4100];
        let dir = tempdir().unwrap();
        let (image, _) = generate_congestion_scenario(&c).unwrap();
        write_database(&image, dir.path()).unwrap();
        let h = open_database(dir.path()).unwrap();
        (dir, h)
    }

    #[test]
    fn repeat_fetch_reads_nothing() {
        let (_d, h) = open();
        let mut s = Session::new(&h, KeepSet::all(h.meta().cct.len()), 2);
        let q = parse_query("rank(0-9)", "function(MPI_*)", "cputime:prop (i)", None).unwrap();
        let first = s.fetch(&q).unwrap();
        assert!(!first.is_empty());
        h.reset_stats();
        let second = s.fetch(&q).unwrap();
        assert_eq!(h.stats().records_read, 0);
        assert_eq!(h.stats().probes, 0);
        assert!(first.bit_eq(&second));
    }

    #[test]
    fn overlap_reads_only_difference() {
        let (_d, h) = open();
        let keep = KeepSet::all(h.meta().cct.len());
        let mut s = Session::new(&h, keep.clone(), 1);
        let q1 = parse_query("rank(0-9)", "*", "cputime:prop (i)", None).unwrap();
        let q2 = parse_query("rank(5-14)", "*", "cputime:prop (i)", None).unwrap();
        let v1 = s.fetch(&q1).unwrap();
        h.reset_stats();
        let v2 = s.fetch(&q2).unwrap();
        let fresh: Vec<_> = v2.rows().filter(|r| !v1.rows().any(|o| o.0 == r.0)).collect();
        assert_eq!(h.stats().records_read, fresh.len() as u64);

        let plan = s.plan(&q2).unwrap();
        let direct = ingest_profiles(&h, &plan.profile_ids, &keep, Some(&plan.metric_ids), 1).unwrap();
        assert!(direct.bit_eq(&v2));
    }

    #[test]
    fn summary_cache_does_not_serve_rank_query() {
        let (_d, h) = open();
        let mut s = Session::new(&h, KeepSet::all(h.meta().cct.len()), 1);
        s.fetch(&parse_query("summary", "*", "cputime:sum (i)", None).unwrap())
            .unwrap();
        h.reset_stats();
        s.fetch(&parse_query("rank", "*", "cputime:prop (i)", None).unwrap())
            .unwrap();
        assert!(h.stats().records_read > 0);
    }

    #[test]
    fn frame_joins_rank() {
        let (_d, h) = open();
        let mut s = Session::new(&h, KeepSet::all(h.meta().cct.len()), 1);
        let t = s
            .to_frame(&parse_query("rank(3)", "*", "cputime:prop (e)", None).unwrap())
            .unwrap();
        assert_eq!(t.names(), vec!["profile_id", "rank", "ctx_id", "metric_id", "value"]);
        let crate::frame::ColumnData::I64(r) = &t.column("rank").unwrap().data else {
            unreachable!()
        };
        assert!(!r.is_empty() && r.iter().all(|&x| x == 3));
    }
}
