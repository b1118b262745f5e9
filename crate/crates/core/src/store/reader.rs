use std::borrow::Cow;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use memmap2::Mmap;
use serde::Serialize;

use super::format::*;
use super::meta::*;
use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileIndexEntry {
    pub profile_id: ProfileId,
    pub offset: u64,
    pub record_count: u64,
}

impl ProfileIndexEntry {
    pub fn byte_len(&self) -> u64 {
        self.record_count * RECORD_LEN as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceIndexEntry {
    pub profile_id: ProfileId,
    pub offset: u64,
    pub event_count: u64,
    pub t_begin_ns: u64,
    pub t_end_ns: u64,
}

/// Counters maintained by the readers. `probes` counts every record or event
/// decoded (binary-search probes included); `records_read` counts records
/// returned to callers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReadStats {
    pub probes: u64,
    pub records_read: u64,
    pub events_read: u64,
}

/// Events of one trace inside a half-open window, plus the last event
/// before the window which defines the context active at its start.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceWindow {
    pub carry_in: Option<TraceEvent>,
    pub events: Vec<TraceEvent>,
}

/// Read-only view over an opened database. Profile and trace payloads are
/// memory-mapped; only headers, indices and the metadata file are parsed at
/// open time.
#[derive(Debug)]
pub struct DbHandle {
    path: PathBuf,
    meta: Meta,
    profiles: Mmap,
    traces: Mmap,
    profile_index: Vec<ProfileIndexEntry>,
    trace_index: Vec<TraceIndexEntry>,
    index_bytes_parsed: usize,
    probes: AtomicU64,
    records_read: AtomicU64,
    events_read: AtomicU64,
}

fn map_file(path: &Path) -> Result<Mmap, StoreError> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    if len < HEADER_LEN as u64 {
        return Err(StoreError::Format(format!(
            "{}: file shorter than header ({len} bytes)",
            path.display()
        )));
    }
    // SAFETY: the database is treated as immutable while open; writers are
    // exclusive and never run concurrently with readers.
    Ok(unsafe { Mmap::map(&file)? })
}

fn body_bounds(
    what: &str,
    id: ProfileId,
    offset: u64,
    count: u64,
    width: usize,
    min_offset: u64,
    file_len: u64,
) -> Result<(), StoreError> {
    let end = count
        .checked_mul(width as u64)
        .and_then(|n| n.checked_add(offset));
    match end {
        Some(end) if offset >= min_offset && end <= file_len => Ok(()),
        _ => Err(StoreError::Format(format!(
            "{what}: body of profile {id} (offset {offset}, {count} entries) out of file bounds"
        ))),
    }
}

pub(crate) fn decode_meta(bytes: &[u8]) -> Result<Meta, StoreError> {
    let mut dec = Decoder::new(bytes, META_FILE);
    dec.header(META_MAGIC)?;

    let n_metrics = dec.u32()?;
    let mut metrics = Vec::new();
    for _ in 0..n_metrics {
        let id = dec.u32()?;
        let id = MetricId::try_from(id)
            .map_err(|_| StoreError::Format(format!("metric id {id} exceeds u16")))?;
        let scope_code = dec.u8()?;
        let scope = Scope::from_code(scope_code)
            .ok_or_else(|| StoreError::Format(format!("unknown scope code {scope_code}")))?;
        let name = dec.str()?;
        let unit = dec.str()?;
        metrics.push(MetricDesc { id, name, scope, unit });
    }

    let n_profiles = dec.u32()?;
    let mut profiles = Vec::new();
    for _ in 0..n_profiles {
        profiles.push(ProfileDesc {
            id: dec.u32()?,
            rank: dec.i32()?,
            thread: dec.i32()?,
            hostname: dec.str()?,
            posix_node_id: dec.u64()?,
        });
    }

    let n_ctx = dec.u32()?;
    let mut nodes = Vec::new();
    for _ in 0..n_ctx {
        let id = dec.u32()?;
        let parent = dec.u32()?;
        let kind_code = dec.u8()?;
        let kind = NodeKind::from_code(kind_code)
            .ok_or_else(|| StoreError::Format(format!("unknown node kind {kind_code}")))?;
        let name = dec.str()?;
        nodes.push(CctNode {
            id,
            parent: (parent != ROOT_PARENT).then_some(parent),
            kind,
            name,
        });
    }
    if dec.pos() != bytes.len() {
        return Err(StoreError::Format(format!(
            "{META_FILE}: {} trailing bytes",
            bytes.len() - dec.pos()
        )));
    }
    let cct = CallingContextTree::new(nodes).map_err(StoreError::Format)?;
    Ok(Meta {
        metrics,
        profiles,
        cct,
    })
}

/// Opens the database in `dir`, reading only its headers and indices.
pub fn open_database(dir: &Path) -> Result<DbHandle, StoreError> {
    let meta = decode_meta(&fs::read(dir.join(META_FILE))?)?;

    let profiles = map_file(&dir.join(PROFILE_FILE))?;
    let mut dec = Decoder::new(&profiles, PROFILE_FILE);
    dec.header(PROFILE_MAGIC)?;
    let n = dec.u32()? as u64;
    let index_end = HEADER_LEN as u64 + n * PROFILE_INDEX_ENTRY as u64;
    let mut profile_index = Vec::with_capacity(n.min(1 << 24) as usize);
    for _ in 0..n {
        let entry = ProfileIndexEntry {
            profile_id: dec.u32()?,
            offset: dec.u64()?,
            record_count: dec.u64()?,
        };
        body_bounds(
            PROFILE_FILE,
            entry.profile_id,
            entry.offset,
            entry.record_count,
            RECORD_LEN,
            index_end,
            profiles.len() as u64,
        )?;
        if profile_index
            .last()
            .is_some_and(|p: &ProfileIndexEntry| p.profile_id >= entry.profile_id)
        {
            return Err(StoreError::Format(format!(
                "{PROFILE_FILE}: index not ascending at profile {}",
                entry.profile_id
            )));
        }
        profile_index.push(entry);
    }
    let mut parsed = dec.pos();

    let traces = map_file(&dir.join(TRACE_FILE))?;
    let mut dec = Decoder::new(&traces, TRACE_FILE);
    dec.header(TRACE_MAGIC)?;
    let n = dec.u32()? as u64;
    let index_end = HEADER_LEN as u64 + n * TRACE_INDEX_ENTRY as u64;
    let mut trace_index = Vec::with_capacity(n.min(1 << 24) as usize);
    for _ in 0..n {
        let entry = TraceIndexEntry {
            profile_id: dec.u32()?,
            offset: dec.u64()?,
            event_count: dec.u64()?,
            t_begin_ns: dec.u64()?,
            t_end_ns: dec.u64()?,
        };
        body_bounds(
            TRACE_FILE,
            entry.profile_id,
            entry.offset,
            entry.event_count,
            EVENT_LEN,
            index_end,
            traces.len() as u64,
        )?;
        if entry.t_begin_ns > entry.t_end_ns {
            return Err(StoreError::Format(format!(
                "{TRACE_FILE}: trace {} has t_begin > t_end",
                entry.profile_id
            )));
        }
        if trace_index
            .last()
            .is_some_and(|p: &TraceIndexEntry| p.profile_id >= entry.profile_id)
        {
            return Err(StoreError::Format(format!(
                "{TRACE_FILE}: index not ascending at profile {}",
                entry.profile_id
            )));
        }
        trace_index.push(entry);
    }
    parsed += dec.pos();

    Ok(DbHandle {
        path: dir.to_path_buf(),
        meta,
        profiles,
        traces,
        profile_index,
        trace_index,
        index_bytes_parsed: parsed,
        probes: AtomicU64::new(0),
        records_read: AtomicU64::new(0),
        events_read: AtomicU64::new(0),
    })
}

impl DbHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn profile_index(&self) -> &[ProfileIndexEntry] {
        &self.profile_index
    }

    pub fn trace_index(&self) -> &[TraceIndexEntry] {
        &self.trace_index
    }

    pub fn n_profiles(&self) -> usize {
        self.profile_index.len()
    }

    /// Bytes of `profile.db` and `trace.db` decoded while opening (headers
    /// plus index blocks).
    pub fn index_bytes_parsed(&self) -> usize {
        self.index_bytes_parsed
    }

    pub fn profile_entry(&self, id: ProfileId) -> Option<&ProfileIndexEntry> {
        self.profile_index
            .binary_search_by_key(&id, |e| e.profile_id)
            .ok()
            .map(|i| &self.profile_index[i])
    }

    pub fn trace_entry(&self, id: ProfileId) -> Option<&TraceIndexEntry> {
        self.trace_index
            .binary_search_by_key(&id, |e| e.profile_id)
            .ok()
            .map(|i| &self.trace_index[i])
    }

    pub fn stats(&self) -> ReadStats {
        ReadStats {
            probes: self.probes.load(Ordering::Relaxed),
            records_read: self.records_read.load(Ordering::Relaxed),
            events_read: self.events_read.load(Ordering::Relaxed),
        }
    }

    pub fn reset_stats(&self) {
        self.probes.store(0, Ordering::Relaxed);
        self.records_read.store(0, Ordering::Relaxed);
        self.events_read.store(0, Ordering::Relaxed);
    }

    fn profile_body(&self, id: ProfileId) -> Result<RecordSlice<'_>, StoreError> {
        let entry = self.profile_entry(id).ok_or(StoreError::NotFound {
            what: "profile",
            id: u64::from(id),
        })?;
        let start = entry.offset as usize;
        let end = start + entry.byte_len() as usize;
        Ok(RecordSlice {
            bytes: &self.profiles[start..end],
        })
    }

    /// Records of one profile whose context is in `ctx_ids` and whose metric
    /// is in `metric_ids` (`None` selects everything), in (ctx, metric)
    /// order. Each requested context is located by binary search.
    pub fn read_profile_records(
        &self,
        profile_id: ProfileId,
        ctx_ids: Option<&[CtxId]>,
        metric_ids: Option<&[MetricId]>,
    ) -> Result<Vec<ProfileRecord>, StoreError> {
        let body = self.profile_body(profile_id)?;
        let metric_ok = |m: MetricId| metric_ids.is_none_or(|set| set.contains(&m));
        let n = body.len();
        let mut out = Vec::new();
        let mut probes = 0u64;

        match ctx_ids {
            None => {
                for i in 0..n {
                    let r = body.get(i);
                    if metric_ok(r.metric_id) {
                        out.push(r);
                    }
                }
                probes += n as u64;
            }
            Some(ids) => {
                let ids: Cow<'_, [CtxId]> = if ids.windows(2).all(|w| w[0] < w[1]) {
                    Cow::Borrowed(ids)
                } else {
                    let mut v = ids.to_vec();
                    v.sort_unstable();
                    v.dedup();
                    Cow::Owned(v)
                };
                let log_n = usize::BITS - n.leading_zeros();
                if ids.len().saturating_mul(log_n as usize + 1) >= n {
                    // Dense request: a single merge pass is cheaper.
                    let mut want = ids.iter().peekable();
                    for i in 0..n {
                        let r = body.get(i);
                        probes += 1;
                        while want.peek().is_some_and(|&&c| c < r.ctx_id) {
                            want.next();
                        }
                        if want.peek() == Some(&&r.ctx_id) && metric_ok(r.metric_id) {
                            out.push(r);
                        }
                    }
                } else {
                    let mut start = 0;
                    for &ctx in ids.iter() {
                        // lower bound of ctx within [start, n)
                        let (mut lo, mut hi) = (start, n);
                        while lo < hi {
                            let mid = lo + (hi - lo) / 2;
                            probes += 1;
                            if body.ctx_at(mid) < ctx {
                                lo = mid + 1;
                            } else {
                                hi = mid;
                            }
                        }
                        let mut i = lo;
                        while i < n {
                            let r = body.get(i);
                            probes += 1;
                            if r.ctx_id != ctx {
                                break;
                            }
                            if metric_ok(r.metric_id) {
                                out.push(r);
                            }
                            i += 1;
                        }
                        start = i;
                        if start == n {
                            break;
                        }
                    }
                }
            }
        }

        self.probes.fetch_add(probes, Ordering::Relaxed);
        self.records_read
            .fetch_add(out.len() as u64, Ordering::Relaxed);
        Ok(out)
    }

    fn trace_body(&self, id: ProfileId) -> Result<(EventSlice<'_>, &TraceIndexEntry), StoreError> {
        let entry = self.trace_entry(id).ok_or(StoreError::NotFound {
            what: "trace",
            id: u64::from(id),
        })?;
        let start = entry.offset as usize;
        let end = start + entry.event_count as usize * EVENT_LEN;
        Ok((
            EventSlice {
                bytes: &self.traces[start..end],
            },
            entry,
        ))
    }

    /// Events with `t0 <= timestamp < t1`, located by binary search, plus the
    /// last event strictly before `t0`.
    pub fn read_trace_window(
        &self,
        profile_id: ProfileId,
        t0_ns: u64,
        t1_ns: u64,
    ) -> Result<TraceWindow, StoreError> {
        if t0_ns > t1_ns {
            return Err(StoreError::InvalidArgument(format!(
                "trace window start {t0_ns} after end {t1_ns}"
            )));
        }
        let (body, _) = self.trace_body(profile_id)?;
        let mut probes = 0u64;
        let mut lower_bound = |t: u64| {
            let (mut lo, mut hi) = (0, body.len());
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                probes += 1;
                if body.ts_at(mid) < t {
                    lo = mid + 1;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let lo = lower_bound(t0_ns);
        let hi = lower_bound(t1_ns).max(lo);
        let carry_in = lo.checked_sub(1).map(|i| body.get(i));
        let events: Vec<TraceEvent> = (lo..hi).map(|i| body.get(i)).collect();
        self.probes
            .fetch_add(probes + (hi - lo) as u64, Ordering::Relaxed);
        self.events_read
            .fetch_add(events.len() as u64, Ordering::Relaxed);
        Ok(TraceWindow { carry_in, events })
    }

    /// Whole trace of a profile together with its index entry.
    pub fn read_trace(&self, profile_id: ProfileId) -> Result<(Vec<TraceEvent>, TraceIndexEntry), StoreError> {
        let (body, entry) = self.trace_body(profile_id)?;
        let events: Vec<TraceEvent> = (0..body.len()).map(|i| body.get(i)).collect();
        self.probes
            .fetch_add(events.len() as u64, Ordering::Relaxed);
        self.events_read
            .fetch_add(events.len() as u64, Ordering::Relaxed);
        Ok((events, *entry))
    }

    /// Full logical content, for round-trip checks and dumps.
    pub fn to_image(&self) -> Result<DatabaseImage, StoreError> {
        let mut profiles = Vec::with_capacity(self.profile_index.len());
        for e in &self.profile_index {
            let body = self.profile_body(e.profile_id)?;
            profiles.push(ProfileBody {
                profile_id: e.profile_id,
                records: (0..body.len()).map(|i| body.get(i)).collect(),
            });
        }
        let mut traces = Vec::with_capacity(self.trace_index.len());
        for e in &self.trace_index {
            let (body, _) = self.trace_body(e.profile_id)?;
            traces.push(TraceBody {
                profile_id: e.profile_id,
                t_begin_ns: e.t_begin_ns,
                t_end_ns: e.t_end_ns,
                events: (0..body.len()).map(|i| body.get(i)).collect(),
            });
        }
        Ok(DatabaseImage {
            meta: self.meta.clone(),
            profiles,
            traces,
        })
    }
}

pub(crate) struct RecordSlice<'a> {
    bytes: &'a [u8],
}

impl RecordSlice<'_> {
    pub fn len(&self) -> usize {
        self.bytes.len() / RECORD_LEN
    }

    pub fn ctx_at(&self, i: usize) -> CtxId {
        read_u32(self.bytes, i * RECORD_LEN)
    }

    pub fn get(&self, i: usize) -> ProfileRecord {
        let at = i * RECORD_LEN;
        ProfileRecord {
            ctx_id: read_u32(self.bytes, at),
            metric_id: read_u16(self.bytes, at + 4),
            value: read_f64(self.bytes, at + 6),
        }
    }
}

pub(crate) struct EventSlice<'a> {
    bytes: &'a [u8],
}

impl EventSlice<'_> {
    pub fn len(&self) -> usize {
        self.bytes.len() / EVENT_LEN
    }

    pub fn ts_at(&self, i: usize) -> u64 {
        read_u64(self.bytes, i * EVENT_LEN)
    }

    pub fn get(&self, i: usize) -> TraceEvent {
        let at = i * EVENT_LEN;
        TraceEvent {
            timestamp_ns: read_u64(self.bytes, at),
            ctx_id: read_u32(self.bytes, at + 8),
        }
    }
}
