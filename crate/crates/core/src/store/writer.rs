use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::format::*;
use super::meta::*;
use super::StoreError;

fn invalid(msg: impl Into<String>) -> StoreError {
    StoreError::InvalidImage(msg.into())
}

/// Checks every invariant the on-disk format relies on.
pub fn check_image(image: &DatabaseImage) -> Result<(), StoreError> {
    let meta = &image.meta;
    if meta.cct.is_empty() {
        return Err(invalid("calling context tree is empty"));
    }

    let mut metric_ids = HashSet::new();
    let mut metric_names = HashSet::new();
    for m in &meta.metrics {
        if !metric_ids.insert(m.id) {
            return Err(invalid(format!("duplicate metric id {}", m.id)));
        }
        if !metric_names.insert((m.name.as_str(), m.scope)) {
            return Err(invalid(format!("duplicate metric {} ({:?})", m.name, m.scope)));
        }
    }

    for pair in meta.profiles.windows(2) {
        if pair[0].id >= pair[1].id {
            return Err(invalid(format!(
                "profile descriptors not strictly ascending at id {}",
                pair[1].id
            )));
        }
    }
    for p in &meta.profiles {
        if p.id == SUMMARY_PROFILE && p.rank != SUMMARY_RANK {
            return Err(invalid("summary profile must carry rank -1"));
        }
        if p.id != SUMMARY_PROFILE && p.hostname.is_empty() {
            return Err(invalid(format!("profile {} has empty hostname", p.id)));
        }
    }

    let n_ctx = meta.cct.len();
    let mut prev_pid = None;
    for body in &image.profiles {
        if prev_pid.is_some_and(|p| p >= body.profile_id) {
            return Err(invalid(format!(
                "profile bodies not strictly ascending at id {}",
                body.profile_id
            )));
        }
        prev_pid = Some(body.profile_id);
        if meta.profile(body.profile_id).is_none() {
            return Err(invalid(format!("profile body {} has no descriptor", body.profile_id)));
        }
        for (i, r) in body.records.iter().enumerate() {
            if i > 0 && body.records[i - 1].key() >= r.key() {
                return Err(invalid(format!(
                    "profile {}: records out of order at position {i}",
                    body.profile_id
                )));
            }
            if r.ctx_id as usize >= n_ctx {
                return Err(invalid(format!(
                    "profile {}: unknown context {}",
                    body.profile_id, r.ctx_id
                )));
            }
            if !metric_ids.contains(&r.metric_id) {
                return Err(invalid(format!(
                    "profile {}: unknown metric {}",
                    body.profile_id, r.metric_id
                )));
            }
            if !r.value.is_finite() || r.value < 0.0 {
                return Err(invalid(format!(
                    "profile {}: value {} at position {i} is not a finite non-negative number",
                    body.profile_id, r.value
                )));
            }
        }
    }

    let mut prev_pid = None;
    for trace in &image.traces {
        if prev_pid.is_some_and(|p| p >= trace.profile_id) {
            return Err(invalid(format!(
                "traces not strictly ascending at id {}",
                trace.profile_id
            )));
        }
        prev_pid = Some(trace.profile_id);
        if meta.profile(trace.profile_id).is_none() {
            return Err(invalid(format!("trace {} has no descriptor", trace.profile_id)));
        }
        if trace.t_begin_ns > trace.t_end_ns {
            return Err(invalid(format!("trace {}: t_begin > t_end", trace.profile_id)));
        }
        for (i, e) in trace.events.iter().enumerate() {
            if i > 0 && trace.events[i - 1].timestamp_ns > e.timestamp_ns {
                return Err(invalid(format!(
                    "trace {}: timestamps decrease at event {i}",
                    trace.profile_id
                )));
            }
            if e.timestamp_ns < trace.t_begin_ns || e.timestamp_ns > trace.t_end_ns {
                return Err(invalid(format!(
                    "trace {}: event {i} outside [t_begin, t_end]",
                    trace.profile_id
                )));
            }
            if e.ctx_id as usize >= n_ctx {
                return Err(invalid(format!(
                    "trace {}: unknown context {}",
                    trace.profile_id, e.ctx_id
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn encode_meta(meta: &Meta) -> Result<Vec<u8>, StoreError> {
    let mut enc = Encoder::new();
    enc.bytes(META_MAGIC);
    enc.u32(VERSION);
    enc.u32(meta.metrics.len() as u32);
    for m in &meta.metrics {
        enc.u32(u32::from(m.id));
        enc.u8(m.scope.code());
        enc.str(&m.name)?;
        enc.str(&m.unit)?;
    }
    enc.u32(meta.profiles.len() as u32);
    for p in &meta.profiles {
        enc.u32(p.id);
        enc.i32(p.rank);
        enc.i32(p.thread);
        enc.str(&p.hostname)?;
        enc.u64(p.posix_node_id);
    }
    enc.u32(meta.cct.len() as u32);
    for node in meta.cct.nodes() {
        enc.u32(node.id);
        enc.u32(node.parent.unwrap_or(ROOT_PARENT));
        enc.u8(node.kind.code());
        enc.str(&node.name)?;
    }
    Ok(enc.buf)
}

pub(crate) fn encode_profiles(bodies: &[ProfileBody]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.bytes(PROFILE_MAGIC);
    enc.u32(VERSION);
    enc.u32(bodies.len() as u32);
    let mut offset = (HEADER_LEN + bodies.len() * PROFILE_INDEX_ENTRY) as u64;
    for b in bodies {
        enc.u32(b.profile_id);
        enc.u64(offset);
        enc.u64(b.records.len() as u64);
        offset += (b.records.len() * RECORD_LEN) as u64;
    }
    for b in bodies {
        for r in &b.records {
            enc.u32(r.ctx_id);
            enc.u16(r.metric_id);
            enc.f64(r.value);
        }
    }
    enc.buf
}

pub(crate) fn encode_traces(traces: &[TraceBody]) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.bytes(TRACE_MAGIC);
    enc.u32(VERSION);
    enc.u32(traces.len() as u32);
    let mut offset = (HEADER_LEN + traces.len() * TRACE_INDEX_ENTRY) as u64;
    for t in traces {
        enc.u32(t.profile_id);
        enc.u64(offset);
        enc.u64(t.events.len() as u64);
        enc.u64(t.t_begin_ns);
        enc.u64(t.t_end_ns);
        offset += (t.events.len() * EVENT_LEN) as u64;
    }
    for t in traces {
        for e in &t.events {
            enc.u64(e.timestamp_ns);
            enc.u32(e.ctx_id);
        }
    }
    enc.buf
}

/// Writes `meta.bin`, `profile.db` and `trace.db` into `dir`, creating it if
/// needed.
pub fn write_database(image: &DatabaseImage, dir: &Path) -> Result<(), StoreError> {
    check_image(image)?;
    let meta = encode_meta(&image.meta)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(META_FILE), meta)?;
    fs::write(dir.join(PROFILE_FILE), encode_profiles(&image.profiles))?;
    fs::write(dir.join(TRACE_FILE), encode_traces(&image.traces))?;
    Ok(())
}
