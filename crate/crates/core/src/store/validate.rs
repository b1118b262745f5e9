use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::meta::*;
use super::reader::DbHandle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RecordOrder,
    UnknownContext,
    UnknownMetric,
    BadValue,
    TimestampOrder,
    EventOutOfRange,
    UnknownProfile,
    Metadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub file: &'static str,
    pub profile_id: Option<ProfileId>,
    /// Record or event position within the profile body.
    pub position: Option<u64>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.file)?;
        if let Some(p) = self.profile_id {
            write!(f, " profile {p}")?;
        }
        if let Some(i) = self.position {
            write!(f, " #{i}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Walks every record and event and reports each invariant violation.
pub fn validate_database(h: &DbHandle) -> ValidationReport {
    let meta = h.meta();
    let mut out = Vec::new();
    let n_ctx = meta.cct.len() as u32;
    let metric_ids: HashSet<MetricId> = meta.metrics.iter().map(|m| m.id).collect();

    let mut seen = HashSet::new();
    for m in &meta.metrics {
        if !seen.insert((m.name.as_str(), m.scope)) {
            out.push(Violation {
                kind: ViolationKind::Metadata,
                file: "meta.bin",
                profile_id: None,
                position: None,
                detail: format!("duplicate metric {} ({:?})", m.name, m.scope),
            });
        }
    }
    for p in &meta.profiles {
        if p.id != SUMMARY_PROFILE && p.hostname.is_empty() {
            out.push(Violation {
                kind: ViolationKind::Metadata,
                file: "meta.bin",
                profile_id: Some(p.id),
                position: None,
                detail: "empty hostname".into(),
            });
        }
    }

    for entry in h.profile_index() {
        let pid = entry.profile_id;
        let v = |kind, position: usize, detail: String| Violation {
            kind,
            file: "profile.db",
            profile_id: Some(pid),
            position: Some(position as u64),
            detail,
        };
        if meta.profile(pid).is_none() {
            out.push(Violation {
                kind: ViolationKind::UnknownProfile,
                file: "profile.db",
                profile_id: Some(pid),
                position: None,
                detail: "no profile descriptor".into(),
            });
        }
        let records = match h.read_profile_records(pid, None, None) {
            Ok(r) => r,
            Err(e) => {
                out.push(v(ViolationKind::UnknownProfile, 0, e.to_string()));
                continue;
            }
        };
        for (i, r) in records.iter().enumerate() {
            if i > 0 && records[i - 1].key() >= r.key() {
                out.push(v(
                    ViolationKind::RecordOrder,
                    i,
                    format!(
                        "record ({}, {}) not after ({}, {})",
                        r.ctx_id, r.metric_id, records[i - 1].ctx_id, records[i - 1].metric_id
                    ),
                ));
            }
            if r.ctx_id >= n_ctx {
                out.push(v(
                    ViolationKind::UnknownContext,
                    i,
                    format!("context {} not in tree", r.ctx_id),
                ));
            }
            if !metric_ids.contains(&r.metric_id) {
                out.push(v(
                    ViolationKind::UnknownMetric,
                    i,
                    format!("metric {} not described", r.metric_id),
                ));
            }
            if !r.value.is_finite() || r.value < 0.0 {
                out.push(v(ViolationKind::BadValue, i, format!("value {}", r.value)));
            }
        }
    }

    for entry in h.trace_index() {
        let pid = entry.profile_id;
        let v = |kind, position: usize, detail: String| Violation {
            kind,
            file: "trace.db",
            profile_id: Some(pid),
            position: Some(position as u64),
            detail,
        };
        let events = match h.read_trace(pid) {
            Ok((e, _)) => e,
            Err(e) => {
                out.push(v(ViolationKind::UnknownProfile, 0, e.to_string()));
                continue;
            }
        };
        for (i, e) in events.iter().enumerate() {
            if i > 0 && events[i - 1].timestamp_ns > e.timestamp_ns {
                out.push(v(
                    ViolationKind::TimestampOrder,
                    i,
                    format!(
                        "timestamp {} before previous {}",
                        e.timestamp_ns,
                        events[i - 1].timestamp_ns
                    ),
                ));
            }
            if e.timestamp_ns < entry.t_begin_ns || e.timestamp_ns > entry.t_end_ns {
                out.push(v(
                    ViolationKind::EventOutOfRange,
                    i,
                    format!(
                        "timestamp {} outside [{}, {}]",
                        e.timestamp_ns, entry.t_begin_ns, entry.t_end_ns
                    ),
                ));
            }
            if e.ctx_id >= n_ctx {
                out.push(v(
                    ViolationKind::UnknownContext,
                    i,
                    format!("context {} not in tree", e.ctx_id),
                ));
            }
        }
    }

    ValidationReport { violations: out }
}
