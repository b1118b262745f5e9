//! Query layer: text selectors resolved against metadata to raw id plans, and
//! a caching session that only reads slices it has not seen.

mod parse;
mod session;

use serde::Serialize;
use thiserror::Error;

use crate::glob::glob_match;
use crate::ingest::{IngestError, KeepSet};
use crate::store::{CallingContextTree, CtxId, Meta, MetricId, ProfileId, Scope, SUMMARY_PROFILE};

pub use parse::{parse_ctx, parse_exec, parse_metric, parse_query, ParseError, QueryField};
pub use session::{slice_to_frame, Session};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ExecSelector {
    Summary,
    /// Ranks `lo..=hi` stepping by `stride`.
    RankRange { lo: u32, hi: u32, stride: u32 },
    RankList(Vec<u32>),
    AllRanks,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum CtxSelector {
    All,
    FunctionGlob(String),
    /// Ancestor name globs, matched as a subsequence of the root-to-node
    /// path whose last element is the node itself.
    Path(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Value as stored in the selected profile.
    Sum,
    /// Per-profile propagated value.
    Prop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MetricSelector {
    pub name: String,
    pub variant: Variant,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuerySpec {
    pub exec: ExecSelector,
    pub ctx: CtxSelector,
    pub metric: MetricSelector,
    pub time_window: Option<(u64, u64)>,
}

/// Raw ids a query maps to. `empty` flags a plan that selects nothing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndexPlan {
    pub profile_ids: Vec<ProfileId>,
    pub ctx_ids: Vec<CtxId>,
    pub metric_ids: Vec<MetricId>,
    pub variant: Variant,
    pub time_window: Option<(u64, u64)>,
    pub empty: bool,
}

#[derive(Debug, Error)]
pub enum QueryError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("no metric {name:?} with {scope:?} scope")]
    NoSuchMetric { name: String, scope: Scope },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

impl From<crate::store::StoreError> for QueryError {
    fn from(e: crate::store::StoreError) -> Self {
        QueryError::Ingest(e.into())
    }
}

impl ExecSelector {
    pub fn matches_rank(&self, rank: u32) -> bool {
        match self {
            ExecSelector::Summary => false,
            ExecSelector::AllRanks => true,
            ExecSelector::RankRange { lo, hi, stride } => {
                (*lo..=*hi).contains(&rank) && (rank - lo).is_multiple_of(*stride)
            }
            ExecSelector::RankList(ids) => ids.contains(&rank),
        }
    }
}

/// True if `globs` match a subsequence of `node`'s root-to-node names that
/// ends at `node`.
pub fn path_matches(cct: &CallingContextTree, globs: &[String], node: CtxId) -> bool {
    let Some((last, rest)) = globs.split_last() else {
        return false;
    };
    if !glob_match(last, cct.name(node)) {
        return false;
    }
    // greedy from the node upward is optimal for subsequence matching
    let mut pending = rest.iter().rev().peekable();
    for a in cct.ancestors_inclusive(node).skip(1) {
        match pending.peek() {
            None => break,
            Some(g) if glob_match(g, cct.name(a)) => {
                pending.next();
            }
            Some(_) => {}
        }
    }
    pending.peek().is_none()
}

impl CtxSelector {
    pub fn matches(&self, cct: &CallingContextTree, node: CtxId) -> bool {
        match self {
            CtxSelector::All => true,
            CtxSelector::FunctionGlob(g) => glob_match(g, cct.name(node)),
            CtxSelector::Path(p) => path_matches(cct, p, node),
        }
    }
}

pub fn resolve_query(q: &QuerySpec, meta: &Meta, keep: &KeepSet) -> Result<IndexPlan, QueryError> {
    let metric = meta
        .metric_by_name(&q.metric.name, q.metric.scope)
        .ok_or_else(|| QueryError::NoSuchMetric {
            name: q.metric.name.clone(),
            scope: q.metric.scope,
        })?;
    let mut profile_ids: Vec<ProfileId> = match &q.exec {
        ExecSelector::Summary => meta
            .profile(SUMMARY_PROFILE)
            .map(|p| vec![p.id])
            .unwrap_or_default(),
        sel => meta
            .rank_profiles()
            .filter(|p| p.rank >= 0 && sel.matches_rank(p.rank as u32))
            .map(|p| p.id)
            .collect(),
    };
    profile_ids.sort_unstable();
    profile_ids.dedup();
    let ctx_ids: Vec<CtxId> = keep
        .ids()
        .iter()
        .copied()
        .filter(|&c| meta.cct.contains(c) && q.ctx.matches(&meta.cct, c))
        .collect();
    let empty = profile_ids.is_empty() || ctx_ids.is_empty();
    Ok(IndexPlan {
        profile_ids,
        ctx_ids,
        metric_ids: vec![metric.id],
        variant: q.metric.variant,
        time_window: q.time_window,
        empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{CctNode, MetricDesc, NodeKind, ProfileDesc};

    fn meta() -> Meta {
        let n = |id, parent, name: &str| CctNode {
            id,
            parent,
            kind: NodeKind::Function,
            name: name.into(),
        };
        let cct = CallingContextTree::new(vec![
            n(0, None, "main"),
            n(1, Some(0), "solve"),
            n(2, Some(1), "MPI_Allreduce"),
            n(3, Some(0), "setup"),
            n(4, Some(3), "MPI_Allreduce"),
            n(5, Some(3), "MPI_Bcast"),
        ])
        .unwrap();
        let mut profiles = vec![ProfileDesc::summary()];
        for r in 0..6 {
            profiles.push(ProfileDesc {
                id: r + 1,
                rank: r as i32,
                thread: 0,
                hostname: String::new(),
                posix_node_id: 0,
            });
        }
        Meta {
            metrics: vec![MetricDesc {
                id: 0,
                name: "cputime".into(),
                scope: Scope::Inclusive,
                unit: "s".into(),
            }],
            profiles,
            cct,
        }
    }

    fn plan(exec: &str, ctx: &str) -> IndexPlan {
        let m = meta();
        let q = parse_query(exec, ctx, "cputime:sum (i)", None).unwrap();
        resolve_query(&q, &m, &KeepSet::all(m.cct.len())).unwrap()
    }

    #[test]
    fn selectors() {
        assert_eq!(plan("summary", "*").profile_ids, vec![0]);
        assert_eq!(plan("rank(1-5:2)", "*").profile_ids, vec![2, 4, 6]);
        assert_eq!(plan("rank(0,3)", "*").profile_ids, vec![1, 4]);
        assert_eq!(plan("rank", "*").profile_ids.len(), 6);
        assert_eq!(plan("summary", "*").ctx_ids, (0..6).collect::<Vec<_>>());
        assert_eq!(plan("summary", "function(MPI_*)").ctx_ids, vec![2, 4, 5]);
        assert_eq!(plan("summary", "path(setup->MPI_*)").ctx_ids, vec![4, 5]);
        assert_eq!(plan("summary", "path(main->MPI_Allreduce)").ctx_ids, vec![2, 4]);
        assert_eq!(plan("summary", "path(solve->setup)").ctx_ids, Vec::<CtxId>::new());
        assert!(plan("rank(100-200)", "*").empty);
    }

    #[test]
    fn unknown_metric() {
        let m = meta();
        let q = parse_query("summary", "*", "cputime:sum (e)", None).unwrap();
        assert!(matches!(
            resolve_query(&q, &m, &KeepSet::all(6)),
            Err(QueryError::NoSuchMetric { .. })
        ));
    }
}
