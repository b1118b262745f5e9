//! End-to-end analyses built from the library layers: the communication
//! congestion study and the iterative GPU imbalance study.

use serde::Serialize;
use thiserror::Error;

use crate::diagnostics::{
    balance_ratio, call_chain, compare_partitions, dbscan, detect_active_gpu_metrics,
    find_metric_contexts, imbalance_report, kmeans, node_correlate, savings_report, DiagError,
    ImbalanceRow, NodeRow, Partition, SavingsReport, DBSCAN_MIN_PTS, GPU_METRIC_NAMES,
};
use crate::ingest::{compute_keep_set, ingest_profiles, IngestError, KeepSet, PruneStrategy, SliceTable};
use crate::itermodel::{build_tri_model, AnchorPolicy, IterError, TriModel};
use crate::query::{parse_query, resolve_query, QueryError, Session};
use crate::store::{CtxId, DbHandle, NodeKind, ProfileId, Scope, SUMMARY_PROFILE};
use crate::topology::{localize_outliers, CongestionReport, TopoParseError};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Iter(#[from] IterError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Topo(#[from] TopoParseError),
    #[error("no context matches {0}")]
    NoMatch(String),
    #[error("clustering found a single group; no outliers to separate")]
    SingleGroup,
    #[error("no GPU metric has nonzero samples in the summary")]
    NoGpuMetric,
}

#[derive(Debug, Clone)]
pub struct CongestionOptions {
    pub prune: Vec<PruneStrategy>,
    /// Call sites considered as bottleneck candidates.
    pub callsite_glob: String,
    pub cluster: ClusterMethod,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterMethod {
    Dbscan { eps: Option<f64>, min_pts: usize },
    KMeans { k: usize },
}

impl Default for CongestionOptions {
    fn default() -> Self {
        CongestionOptions {
            prune: vec![PruneStrategy::min_share(0.01)],
            callsite_glob: "MPI_*".into(),
            cluster: ClusterMethod::Dbscan {
                eps: None,
                min_pts: DBSCAN_MIN_PTS,
            },
            workers: crate::par::hardware_concurrency(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CallsiteRow {
    pub ctx_id: CtxId,
    pub name: String,
    pub call_chain: Vec<String>,
    pub summary_time_s: f64,
    pub balance_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CongestionAnalysis {
    pub kept_contexts: usize,
    pub callsites: Vec<CallsiteRow>,
    pub bottleneck: CallsiteRow,
    /// Per-node mean of total time (root inclusive), sorted by hostname.
    pub node_total: Vec<NodeRow>,
    /// Per-node mean of the bottleneck call site.
    pub node_callsite: Vec<NodeRow>,
    pub total_partition: Partition,
    pub callsite_partition: Partition,
    pub group_sizes: Vec<usize>,
    pub off_block: usize,
    pub outlier_hostnames: Vec<String>,
    pub report: CongestionReport,
}

fn per_rank_values(h: &DbHandle, slice: &SliceTable, ctx: CtxId) -> Vec<(i32, f64)> {
    let meta = h.meta();
    slice
        .rows()
        .filter(|r| r.1 == ctx)
        .filter_map(|(pid, _, _, v)| meta.profile(pid).map(|p| (p.rank, v)))
        .collect()
}

/// Two-way split: the cluster with the largest mean is the outlier group
/// (label 1), everything else (noise included) label 0.
pub fn outlier_split(values: &[f64], method: ClusterMethod) -> Result<Partition, WorkflowError> {
    // Identical values are one group by definition; the range-relative
    // default eps would otherwise be zero.
    if values.windows(2).all(|w| w[0] == w[1]) {
        return Err(WorkflowError::SingleGroup);
    }
    let points: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
    let p = match method {
        ClusterMethod::Dbscan { eps, min_pts } => dbscan(&points, eps, min_pts)?,
        ClusterMethod::KMeans { k } => kmeans(&points, k)?.partition,
    };
    let clusters = p.clusters();
    if clusters.len() < 2 {
        return Err(WorkflowError::SingleGroup);
    }
    let mean_of = |c: i64| {
        let m = p.members(c);
        m.iter().map(|&i| values[i]).sum::<f64>() / m.len() as f64
    };
    let top = clusters
        .iter()
        .copied()
        .max_by(|&a, &b| mean_of(a).total_cmp(&mean_of(b)).then(b.cmp(&a)))
        .expect("at least two clusters");
    Ok(Partition {
        labels: p.labels.iter().map(|&l| i64::from(l == top)).collect(),
    })
}

pub fn congestion_analysis(h: &DbHandle, opts: &CongestionOptions) -> Result<CongestionAnalysis, WorkflowError> {
    let meta = h.meta();
    let cct = &meta.cct;
    let keep = compute_keep_set(h, &opts.prune)?;
    let mut session = Session::new(h, keep.clone(), opts.workers);

    let sites_q = parse_query(
        "summary",
        &format!("function({})", opts.callsite_glob),
        "cputime:sum (i)",
        None,
    )
    .map_err(QueryError::from)?;
    let summary = session.fetch(&sites_q)?;
    if summary.is_empty() {
        return Err(WorkflowError::NoMatch(format!("function({})", opts.callsite_glob)));
    }
    let site_ids: Vec<CtxId> = summary.ctx_id.clone();

    let per_rank_q = parse_query("rank", "*", "cputime:prop (i)", None).map_err(QueryError::from)?;
    let plan = resolve_query(&per_rank_q, meta, &keep)?;
    let mut rank_plan = plan.clone();
    rank_plan.ctx_ids = {
        let mut v = site_ids.clone();
        v.push(cct.root());
        v.sort_unstable();
        v
    };
    let ranks = session.fetch_plan(&rank_plan)?;

    let mut callsites = Vec::with_capacity(site_ids.len());
    for (&ctx, &time) in summary.ctx_id.iter().zip(&summary.value) {
        let vals: Vec<f64> = per_rank_values(h, &ranks, ctx).into_iter().map(|p| p.1).collect();
        let ratio = if vals.is_empty() { 1.0 } else { balance_ratio(&vals)? };
        callsites.push(CallsiteRow {
            ctx_id: ctx,
            name: cct.name(ctx).to_string(),
            call_chain: call_chain(cct, ctx)?,
            summary_time_s: time,
            balance_ratio: ratio,
        });
    }
    let bottleneck = callsites
        .iter()
        .max_by(|a, b| a.summary_time_s.total_cmp(&b.summary_time_s).then(b.ctx_id.cmp(&a.ctx_id)))
        .cloned()
        .expect("nonempty");

    let node_total = node_correlate(&per_rank_values(h, &ranks, cct.root()), meta)?;
    let node_callsite = node_correlate(&per_rank_values(h, &ranks, bottleneck.ctx_id), meta)?;
    let totals: Vec<f64> = node_total.iter().map(|n| n.mean_value).collect();
    let site_means: Vec<f64> = node_callsite.iter().map(|n| n.mean_value).collect();
    let total_partition = outlier_split(&totals, opts.cluster)?;
    let callsite_partition = outlier_split(&site_means, opts.cluster)?;
    let cmp = compare_partitions(&total_partition, &callsite_partition)?;

    let outlier_hostnames: Vec<String> = total_partition
        .members(1)
        .into_iter()
        .map(|i| node_total[i].hostname.clone())
        .collect();
    let all_hosts: Vec<String> = node_total.iter().map(|n| n.hostname.clone()).collect();
    let report = localize_outliers(&outlier_hostnames, &all_hosts)?;
    let group_sizes = vec![total_partition.members(0).len(), total_partition.members(1).len()];

    Ok(CongestionAnalysis {
        kept_contexts: keep.len(),
        callsites,
        bottleneck,
        node_total,
        node_callsite,
        total_partition,
        callsite_partition,
        group_sizes,
        off_block: cmp.off_block,
        outlier_hostnames,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct IterationOptions {
    pub prune: Vec<PruneStrategy>,
    pub anchor: AnchorPolicy,
    pub min_share: f64,
    /// Whole-run time used for the speedup estimate; defaults to the
    /// longest trace.
    pub total_time_s: Option<f64>,
    pub workers: usize,
    /// Metric names to consider instead of the built-in GPU set.
    pub gpu_metrics: Option<Vec<String>>,
}

impl Default for IterationOptions {
    fn default() -> Self {
        IterationOptions {
            prune: Vec::new(),
            anchor: AnchorPolicy::Auto,
            min_share: 0.001,
            total_time_s: None,
            workers: crate::par::hardware_concurrency(),
            gpu_metrics: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelShare {
    pub ctx_id: CtxId,
    pub name: String,
    pub share_frac: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationAnalysis {
    pub active_metrics: Vec<String>,
    pub kernels: Vec<KernelShare>,
    pub anchor: CtxId,
    pub anchor_name: String,
    pub n_traces: usize,
    pub n_iterations: usize,
    pub skipped_traces: Vec<(ProfileId, String)>,
    pub imbalance: Vec<ImbalanceRow>,
    pub savings: SavingsReport,
    #[serde(skip)]
    pub model: TriModel,
}

/// Ids of active GPU metrics with inclusive scope.
fn active_gpu_metrics(
    h: &DbHandle,
    keep: &KeepSet,
    names: Option<&[String]>,
    workers: usize,
) -> Result<(SliceTable, Vec<u16>), WorkflowError> {
    let summary = ingest_profiles(h, &[SUMMARY_PROFILE], keep, None, workers)?;
    let names: Vec<&str> = match names {
        Some(n) => n.iter().map(String::as_str).collect(),
        None => GPU_METRIC_NAMES.to_vec(),
    };
    let active = detect_active_gpu_metrics(&summary, h.meta(), &names);
    Ok((summary, active))
}

pub fn iteration_analysis(h: &DbHandle, opts: &IterationOptions) -> Result<IterationAnalysis, WorkflowError> {
    let meta = h.meta();
    let cct = &meta.cct;
    let keep = compute_keep_set(h, &opts.prune)?;
    let (summary, active) = active_gpu_metrics(h, &keep, opts.gpu_metrics.as_deref(), opts.workers)?;
    let incl: Vec<u16> = active
        .iter()
        .copied()
        .filter(|&m| meta.metric(m).is_some_and(|d| d.scope == Scope::Inclusive))
        .collect();
    if incl.is_empty() {
        return Err(WorkflowError::NoGpuMetric);
    }
    let shares = find_metric_contexts(&summary, meta, &incl, opts.min_share)?;
    let kernels: Vec<CtxId> = shares.iter().map(|s| s.0).collect();

    let traces: Vec<ProfileId> = h
        .trace_index()
        .iter()
        .map(|t| t.profile_id)
        .filter(|&p| p != SUMMARY_PROFILE)
        .collect();
    let model = build_tri_model(h, &traces, opts.anchor, Some(&kernels), opts.workers)?;
    let anchor = model.anchor.ok_or(WorkflowError::Iter(IterError::NoPeriodicity))?;
    let total_time_s = opts.total_time_s.unwrap_or_else(|| {
        h.trace_index()
            .iter()
            .map(|t| (t.t_end_ns - t.t_begin_ns) as f64 / 1e9)
            .fold(0.0, f64::max)
    });
    // CVs need at least two traces and two iterations
    let imbalance = if model.n_traces() >= 2 && model.common_iterations() >= 2 {
        imbalance_report(&model, &shares, cct)?
    } else {
        Vec::new()
    };
    let savings = savings_report(&model, &kernels, cct, total_time_s)?;

    Ok(IterationAnalysis {
        active_metrics: active
            .iter()
            .filter_map(|&m| meta.metric(m))
            .filter(|d| d.scope == Scope::Inclusive)
            .map(|d| d.name.clone())
            .collect(),
        kernels: shares
            .iter()
            .map(|&(c, s)| KernelShare {
                ctx_id: c,
                name: cct.name(c).to_string(),
                share_frac: s,
            })
            .collect(),
        anchor,
        anchor_name: cct.name(anchor).to_string(),
        n_traces: model.n_traces(),
        n_iterations: model.common_iterations(),
        skipped_traces: model.skipped.clone(),
        imbalance,
        savings,
        model,
    })
}

/// Contexts of one kind, for tooling that wants to list e.g. every kernel.
pub fn contexts_of_kind(h: &DbHandle, kind: NodeKind) -> Vec<CtxId> {
    h.meta()
        .cct
        .nodes()
        .iter()
        .filter(|n| n.kind == kind)
        .map(|n| n.id)
        .collect()
}
