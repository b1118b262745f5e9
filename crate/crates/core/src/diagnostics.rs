//! Imbalance arithmetic, GPU kernel discovery, clustering and node-level
//! correlation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::SliceTable;
use crate::itermodel::TriModel;
use crate::store::{CallingContextTree, CtxId, Meta, MetricId, NodeKind, SUMMARY_PROFILE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagError {
    #[error("empty input")]
    EmptyInput,
    #[error("coefficient of variation undefined for zero mean")]
    UndefinedCv,
    #[error("need at least 2 traces and 2 iterations")]
    InsufficientData,
    #[error("total time must be positive, got {0}")]
    InvalidTotal(f64),
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("eps must be positive")]
    InvalidEps,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("summary has zero total for the requested metrics")]
    DegenerateSummary,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over max; 1.0 when every value is zero.
pub fn balance_ratio(values: &[f64]) -> Result<f64, DiagError> {
    if values.is_empty() {
        return Err(DiagError::EmptyInput);
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == 0.0 {
        return Ok(1.0);
    }
    Ok(mean(values) / max)
}

/// Population coefficient of variation, in percent.
pub fn cv(values: &[f64]) -> Result<f64, DiagError> {
    if values.is_empty() {
        return Err(DiagError::EmptyInput);
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(DiagError::UndefinedCv);
    }
    let var = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(100.0 * var.sqrt() / m)
}

/// GPU metric names probed for activity by default.
pub const GPU_METRIC_NAMES: [&str; 3] = ["gker", "gxcopy", "gimopy"];

/// Metrics named in `names` with a positive total in the summary rows.
pub fn detect_active_gpu_metrics(summary: &SliceTable, meta: &Meta, names: &[&str]) -> Vec<MetricId> {
    let mut totals: BTreeMap<MetricId, f64> = BTreeMap::new();
    for (pid, _, mid, v) in summary.rows() {
        if pid == SUMMARY_PROFILE {
            *totals.entry(mid).or_default() += v;
        }
    }
    totals
        .into_iter()
        .filter(|&(mid, t)| t > 0.0 && meta.metric(mid).is_some_and(|m| names.contains(&m.name.as_str())))
        .map(|(mid, _)| mid)
        .collect()
}

/// GPU-kernel contexts holding more than `min_share` of the metrics' total
/// over all kernels, by descending share (ties by ctx id).
pub fn find_metric_contexts(
    summary: &SliceTable,
    meta: &Meta,
    metric_ids: &[MetricId],
    min_share: f64,
) -> Result<Vec<(CtxId, f64)>, DiagError> {
    let mut per_ctx: BTreeMap<CtxId, f64> = BTreeMap::new();
    for (pid, ctx, mid, v) in summary.rows() {
        if pid == SUMMARY_PROFILE
            && metric_ids.contains(&mid)
            && meta.cct.get(ctx).is_some_and(|n| n.kind == NodeKind::GpuKernel)
        {
            *per_ctx.entry(ctx).or_default() += v;
        }
    }
    let total: f64 = per_ctx.values().sum();
    if total <= 0.0 {
        return Err(DiagError::DegenerateSummary);
    }
    let mut out: Vec<(CtxId, f64)> = per_ctx
        .into_iter()
        .filter(|&(_, v)| v > min_share * total)
        .map(|(c, v)| (c, v / total))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

fn model_matrix(model: &TriModel, ctx: CtxId) -> Result<Vec<Vec<f64>>, DiagError> {
    if !model.rows.iter().any(|r| r.ctx_id == ctx) {
        return Err(DiagError::NotFound(format!("context {ctx} in model")));
    }
    Ok(model.matrix_s(ctx))
}

/// (across-rank, within-rank) CV in percent: the mean over iterations of the
/// cross-trace CV, and the mean over traces of the cross-iteration CV.
pub fn iteration_cv_report(model: &TriModel, ctx: CtxId) -> Result<(f64, f64), DiagError> {
    let m = model_matrix(model, ctx)?;
    let n_it = m.first().map_or(0, Vec::len);
    if m.len() < 2 || n_it < 2 {
        return Err(DiagError::InsufficientData);
    }
    let across: Vec<f64> = (0..n_it)
        .map(|it| cv(&m.iter().map(|row| row[it]).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;
    let within: Vec<f64> = m.iter().map(|row| cv(row)).collect::<Result<_, _>>()?;
    Ok((mean(&across), mean(&within)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub ctx_id: CtxId,
    pub name: String,
    pub avg_mean_s: f64,
    pub avg_max_s: f64,
    pub savings_per_iter_s: f64,
    pub total_reduction_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub rows: Vec<SavingsRow>,
    pub n_iterations: usize,
    pub total_savings_s: f64,
    pub speedup_frac: f64,
}

/// Per-iteration (max - mean) across traces, averaged over the common
/// iterations, and the resulting whole-run estimate.
pub fn savings_from_matrices(
    items: &[(CtxId, String, Vec<Vec<f64>>)],
    total_time_s: f64,
) -> Result<SavingsReport, DiagError> {
    if !(total_time_s > 0.0) {
        return Err(DiagError::InvalidTotal(total_time_s));
    }
    let mut rows = Vec::with_capacity(items.len());
    let mut n_iterations = 0;
    for (ctx, name, m) in items {
        let n_it = m.iter().map(Vec::len).min().unwrap_or(0);
        if m.is_empty() || n_it == 0 {
            return Err(DiagError::InsufficientData);
        }
        n_iterations = n_it;
        let mut means = Vec::with_capacity(n_it);
        let mut maxes = Vec::with_capacity(n_it);
        for it in 0..n_it {
            let col: Vec<f64> = m.iter().map(|row| row[it]).collect();
            means.push(mean(&col));
            maxes.push(col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let avg_mean_s = mean(&means);
        let avg_max_s = mean(&maxes);
        let savings = avg_max_s - avg_mean_s;
        rows.push(SavingsRow {
            ctx_id: *ctx,
            name: name.clone(),
            avg_mean_s,
            avg_max_s,
            savings_per_iter_s: savings,
            total_reduction_s: savings * n_it as f64,
        });
    }
    let total_savings_s = rows.iter().map(|r| r.total_reduction_s).sum();
    Ok(SavingsReport {
        rows,
        n_iterations,
        total_savings_s,
        speedup_frac: total_savings_s / total_time_s,
    })
}

pub fn savings_report(
    model: &TriModel,
    ctxs: &[CtxId],
    cct: &CallingContextTree,
    total_time_s: f64,
) -> Result<SavingsReport, DiagError> {
    let items = ctxs
        .iter()
        .map(|&c| Ok((c, cct.name(c).to_string(), model_matrix(model, c)?)))
        .collect::<Result<Vec<_>, DiagError>>()?;
    savings_from_matrices(&items, total_time_s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRow {
    pub ctx_id: CtxId,
    pub name: String,
    pub execution_share_frac: f64,
    pub balance_ratio: f64,
    pub across_rank_cv_pct: f64,
    pub within_rank_cv_pct: f64,
}

/// One row per (ctx, share); the balance ratio is taken over per-trace
/// totals across the common iterations.
pub fn imbalance_report(
    model: &TriModel,
    contexts: &[(CtxId, f64)],
    cct: &CallingContextTree,
) -> Result<Vec<ImbalanceRow>, DiagError> {
    contexts
        .iter()
        .map(|&(ctx, share)| {
            let m = model_matrix(model, ctx)?;
            let totals: Vec<f64> = m.iter().map(|row| row.iter().sum()).collect();
            let (across, within) = iteration_cv_report(model, ctx)?;
            Ok(ImbalanceRow {
                ctx_id: ctx,
                name: cct.name(ctx).to_string(),
                execution_share_frac: share,
                balance_ratio: balance_ratio(&totals)?,
                across_rank_cv_pct: across,
                within_rank_cv_pct: within,
            })
        })
        .collect()
}

/// Cluster label per point; -1 marks density-clustering noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub labels: Vec<i64>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct non-noise labels, ascending.
    pub fn clusters(&self) -> Vec<i64> {
        let s: BTreeSet<i64> = self.labels.iter().copied().filter(|&l| l >= 0).collect();
        s.into_iter().collect()
    }

    pub fn members(&self, label: i64) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn noise(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub partition: Partition,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-12;

fn order_by_first(points: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)));
    idx
}

/// Lloyd's algorithm seeded at evenly spaced quantiles of the first
/// coordinate. An empty cluster is reseeded at the point farthest from its
/// centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize) -> Result<KMeansResult, DiagError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(DiagError::InvalidK { k, n });
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(DiagError::LengthMismatch(dim, p.len()));
    }
    let order = order_by_first(points);
    let mut centroids: Vec<Vec<f64>> = (0..k)
        .map(|j| points[order[(2 * j + 1) * n / (2 * k)]].clone())
        .collect();
    let mut labels = vec![0usize; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut j_total = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, m)| (c, dist2(p, m)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            labels[i] = best;
            j_total += d;
        }
        objective.push(j_total);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next = if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, dist2(&points[i], &centroids[labels[i]])))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                points[far].clone()
            } else {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            };
            shift = shift.max(dist2(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < KMEANS_TOL || iterations >= KMEANS_MAX_ITERS {
            break;
        }
    }
    Ok(KMeansResult {
        partition: Partition {
            labels: labels.into_iter().map(|l| l as i64).collect(),
        },
        centroids,
        objective,
        iterations,
    })
}

pub const DBSCAN_MIN_PTS: usize = 4;
pub const DBSCAN_EPS_FRAC: f64 = 0.05;

/// `0.05 x (max - min)` of the first coordinate.
pub fn default_eps(points: &[Vec<f64>]) -> f64 {
    let (lo, hi) = points
        .iter()
        .map(|p| p[0])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if points.is_empty() {
        0.0
    } else {
        DBSCAN_EPS_FRAC * (hi - lo)
    }
}

/// Density clustering; points are visited in index order and clusters are
/// numbered in order of discovery. Neighbors are searched in a window of
/// the points sorted by first coordinate.
pub fn dbscan(points: &[Vec<f64>], eps: Option<f64>, min_pts: usize) -> Result<Partition, DiagError> {
    let n = points.len();
    let eps = eps.unwrap_or_else(|| default_eps(points));
    if !(eps > 0.0) {
        return Err(DiagError::InvalidEps);
    }
    let order = order_by_first(points);
    let xs: Vec<f64> = order.iter().map(|&i| points[i][0]).collect();
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        let x = points[i][0];
        let lo = xs.partition_point(|&v| v < x - eps);
        let hi = xs.partition_point(|&v| v <= x + eps);
        let mut out: Vec<usize> = order[lo..hi]
            .iter()
            .copied()
            .filter(|&j| dist2(&points[i], &points[j]) <= eps2)
            .collect();
        out.sort_unstable();
        out
    };

    const UNSET: i64 = -2;
    let mut labels = vec![UNSET; n];
    let mut next = 0i64;
    for i in 0..n {
        if labels[i] != UNSET {
            continue;
        }
        let nb = neighbors(i);
        if nb.len() < min_pts {
            labels[i] = -1;
            continue;
        }
        let c = next;
        next += 1;
        labels[i] = c;
        let mut queue: VecDeque<usize> = nb.into_iter().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j] == -1 {
                labels[j] = c;
            }
            if labels[j] != UNSET {
                continue;
            }
            labels[j] = c;
            let nj = neighbors(j);
            if nj.len() >= min_pts {
                queue.extend(nj);
            }
        }
    }
    Ok(Partition { labels })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionComparison {
    pub a_labels: Vec<i64>,
    pub b_labels: Vec<i64>,
    /// `matrix[i][j]` = points with a-label `a_labels[i]` and b-label `b_labels[j]`.
    pub matrix: Vec<Vec<usize>>,
    /// For each b-label, the a-label it is matched to.
    pub matching: Vec<i64>,
    pub off_block: usize,
}

/// Intersection matrix of two labelings. Each b-label is matched to the
/// a-label sharing the most points with it (several b-labels may match the
/// same a-label, so a refinement is a perfect match); points outside the
/// matched cells are off-block.
pub fn compare_partitions(a: &Partition, b: &Partition) -> Result<PartitionComparison, DiagError> {
    if a.len() != b.len() {
        return Err(DiagError::LengthMismatch(a.len(), b.len()));
    }
    let distinct = |p: &Partition| -> Vec<i64> {
        let s: BTreeSet<i64> = p.labels.iter().copied().collect();
        s.into_iter().collect()
    };
    let (al, bl) = (distinct(a), distinct(b));
    let mut matrix = vec![vec![0usize; bl.len()]; al.len()];
    for (x, y) in a.labels.iter().zip(&b.labels) {
        let i = al.binary_search(x).expect("label present");
        let j = bl.binary_search(y).expect("label present");
        matrix[i][j] += 1;
    }
    let mut matching = Vec::with_capacity(bl.len());
    let mut matched = 0;
    for j in 0..bl.len() {
        let (best, cnt) = (0..al.len())
            .map(|i| (i, matrix[i][j]))
            .fold((0, 0), |acc, x| if x.1 > acc.1 { x } else { acc });
        matching.push(al.get(best).copied().unwrap_or(0));
        matched += cnt;
    }
    Ok(PartitionComparison {
        a_labels: al,
        b_labels: bl,
        matrix,
        matching,
        off_block: a.len() - matched,
    })
}

/// Names from the root down to `ctx`.
pub fn call_chain(cct: &CallingContextTree, ctx: CtxId) -> Result<Vec<String>, DiagError> {
    if !cct.contains(ctx) {
        return Err(DiagError::NotFound(format!("context {ctx}")));
    }
    let mut v: Vec<String> = cct.ancestors_inclusive(ctx).map(|c| cct.name(c).to_string()).collect();
    v.reverse();
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRow {
    pub hostname: String,
    pub mean_value: f64,
    pub rank_count: usize,
}

/// Per-rank values grouped by the hostname recorded for each rank; rows
/// sorted by hostname, values summed in input order.
pub fn node_correlate(values: &[(i32, f64)], meta: &Meta) -> Result<Vec<NodeRow>, DiagError> {
    let host: BTreeMap<i32, &str> = meta
        .rank_profiles()
        .map(|p| (p.rank, p.hostname.as_str()))
        .collect();
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for &(rank, v) in values {
        let h = host
            .get(&rank)
            .ok_or_else(|| DiagError::NotFound(format!("rank {rank}")))?;
        let e = acc.entry(h).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(h, (s, n))| NodeRow {
            hostname: h.to_string(),
            mean_value: s / n as f64,
            rank_count: n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_and_cv() {
        assert_eq!(balance_ratio(&[2.0, 2.0, 2.0]).unwrap(), 1.0);
        assert!((balance_ratio(&[1.0, 3.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(balance_ratio(&[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(balance_ratio(&[]), Err(DiagError::EmptyInput));
        assert_eq!(cv(&[4.0; 5]).unwrap(), 0.0);
        assert!((cv(&[1.0, 3.0]).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(cv(&[0.0, 0.0]), Err(DiagError::UndefinedCv));
        // translation changes the CV
        assert!((cv(&[11.0, 13.0]).unwrap() - cv(&[1.0, 3.0]).unwrap()).abs() > 1.0);
    }

    #[test]
    fn savings_balanced_is_zero() {
        let m = vec![vec![1.0; 4]; 3];
        let r = savings_from_matrices(&[(0, "k".into(), m)], 10.0).unwrap();
        assert_eq!((r.total_savings_s, r.speedup_frac), (0.0, 0.0));
        assert!(matches!(
            savings_from_matrices(&[], 0.0),
            Err(DiagError::InvalidTotal(_))
        ));
    }

    fn blobs() -> Vec<Vec<f64>> {
        (0..20)
            .map(|i| vec![if i % 3 == 0 { 10.0 } else { 1.0 } + i as f64 * 1e-3])
            .collect()
    }

    #[test]
    fn kmeans_cases() {
        let p = blobs();
        let r = kmeans(&p, 2).unwrap();
        for (i, &l) in r.partition.labels.iter().enumerate() {
            assert_eq!(l, i64::from(i % 3 == 0));
        }
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0]));
        assert!(kmeans(&p, 1).unwrap().partition.labels.iter().all(|&l| l == 0));
        let all = kmeans(&p, p.len()).unwrap();
        assert_eq!(all.partition.clusters().len(), p.len());
        assert_eq!(kmeans(&p, 21).unwrap_err(), DiagError::InvalidK { k: 21, n: 20 });
    }

    #[test]
    fn dbscan_cases() {
        let p = blobs();
        let d = dbscan(&p, None, DBSCAN_MIN_PTS).unwrap();
        assert_eq!(d.clusters().len(), 2);
        assert_eq!(d.noise(), 0);
        let c = compare_partitions(&d, &kmeans(&p, 2).unwrap().partition).unwrap();
        assert_eq!(c.off_block, 0);
        assert_eq!(dbscan(&[vec![1.0]], Some(1.0), 4).unwrap().labels, vec![-1]);
        assert_eq!(dbscan(&[vec![1.0], vec![1.0]], None, 4), Err(DiagError::InvalidEps));
    }

    #[test]
    fn refinement_is_on_block() {
        let a = Partition { labels: vec![0, 0, 0, 1, 1, 1] };
        let b = Partition { labels: vec![0, 0, 2, 1, 1, 3] };
        assert_eq!(compare_partitions(&a, &b).unwrap().off_block, 0);
        assert_eq!(compare_partitions(&a, &a).unwrap().off_block, 0);
        let c = Partition { labels: vec![0, 0, 1, 1, 1, 1] };
        let r = compare_partitions(&a, &c).unwrap();
        assert_eq!(r.matrix, vec![vec![2, 1], vec![0, 3]]);
        assert_eq!(r.off_block, 1);
    }

    proptest! {
        #[test]
        fn ratio_scale_invariant(v in prop::collection::vec(0.001f64..1e3, 1..50), c in 0.01f64..100.0) {
            let s: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((balance_ratio(&v).unwrap() - balance_ratio(&s).unwrap()).abs() <= 1e-12);
            prop_assert!((cv(&v).unwrap() - cv(&s).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn comparison_matrix_counts(a in prop::collection::vec(0i64..4, 0..60), seed in any::<u64>()) {
            let b: Vec<i64> = a.iter().enumerate().map(|(i, x)| (x + (seed >> (i % 60)) as i64 % 3) % 5).collect();
            let r = compare_partitions(&Partition { labels: a.clone() }, &Partition { labels: b.clone() }).unwrap();
            for (i, la) in r.a_labels.iter().enumerate() {
                for (j, lb) in r.b_labels.iter().enumerate() {
                    let brute = a.iter().zip(&b).filter(|(x, y)| *x == la && *y == lb).count();
                    prop_assert_eq!(r.matrix[i][j], brute);
                }
            }
            let total: usize = r.matrix.iter().flatten().sum();
            prop_assert_eq!(total, a.len());
        }

        #[test]
        fn clustering_deterministic_and_monotone(v in prop::collection::vec(-50f64..50.0, 4..80), k in 1usize..4) {
            let p: Vec<Vec<f64>> = v.iter().map(|&x| vec![x, x * 0.5]).collect();
            let r1 = kmeans(&p, k).unwrap();
            prop_assert_eq!(&r1, &kmeans(&p, k).unwrap());
            for w in r1.objective.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            if let Ok(d) = dbscan(&p, None, 4) {
                prop_assert_eq!(d, dbscan(&p, None, 4).unwrap());
            }
        }
    }
}
