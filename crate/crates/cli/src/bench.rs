//! Timing suites. Each row is the mean wall time over `repeat` runs.

use std::time::Instant;

use serde::Serialize;

use perfslice::frame::{
    cumulative_sum, filter, group_aggregate, in_place_multiply, merge, reduce_sum, scalar_compare,
    sort, synthetic_table, vector_add, AggFn, Backend, Cmp, Scalar, Table,
};
use perfslice::ingest::{ingest_profiles, KeepSet};
use perfslice::store::DbHandle;

use crate::exit::Failure;
use crate::output::{emit_csv_rows, emit_json, Format};

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub suite: &'static str,
    pub size: usize,
    pub op: String,
    pub parallelism: usize,
    pub mean_s: f64,
}

fn mean_time(repeat: usize, mut f: impl FnMut() -> Result<(), Failure>) -> Result<f64, Failure> {
    let repeat = repeat.max(1);
    let mut total = 0.0;
    for _ in 0..repeat {
        let t = Instant::now();
        f()?;
        total += t.elapsed().as_secs_f64();
    }
    Ok(total / repeat as f64)
}

fn emit(rows: &[BenchRow], format: Format) -> Result<(), Failure> {
    match format {
        Format::Json => emit_json(rows),
        Format::Csv => emit_csv_rows(rows),
    }
}

fn parallelisms(jobs: usize) -> Vec<usize> {
    if jobs > 1 {
        vec![1, jobs]
    } else {
        vec![1]
    }
}

/// Reads the first `size` rank profiles in full, for each size and
/// parallelism. Sizes beyond the database are clamped.
pub fn ingest(h: DbHandle, sizes: &[usize], repeat: usize, jobs: usize, format: Format) -> Result<(), Failure> {
    let ranks: Vec<u32> = h.meta().rank_profiles().map(|p| p.id).collect();
    let keep = KeepSet::all(h.meta().cct.len());
    let mut rows = Vec::new();
    for &p in &parallelisms(jobs) {
        for &size in sizes {
            let ids = &ranks[..size.min(ranks.len())];
            let mean_s = mean_time(repeat, || {
                ingest_profiles(&h, ids, &keep, None, p).map_err(Failure::from_ingest)?;
                Ok(())
            })?;
            rows.push(BenchRow {
                suite: "ingest",
                size: ids.len(),
                op: "read_profiles".into(),
                parallelism: p,
                mean_s,
            });
        }
    }
    emit(&rows, format)
}

pub const FRAME_OPS: [&str; 9] = [
    "sort",
    "filter",
    "scalar_compare",
    "groupby",
    "merge",
    "vector_add",
    "in_place_multiply",
    "reduce_sum",
    "cumulative_sum",
];

fn run_op(op: &str, t: &Table, right: &Table, b: Backend) -> Result<(), Failure> {
    let col = |n: &str| t.column(n).map_err(Failure::other);
    let r = match op {
        "sort" => sort(t, &["k", "x"], &[true, false], b).map(drop),
        "filter" => filter(t, "x", Cmp::Gt, &Scalar::F64(0.0), b).map(drop),
        "scalar_compare" => scalar_compare(col("u")?, Cmp::Le, &Scalar::U64(1 << 23), b).map(drop),
        "groupby" => group_aggregate(t, &["k"], &[("x", AggFn::Sum), ("y", AggFn::Mean)], b).map(drop),
        "merge" => merge(t, right, &["k"], b).map(drop),
        "vector_add" => vector_add(col("x")?, col("y")?, b).map(drop),
        "in_place_multiply" => in_place_multiply(col("x")?, 1.5, b).map(drop),
        "reduce_sum" => reduce_sum(col("x")?, b).map(drop),
        "cumulative_sum" => cumulative_sum(col("y")?, b).map(drop),
        _ => unreachable!("unknown op {op}"),
    };
    r.map_err(Failure::other)
}

/// All nine frame operations on a synthetic table, sequential and parallel.
pub fn frame(sizes: &[usize], repeat: usize, jobs: usize, format: Format) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for &size in sizes {
        let t = synthetic_table(size, 7);
        // Unique keys on the right side keep the join output linear in size.
        let keys = group_aggregate(&t, &["k"], &[("u", AggFn::Max)], Backend::Sequential).map_err(Failure::other)?;
        for op in FRAME_OPS {
            for p in parallelisms(jobs) {
                let (b, label) = if p == 1 {
                    (Backend::Sequential, 1)
                } else {
                    (Backend::Parallel(p), p)
                };
                let mean_s = mean_time(repeat, || run_op(op, &t, &keys, b))?;
                rows.push(BenchRow {
                    suite: "frame",
                    size,
                    op: op.to_string(),
                    parallelism: label,
                    mean_s,
                });
            }
        }
    }
    emit(&rows, format)
}
