use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use super::{AggFn, Backend, Cmp, Column, ColumnData, DType, FrameError, Scalar, Table, BLOCK};
use crate::par::with_workers;

/// Runs `f` sequentially or inside a pool of the backend's width; `f` gets
/// `true` when it may use rayon parallel iterators.
fn run<R: Send>(backend: Backend, f: impl FnOnce(bool) -> R + Send) -> Result<R, FrameError> {
    Ok(match backend.workers()? {
        None => f(false),
        Some(n) => with_workers(n, || f(true)),
    })
}

fn cmp_at(c: &ColumnData, i: usize, j: usize) -> Ordering {
    match c {
        ColumnData::I64(v) => v[i].cmp(&v[j]),
        ColumnData::U64(v) => v[i].cmp(&v[j]),
        ColumnData::F64(v) => v[i].total_cmp(&v[j]),
        ColumnData::Str(v) => v[i].cmp(&v[j]),
        ColumnData::Bool(v) => v[i].cmp(&v[j]),
    }
}

fn cmp_rows(cols: &[&ColumnData], asc: &[bool], i: usize, j: usize) -> Ordering {
    for (c, &a) in cols.iter().zip(asc) {
        let o = cmp_at(c, i, j);
        if o != Ordering::Equal {
            return if a { o } else { o.reverse() };
        }
    }
    Ordering::Equal
}

fn stable_order(cols: &[&ColumnData], asc: &[bool], n: usize, par: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let cmp = |&i: &usize, &j: &usize| cmp_rows(cols, asc, i, j);
    if par {
        idx.par_sort_by(cmp);
    } else {
        idx.sort_by(cmp);
    }
    idx
}

fn gather_table(t: &Table, idx: &[usize], par: bool) -> Table {
    if !par {
        return t.gather(idx);
    }
    let columns: Vec<Column> = t
        .columns()
        .par_iter()
        .map(|c| Column::new(c.name.clone(), c.data.gather(idx)))
        .collect();
    Table::new(columns).expect("gathered columns share a length")
}

fn key_columns<'a>(t: &'a Table, keys: &[&str]) -> Result<Vec<&'a ColumnData>, FrameError> {
    keys.iter().map(|k| t.column(k).map(|c| &c.data)).collect()
}

/// Stable multi-key sort.
pub fn sort(t: &Table, keys: &[&str], ascending: &[bool], backend: Backend) -> Result<Table, FrameError> {
    if keys.len() != ascending.len() {
        return Err(FrameError::LengthMismatch(keys.len(), ascending.len()));
    }
    let cols = key_columns(t, keys)?;
    run(backend, |par| {
        let idx = stable_order(&cols, ascending, t.n_rows(), par);
        gather_table(t, &idx, par)
    })
}

fn literal_check(c: &Column, lit: &Scalar) -> Result<(), FrameError> {
    if c.dtype() != lit.dtype() {
        return Err(FrameError::TypeMismatch(format!(
            "column {} is {:?}, literal is {:?}",
            c.name,
            c.dtype(),
            lit.dtype()
        )));
    }
    Ok(())
}

fn compare_mask(c: &ColumnData, cmp: Cmp, lit: &Scalar, par: bool) -> Vec<bool> {
    fn m<T: PartialOrd + Sync>(v: &[T], cmp: Cmp, s: &T, par: bool) -> Vec<bool> {
        if par {
            v.par_iter().map(|x| cmp.eval(x, s)).collect()
        } else {
            v.iter().map(|x| cmp.eval(x, s)).collect()
        }
    }
    match (c, lit) {
        (ColumnData::I64(v), Scalar::I64(s)) => m(v, cmp, s, par),
        (ColumnData::U64(v), Scalar::U64(s)) => m(v, cmp, s, par),
        (ColumnData::F64(v), Scalar::F64(s)) => m(v, cmp, s, par),
        (ColumnData::Str(v), Scalar::Str(s)) => m(v, cmp, s, par),
        (ColumnData::Bool(v), Scalar::Bool(s)) => m(v, cmp, s, par),
        _ => unreachable!("dtype checked"),
    }
}

/// Rows where `column cmp literal` holds, in input order. Float comparisons
/// follow IEEE semantics (NaN satisfies only `Ne`).
pub fn filter(
    t: &Table,
    column: &str,
    cmp: Cmp,
    literal: &Scalar,
    backend: Backend,
) -> Result<Table, FrameError> {
    let c = t.column(column)?;
    literal_check(c, literal)?;
    run(backend, |par| {
        let mask = compare_mask(&c.data, cmp, literal, par);
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        gather_table(t, &idx, par)
    })
}

/// Elementwise `column cmp literal` as a bool column.
pub fn scalar_compare(a: &Column, cmp: Cmp, literal: &Scalar, backend: Backend) -> Result<Column, FrameError> {
    literal_check(a, literal)?;
    run(backend, |par| Column::bool(a.name.clone(), compare_mask(&a.data, cmp, literal, par)))
}

fn agg_output_type(c: &Column, f: AggFn) -> Result<DType, FrameError> {
    match (f, c.dtype()) {
        (AggFn::Count, _) => Ok(DType::U64),
        (AggFn::Mean, DType::I64 | DType::U64 | DType::F64) => Ok(DType::F64),
        (_, d @ (DType::I64 | DType::U64 | DType::F64)) => Ok(d),
        (_, d) => Err(FrameError::TypeMismatch(format!(
            "cannot {} column {} of type {d:?}",
            f.name(),
            c.name
        ))),
    }
}

fn agg_group(c: &ColumnData, f: AggFn, rows: &[usize]) -> Scalar {
    let n = rows.len();
    if f == AggFn::Count {
        return Scalar::U64(n as u64);
    }
    match c {
        ColumnData::F64(v) => {
            let it = rows.iter().map(|&i| v[i]);
            let x = match f {
                AggFn::Sum => it.reduce(|a, b| a + b).unwrap_or(0.0),
                AggFn::Mean => it.reduce(|a, b| a + b).unwrap_or(0.0) / n as f64,
                AggFn::Min => it.reduce(f64::min).unwrap_or(f64::NAN),
                AggFn::Max => it.reduce(f64::max).unwrap_or(f64::NAN),
                AggFn::Count => unreachable!(),
            };
            Scalar::F64(x)
        }
        ColumnData::I64(v) => {
            let it = rows.iter().map(|&i| v[i]);
            match f {
                AggFn::Sum => Scalar::I64(it.fold(0i64, i64::wrapping_add)),
                AggFn::Mean => Scalar::F64(it.map(i128::from).sum::<i128>() as f64 / n as f64),
                AggFn::Min => Scalar::I64(it.min().unwrap_or(0)),
                AggFn::Max => Scalar::I64(it.max().unwrap_or(0)),
                AggFn::Count => unreachable!(),
            }
        }
        ColumnData::U64(v) => {
            let it = rows.iter().map(|&i| v[i]);
            match f {
                AggFn::Sum => Scalar::U64(it.fold(0u64, u64::wrapping_add)),
                AggFn::Mean => Scalar::F64(it.map(u128::from).sum::<u128>() as f64 / n as f64),
                AggFn::Min => Scalar::U64(it.min().unwrap_or(0)),
                AggFn::Max => Scalar::U64(it.max().unwrap_or(0)),
                AggFn::Count => unreachable!(),
            }
        }
        _ => unreachable!("type checked"),
    }
}

fn column_from_scalars(name: String, dtype: DType, vals: impl Iterator<Item = Scalar>) -> Column {
    macro_rules! collect {
        ($variant:ident, $ctor:ident) => {
            Column::$ctor(
                name,
                vals.map(|s| match s {
                    Scalar::$variant(x) => x,
                    _ => unreachable!("uniform aggregate type"),
                })
                .collect(),
            )
        };
    }
    match dtype {
        DType::I64 => collect!(I64, i64),
        DType::U64 => collect!(U64, u64),
        DType::F64 => collect!(F64, f64),
        DType::Str => collect!(Str, str),
        DType::Bool => collect!(Bool, bool),
    }
}

/// One row per distinct key tuple, ascending by key. Aggregated columns are
/// named `<column>_<fn>`; each group folds its rows in original order.
pub fn group_aggregate(
    t: &Table,
    keys: &[&str],
    aggs: &[(&str, AggFn)],
    backend: Backend,
) -> Result<Table, FrameError> {
    let kcols = key_columns(t, keys)?;
    let mut specs = Vec::with_capacity(aggs.len());
    for &(name, f) in aggs {
        let c = t.column(name)?;
        let out = agg_output_type(c, f)?;
        if f != AggFn::Count {
            if let ColumnData::F64(v) = &c.data {
                if v.iter().any(|x| x.is_nan()) {
                    return Err(FrameError::NanInAggregation(name.to_string()));
                }
            }
        }
        specs.push((c, f, out));
    }
    let asc = vec![true; keys.len()];
    run(backend, |par| {
        let order = stable_order(&kcols, &asc, t.n_rows(), par);
        let mut starts: Vec<usize> = (0..order.len())
            .filter(|&p| p == 0 || cmp_rows(&kcols, &asc, order[p - 1], order[p]) != Ordering::Equal)
            .collect();
        let firsts: Vec<usize> = starts.iter().map(|&p| order[p]).collect();
        starts.push(order.len());
        let groups: Vec<&[usize]> = starts.windows(2).map(|w| &order[w[0]..w[1]]).collect();

        let mut columns: Vec<Column> = keys
            .iter()
            .zip(&kcols)
            .map(|(k, c)| Column::new(*k, c.gather(&firsts)))
            .collect();
        for (c, f, out) in &specs {
            let vals: Vec<Scalar> = if par {
                groups.par_iter().map(|g| agg_group(&c.data, *f, g)).collect()
            } else {
                groups.iter().map(|g| agg_group(&c.data, *f, g)).collect()
            };
            columns.push(column_from_scalars(
                format!("{}_{}", c.name, f.name()),
                *out,
                vals.into_iter(),
            ));
        }
        Table::new(columns)
    })?
}

/// Hashable encoding of a key tuple; `None` for keys that never match (NaN).
fn encode_key(cols: &[&ColumnData], i: usize) -> Option<Vec<u8>> {
    let mut k = Vec::new();
    for c in cols {
        match c {
            ColumnData::I64(v) => k.extend_from_slice(&v[i].to_le_bytes()),
            ColumnData::U64(v) => k.extend_from_slice(&v[i].to_le_bytes()),
            ColumnData::F64(v) => {
                let x = v[i];
                if x.is_nan() {
                    return None;
                }
                // 0.0 == -0.0
                let x = if x == 0.0 { 0.0 } else { x };
                k.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            ColumnData::Str(v) => {
                k.extend_from_slice(&(v[i].len() as u64).to_le_bytes());
                k.extend_from_slice(v[i].as_bytes());
            }
            ColumnData::Bool(v) => k.push(v[i] as u8),
        }
    }
    Some(k)
}

/// Inner join on equal key tuples, ordered by (left row, right row). Right
/// non-key columns whose names collide get an `_r` suffix.
pub fn merge(left: &Table, right: &Table, on: &[&str], backend: Backend) -> Result<Table, FrameError> {
    let lk = key_columns(left, on)?;
    let rk = key_columns(right, on)?;
    for ((name, a), b) in on.iter().zip(&lk).zip(&rk) {
        if a.dtype() != b.dtype() {
            return Err(FrameError::TypeMismatch(format!(
                "key {name}: {:?} vs {:?}",
                a.dtype(),
                b.dtype()
            )));
        }
    }
    run(backend, |par| {
        let mut index: HashMap<Vec<u8>, Vec<usize>> = HashMap::new();
        for j in 0..right.n_rows() {
            if let Some(k) = encode_key(&rk, j) {
                index.entry(k).or_default().push(j);
            }
        }
        let probe = |i: usize| -> Vec<(usize, usize)> {
            encode_key(&lk, i)
                .and_then(|k| index.get(&k))
                .map(|js| js.iter().map(|&j| (i, j)).collect())
                .unwrap_or_default()
        };
        let pairs: Vec<(usize, usize)> = if par {
            (0..left.n_rows()).into_par_iter().flat_map_iter(probe).collect()
        } else {
            (0..left.n_rows()).flat_map(probe).collect()
        };
        let li: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ri: Vec<usize> = pairs.iter().map(|p| p.1).collect();

        let mut columns = gather_table(left, &li, par).into_columns();
        for c in right.columns() {
            if on.contains(&c.name.as_str()) {
                continue;
            }
            let mut name = c.name.clone();
            while columns.iter().any(|o| o.name == name) {
                name.push_str("_r");
            }
            columns.push(Column::new(name, c.data.gather(&ri)));
        }
        Table::new(columns)
    })?
}

fn check_len(a: usize, b: usize) -> Result<(), FrameError> {
    if a != b {
        return Err(FrameError::LengthMismatch(a, b));
    }
    Ok(())
}

pub fn vector_add(a: &Column, b: &Column, backend: Backend) -> Result<Column, FrameError> {
    let (x, y) = (a.as_f64()?, b.as_f64()?);
    check_len(x.len(), y.len())?;
    run(backend, |par| {
        let v = if par {
            x.par_iter().zip(y).map(|(p, q)| p + q).collect()
        } else {
            x.iter().zip(y).map(|(p, q)| p + q).collect()
        };
        Column::f64(a.name.clone(), v)
    })
}

pub fn in_place_multiply(a: &Column, scalar: f64, backend: Backend) -> Result<Column, FrameError> {
    let x = a.as_f64()?;
    run(backend, |par| {
        let v = if par {
            x.par_iter().map(|p| p * scalar).collect()
        } else {
            x.iter().map(|p| p * scalar).collect()
        };
        Column::f64(a.name.clone(), v)
    })
}

fn fold_sum(v: &[f64]) -> f64 {
    v.iter().copied().reduce(|a, b| a + b).unwrap_or(0.0)
}

fn block_sums(x: &[f64], par: bool) -> Vec<f64> {
    if par {
        x.par_chunks(BLOCK).map(fold_sum).collect()
    } else {
        x.chunks(BLOCK).map(fold_sum).collect()
    }
}

/// Sum over fixed blocks, block sums folded left to right. Equal to the last
/// element of [`cumulative_sum`].
pub fn reduce_sum(a: &Column, backend: Backend) -> Result<f64, FrameError> {
    let x = a.as_f64()?;
    run(backend, |par| fold_sum(&block_sums(x, par)))
}

fn scan_block(out: &mut [f64], x: &[f64], offset: Option<f64>) {
    let mut acc: Option<f64> = None;
    for (o, &v) in out.iter_mut().zip(x) {
        let s = acc.map_or(v, |a| a + v);
        acc = Some(s);
        *o = offset.map_or(s, |off| off + s);
    }
}

pub fn cumulative_sum(a: &Column, backend: Backend) -> Result<Column, FrameError> {
    let x = a.as_f64()?;
    run(backend, |par| {
        let sums = block_sums(x, par);
        let mut offsets: Vec<Option<f64>> = Vec::with_capacity(sums.len());
        let mut acc: Option<f64> = None;
        for s in &sums {
            offsets.push(acc);
            acc = Some(acc.map_or(*s, |a| a + s));
        }
        let mut out = vec![0.0; x.len()];
        if par {
            out.par_chunks_mut(BLOCK)
                .zip(x.par_chunks(BLOCK))
                .zip(offsets.par_iter())
                .for_each(|((o, xs), off)| scan_block(o, xs, *off));
        } else {
            for ((o, xs), off) in out.chunks_mut(BLOCK).zip(x.chunks(BLOCK)).zip(&offsets) {
                scan_block(o, xs, *off);
            }
        }
        Column::f64(a.name.clone(), out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SEQ: Backend = Backend::Sequential;
    const PAR: Backend = Backend::Parallel(3);

    fn t2(k: Vec<i64>, v: Vec<f64>) -> Table {
        Table::new(vec![Column::i64("ctx", k), Column::f64("v", v)]).unwrap()
    }

    #[test]
    fn group_sum_trivial() {
        let g = group_aggregate(&t2(vec![1, 1], vec![2.0, 3.0]), &["ctx"], &[("v", AggFn::Sum)], SEQ).unwrap();
        assert_eq!(g, t2(vec![1], vec![5.0]).pipe_rename("v", "v_sum"));
    }

    trait Rename {
        fn pipe_rename(self, from: &str, to: &str) -> Table;
    }
    impl Rename for Table {
        fn pipe_rename(self, from: &str, to: &str) -> Table {
            Table::new(
                self.into_columns()
                    .into_iter()
                    .map(|mut c| {
                        if c.name == from {
                            c.name = to.into();
                        }
                        c
                    })
                    .collect(),
            )
            .unwrap()
        }
    }

    #[test]
    fn group_errors() {
        let t = Table::new(vec![
            Column::i64("k", vec![1]),
            Column::str("s", vec!["x".into()]),
            Column::f64("v", vec![f64::NAN]),
        ])
        .unwrap();
        assert!(matches!(
            group_aggregate(&t, &["nope"], &[], SEQ),
            Err(FrameError::NoSuchColumn(_))
        ));
        assert!(matches!(
            group_aggregate(&t, &["k"], &[("s", AggFn::Sum)], SEQ),
            Err(FrameError::TypeMismatch(_))
        ));
        assert!(matches!(
            group_aggregate(&t, &["k"], &[("v", AggFn::Mean)], SEQ),
            Err(FrameError::NanInAggregation(_))
        ));
        assert!(group_aggregate(&t, &["k"], &[("s", AggFn::Count)], SEQ).is_ok());
    }

    #[test]
    fn singleton_groups_sort_input() {
        let t = t2(vec![3, 1, 2], vec![0.3, 0.1, 0.2]);
        let g = group_aggregate(&t, &["ctx"], &[("v", AggFn::Max)], SEQ).unwrap();
        assert_eq!(g, t2(vec![1, 2, 3], vec![0.1, 0.2, 0.3]).pipe_rename("v", "v_max"));
    }

    #[test]
    fn sort_is_stable() {
        let t = t2(vec![2, 1, 2, 1], vec![0.0, 1.0, 2.0, 3.0]);
        let s = sort(&t, &["ctx"], &[true], SEQ).unwrap();
        assert_eq!(s, t2(vec![1, 1, 2, 2], vec![1.0, 3.0, 0.0, 2.0]));
        let d = sort(&t, &["ctx"], &[false], PAR).unwrap();
        assert_eq!(d, t2(vec![2, 2, 1, 1], vec![0.0, 2.0, 1.0, 3.0]));
    }

    #[test]
    fn filter_edges() {
        let t = t2(vec![1, 2, 3], vec![1.0, 2.0, 3.0]);
        let all = filter(&t, "v", Cmp::Ge, &Scalar::F64(0.0), SEQ).unwrap();
        assert_eq!(all, t);
        assert_eq!(filter(&t, "ctx", Cmp::Gt, &Scalar::I64(9), SEQ).unwrap().n_rows(), 0);
        assert!(matches!(
            filter(&t, "ctx", Cmp::Eq, &Scalar::F64(1.0), SEQ),
            Err(FrameError::TypeMismatch(_))
        ));
    }

    #[test]
    fn merge_suffixes_and_orders() {
        let l = t2(vec![1, 2, 2], vec![10.0, 20.0, 21.0]);
        let r = t2(vec![2, 1, 2], vec![0.2, 0.1, 0.22]);
        let m = merge(&l, &r, &["ctx"], SEQ).unwrap();
        assert_eq!(m.names(), vec!["ctx", "v", "v_r"]);
        assert_eq!(m.column("v").unwrap().as_f64().unwrap(), &[10.0, 20.0, 20.0, 21.0, 21.0]);
        assert_eq!(m.column("v_r").unwrap().as_f64().unwrap(), &[0.1, 0.2, 0.22, 0.2, 0.22]);
        let empty = t2(vec![], vec![]);
        assert_eq!(merge(&l, &empty, &["ctx"], SEQ).unwrap().n_rows(), 0);
    }

    #[test]
    fn vector_ops() {
        let a = Column::f64("a", vec![1.0, 1.0, 1.0]);
        let z = Column::f64("z", vec![0.0; 3]);
        assert_eq!(vector_add(&a, &z, SEQ).unwrap().data, a.data);
        assert_eq!(cumulative_sum(&a, SEQ).unwrap().as_f64().unwrap(), &[1.0, 2.0, 3.0]);
        assert!(matches!(
            vector_add(&a, &Column::f64("b", vec![]), SEQ),
            Err(FrameError::LengthMismatch(3, 0))
        ));
        assert_eq!(reduce_sum(&Column::f64("e", vec![]), SEQ).unwrap(), 0.0);
        let neg = Column::f64("n", vec![-0.0]);
        assert!(reduce_sum(&neg, SEQ).unwrap().is_sign_negative());
        assert!(cumulative_sum(&neg, PAR).unwrap().as_f64().unwrap()[0].is_sign_negative());
        assert!(matches!(
            group_aggregate(&Table::default(), &[], &[], Backend::Parallel(0)),
            Err(FrameError::InvalidBackend)
        ));
    }

    proptest! {
        #[test]
        fn reduce_equals_cumsum_tail(v in prop::collection::vec(-1e6f64..1e6, 1..20_000)) {
            let c = Column::f64("x", v);
            let s = reduce_sum(&c, SEQ).unwrap();
            let cs = cumulative_sum(&c, PAR).unwrap();
            prop_assert_eq!(s.to_bits(), cs.as_f64().unwrap().last().unwrap().to_bits());
            prop_assert_eq!(s.to_bits(), reduce_sum(&c, PAR).unwrap().to_bits());
        }

        #[test]
        fn count_totals_row_count(k in prop::collection::vec(0i64..5, 0..200)) {
            let n = k.len();
            let t = Table::new(vec![Column::i64("k", k)]).unwrap();
            let g = group_aggregate(&t, &["k"], &[("k", AggFn::Count)], PAR).unwrap();
            let ColumnData::U64(c) = &g.column("k_count").unwrap().data else { unreachable!() };
            prop_assert_eq!(c.iter().sum::<u64>() as usize, n);
        }
    }
}
