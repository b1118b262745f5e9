//! Columnar tables with a sequential reference backend and a parallel backend
//! that produces bit-identical results.
//!
//! Float reductions never depend on scheduling: sums are computed per fixed
//! block of [`BLOCK`] elements and the block sums are folded left to right,
//! in both backends.

mod ops;

use std::io::Write;

use serde_json::{Map, Value};
use thiserror::Error;

pub use ops::{
    cumulative_sum, filter, group_aggregate, in_place_multiply, merge, reduce_sum, scalar_compare,
    sort, vector_add,
};

/// Fixed block length of float reductions and scans.
pub const BLOCK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("no such column: {0}")]
    NoSuchColumn(String),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("duplicate column name: {0}")]
    DuplicateColumn(String),
    #[error("NaN in aggregated column {0}")]
    NanInAggregation(String),
    #[error("worker count must be at least 1")]
    InvalidBackend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Sequential,
    Parallel(usize),
}

impl Backend {
    pub(crate) fn workers(self) -> Result<Option<usize>, FrameError> {
        match self {
            Backend::Sequential => Ok(None),
            Backend::Parallel(0) => Err(FrameError::InvalidBackend),
            Backend::Parallel(n) => Ok(Some(n)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    I64,
    U64,
    F64,
    Str,
    Bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    I64(Vec<i64>),
    U64(Vec<u64>),
    F64(Vec<f64>),
    Str(Vec<String>),
    Bool(Vec<bool>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::I64(v) => v.len(),
            ColumnData::U64(v) => v.len(),
            ColumnData::F64(v) => v.len(),
            ColumnData::Str(v) => v.len(),
            ColumnData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            ColumnData::I64(_) => DType::I64,
            ColumnData::U64(_) => DType::U64,
            ColumnData::F64(_) => DType::F64,
            ColumnData::Str(_) => DType::Str,
            ColumnData::Bool(_) => DType::Bool,
        }
    }

    /// Rows at `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> ColumnData {
        fn g<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
            idx.iter().map(|&i| v[i].clone()).collect()
        }
        match self {
            ColumnData::I64(v) => ColumnData::I64(g(v, idx)),
            ColumnData::U64(v) => ColumnData::U64(g(v, idx)),
            ColumnData::F64(v) => ColumnData::F64(g(v, idx)),
            ColumnData::Str(v) => ColumnData::Str(g(v, idx)),
            ColumnData::Bool(v) => ColumnData::Bool(g(v, idx)),
        }
    }

    pub fn scalar(&self, i: usize) -> Scalar {
        match self {
            ColumnData::I64(v) => Scalar::I64(v[i]),
            ColumnData::U64(v) => Scalar::U64(v[i]),
            ColumnData::F64(v) => Scalar::F64(v[i]),
            ColumnData::Str(v) => Scalar::Str(v[i].clone()),
            ColumnData::Bool(v) => Scalar::Bool(v[i]),
        }
    }

    /// Equality that distinguishes float bit patterns (NaN == NaN, 0.0 != -0.0).
    pub fn bit_eq(&self, other: &ColumnData) -> bool {
        match (self, other) {
            (ColumnData::F64(a), ColumnData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => self == other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn new(name: impl Into<String>, data: ColumnData) -> Self {
        Column {
            name: name.into(),
            data,
        }
    }

    pub fn i64(name: impl Into<String>, v: Vec<i64>) -> Self {
        Self::new(name, ColumnData::I64(v))
    }

    pub fn u64(name: impl Into<String>, v: Vec<u64>) -> Self {
        Self::new(name, ColumnData::U64(v))
    }

    pub fn f64(name: impl Into<String>, v: Vec<f64>) -> Self {
        Self::new(name, ColumnData::F64(v))
    }

    pub fn str(name: impl Into<String>, v: Vec<String>) -> Self {
        Self::new(name, ColumnData::Str(v))
    }

    pub fn bool(name: impl Into<String>, v: Vec<bool>) -> Self {
        Self::new(name, ColumnData::Bool(v))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn as_f64(&self) -> Result<&[f64], FrameError> {
        match &self.data {
            ColumnData::F64(v) => Ok(v),
            _ => Err(FrameError::TypeMismatch(format!(
                "column {} is {:?}, expected F64",
                self.name,
                self.dtype()
            ))),
        }
    }

    pub fn bit_eq(&self, other: &Column) -> bool {
        self.name == other.name && self.data.bit_eq(&other.data)
    }
}

/// A literal value of one of the column dtypes.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    I64(i64),
    U64(u64),
    F64(f64),
    Str(String),
    Bool(bool),
}

impl Scalar {
    pub fn dtype(&self) -> DType {
        match self {
            Scalar::I64(_) => DType::I64,
            Scalar::U64(_) => DType::U64,
            Scalar::F64(_) => DType::F64,
            Scalar::Str(_) => DType::Str,
            Scalar::Bool(_) => DType::Bool,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Scalar::I64(x) => Value::from(*x),
            Scalar::U64(x) => Value::from(*x),
            Scalar::F64(x) => serde_json::Number::from_f64(*x)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            Scalar::Str(s) => Value::from(s.as_str()),
            Scalar::Bool(b) => Value::from(*b),
        }
    }
}

impl std::fmt::Display for Scalar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scalar::I64(x) => write!(f, "{x}"),
            Scalar::U64(x) => write!(f, "{x}"),
            Scalar::F64(x) => write!(f, "{x}"),
            Scalar::Str(s) => f.write_str(s),
            Scalar::Bool(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
    Ne,
}

impl Cmp {
    pub fn eval<T: PartialOrd + ?Sized>(self, a: &T, b: &T) -> bool {
        match self {
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Eq => a == b,
            Cmp::Ge => a >= b,
            Cmp::Gt => a > b,
            Cmp::Ne => a != b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFn {
    Sum,
    Mean,
    Min,
    Max,
    Count,
}

impl AggFn {
    pub fn name(self) -> &'static str {
        match self {
            AggFn::Sum => "sum",
            AggFn::Mean => "mean",
            AggFn::Min => "min",
            AggFn::Max => "max",
            AggFn::Count => "count",
        }
    }
}

/// Ordered, uniquely named columns of equal length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    columns: Vec<Column>,
    n_rows: usize,
}

impl Table {
    pub fn new(columns: Vec<Column>) -> Result<Self, FrameError> {
        let n_rows = columns.first().map_or(0, Column::len);
        for (i, c) in columns.iter().enumerate() {
            if c.len() != n_rows {
                return Err(FrameError::LengthMismatch(n_rows, c.len()));
            }
            if columns[..i].iter().any(|o| o.name == c.name) {
                return Err(FrameError::DuplicateColumn(c.name.clone()));
            }
        }
        Ok(Table { columns, n_rows })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn into_columns(self) -> Vec<Column> {
        self.columns
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Result<&Column, FrameError> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| FrameError::NoSuchColumn(name.to_string()))
    }

    pub fn gather(&self, idx: &[usize]) -> Table {
        Table {
            columns: self
                .columns
                .iter()
                .map(|c| Column::new(c.name.clone(), c.data.gather(idx)))
                .collect(),
            n_rows: idx.len(),
        }
    }

    pub fn bit_eq(&self, other: &Table) -> bool {
        self.n_rows == other.n_rows
            && self.columns.len() == other.columns.len()
            && self.columns.iter().zip(&other.columns).all(|(a, b)| a.bit_eq(b))
    }

    pub fn row(&self, i: usize) -> Vec<Scalar> {
        self.columns.iter().map(|c| c.data.scalar(i)).collect()
    }

    /// CSV with a header row; fields are quoted only where RFC 4180 needs it.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(w);
        if !self.columns.is_empty() {
            out.write_record(self.names())?;
        }
        for i in 0..self.n_rows {
            out.write_record(self.row(i).iter().map(|s| s.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 fields")
    }

    /// Array of row objects keyed by column name.
    pub fn to_json(&self) -> Value {
        Value::Array(
            (0..self.n_rows)
                .map(|i| {
                    let mut m = Map::new();
                    for c in &self.columns {
                        m.insert(c.name.clone(), c.data.scalar(i).to_json());
                    }
                    Value::Object(m)
                })
                .collect(),
        )
    }
}

/// Deterministic mixed-dtype table for benchmarks and backend checks:
/// `k` (i64, few distinct values), `u` (u64), `x` and `y` (f64), `s` (str).
pub fn synthetic_table(n_rows: usize, seed: u64) -> Table {
    let mut rng = crate::synthgen::XorShift64Star::new(seed);
    let groups = (n_rows / 8).max(1) as u64;
    let mut k = Vec::with_capacity(n_rows);
    let mut u = Vec::with_capacity(n_rows);
    let mut x = Vec::with_capacity(n_rows);
    let mut y = Vec::with_capacity(n_rows);
    let mut s = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        k.push(rng.below(groups) as i64 - (groups / 2) as i64);
        u.push(rng.next_u64() >> 40);
        x.push(rng.next_signed() * 1e3);
        y.push(if rng.below(50) == 0 { -0.0 } else { rng.next_f64() });
        s.push(format!("n{}", rng.below(16)));
    }
    Table::new(vec![
        Column::i64("k", k),
        Column::u64("u", u),
        Column::f64("x", x),
        Column::f64("y", y),
        Column::str("s", s),
    ])
    .expect("equal-length columns")
}
