//! Mapping of failures to process exit codes.

use std::fmt::Display;

use perfslice::ingest::IngestError;
use perfslice::itermodel::IterError;
use perfslice::query::QueryError;
use perfslice::store::StoreError;
use perfslice::workflow::WorkflowError;

pub const OTHER: u8 = 1;
pub const CONFIG: u8 = 2;
pub const PARSE: u8 = 3;
pub const NO_METRIC: u8 = 4;
pub const DEGENERATE: u8 = 5;
pub const NO_PERIODICITY: u8 = 6;
pub const SINGLE_GROUP: u8 = 7;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure { code, error: error.into() }
    }

    pub fn config(e: impl Display) -> Self {
        Failure::new(CONFIG, anyhow::anyhow!("{e}"))
    }

    pub fn other(e: impl Display) -> Self {
        Failure::new(OTHER, anyhow::anyhow!("{e}"))
    }

    pub fn from_ingest(e: IngestError) -> Self {
        let code = match e {
            IngestError::DegenerateSummary => DEGENERATE,
            _ => OTHER,
        };
        Failure::new(code, e)
    }

    pub fn from_query(e: QueryError) -> Self {
        match e {
            QueryError::Parse(_) => Failure::new(PARSE, e),
            QueryError::NoSuchMetric { .. } => Failure::new(NO_METRIC, e),
            QueryError::Ingest(i) => Failure::from_ingest(i),
        }
    }

    pub fn from_workflow(e: WorkflowError) -> Self {
        match e {
            WorkflowError::Ingest(i) => Failure::from_ingest(i),
            WorkflowError::Query(q) => Failure::from_query(q),
            WorkflowError::Iter(IterError::NoPeriodicity) => Failure::new(NO_PERIODICITY, e),
            WorkflowError::NoGpuMetric => Failure::new(NO_METRIC, e),
            WorkflowError::SingleGroup => Failure::new(SINGLE_GROUP, e),
            _ => Failure::new(OTHER, e),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::new(OTHER, e)
    }
}
