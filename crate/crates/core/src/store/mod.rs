//! Sparse performance database: metadata, per-profile record bodies sorted by
//! (context, metric), and per-profile traces, each reachable through an
//! index keyed by profile id.

mod format;
mod meta;
mod reader;
mod validate;
mod writer;

use thiserror::Error;

pub use format::{
    EVENT_LEN, META_FILE, PROFILE_FILE, PROFILE_INDEX_ENTRY, RECORD_LEN, TRACE_FILE,
    TRACE_INDEX_ENTRY,
};
pub use meta::*;
pub use reader::{
    open_database, DbHandle, ProfileIndexEntry, ReadStats, TraceIndexEntry, TraceWindow,
};
pub use validate::{validate_database, ValidationReport, Violation, ViolationKind};
pub use writer::{check_image, write_database};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed database: {0}")]
    Format(String),
    #[error("invalid database image: {0}")]
    InvalidImage(String),
    #[error("{what} {id} not found")]
    NotFound { what: &'static str, id: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
