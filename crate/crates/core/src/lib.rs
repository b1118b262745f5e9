pub mod diagnostics;
pub mod frame;
pub mod glob;
pub mod ingest;
pub mod itermodel;
mod par;
pub mod query;
pub mod store;
pub mod synthgen;
pub mod topology;
pub mod workflow;
