use std::io::Write;

use clap::ValueEnum;
use serde::Serialize;

use perfslice::frame::Table;

use crate::exit::Failure;

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

pub fn emit_json<T: Serialize + ?Sized>(value: &T) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(Failure::other)?;
    writeln!(out).map_err(Failure::other)
}

pub fn emit_table(t: &Table, format: Format) -> Result<(), Failure> {
    match format {
        Format::Json => emit_json(&t.to_json()),
        Format::Csv => t.write_csv(std::io::stdout().lock()).map_err(Failure::other),
    }
}

/// Header plus one record per row; rows must be flat structs.
pub fn emit_csv_rows<T: Serialize>(rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    for r in rows {
        w.serialize(r).map_err(Failure::other)?;
    }
    w.flush().map_err(Failure::other)
}
