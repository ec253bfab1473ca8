//! Shared CSV plumbing: header validation and typed cell parsing with
//! line-numbered errors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(BufReader::new(file)))
}

pub(crate) fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file)))
}

pub(crate) fn flush<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Column positions for a fixed schema.
pub(crate) struct Columns {
    names: Vec<&'static str>,
    positions: Vec<usize>,
}

impl Columns {
    pub(crate) fn resolve(headers: &csv::StringRecord, names: &[&'static str]) -> Result<Self> {
        let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
        let positions = names
            .iter()
            .map(|n| index.get(n).copied().ok_or_else(|| Error::MissingColumn((*n).to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Columns {
            names: names.to_vec(),
            positions,
        })
    }

    pub(crate) fn cell<'r>(&self, record: &'r csv::StringRecord, k: usize) -> &'r str {
        record.get(self.positions[k]).unwrap_or("").trim()
    }

    pub(crate) fn name(&self, k: usize) -> &'static str {
        self.names[k]
    }
}

pub(crate) fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

pub(crate) fn parse_err(record: &csv::StringRecord, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row: line_of(record),
        column: column.to_string(),
        message: message.into(),
    }
}

pub(crate) fn f64_cell(cols: &Columns, record: &csv::StringRecord, k: usize) -> Result<f64> {
    let raw = cols.cell(record, k);
    raw.parse::<f64>()
        .map_err(|_| parse_err(record, cols.name(k), format!("expected a number, found `{raw}`")))
}

pub(crate) fn opt_f64_cell(cols: &Columns, record: &csv::StringRecord, k: usize) -> Result<Option<f64>> {
    if cols.cell(record, k).is_empty() {
        Ok(None)
    } else {
        f64_cell(cols, record, k).map(Some)
    }
}

pub(crate) fn bool_cell(cols: &Columns, record: &csv::StringRecord, k: usize) -> Result<bool> {
    match cols.cell(record, k) {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(parse_err(record, cols.name(k), format!("expected a boolean, found `{other}`"))),
    }
}

pub(crate) fn opt_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
