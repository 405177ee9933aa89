//! CSV input and output for source and target samples.
//!
//! Source files carry covariate columns plus `a`, `u` and `delta`; target
//! files carry the same covariates plus `design_weight`. Floats are written
//! in shortest round-trip form, so a write followed by a read is lossless.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::{validate_source, validate_target, DataError, RawTable, SourceSample, TargetSample};
use crate::error::{Error, Result};

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads a headed CSV into untyped cells.
pub fn read_table<R: Read>(reader: R) -> std::result::Result<RawTable, csv::Error> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(RawTable { header, rows })
}

fn open_table(path: &Path) -> Result<RawTable> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    read_table(file).map_err(|e| io_error(path, e))
}

pub fn read_source(path: impl AsRef<Path>) -> Result<SourceSample> {
    Ok(validate_source(&open_table(path.as_ref())?)?)
}

/// Reads a target file, reordering its covariate columns to `names` (the
/// source covariates).
pub fn read_target(path: impl AsRef<Path>, names: &[String]) -> Result<TargetSample> {
    let table = open_table(path.as_ref())?;
    Ok(align_target(&table, names)?)
}

/// Validates a target table against the source covariate names.
pub fn align_target(table: &RawTable, names: &[String]) -> std::result::Result<TargetSample, DataError> {
    let mut order = Vec::with_capacity(names.len() + 1);
    for name in names.iter().map(String::as_str).chain(["design_weight"]) {
        let col = table
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
        order.push(col);
    }
    if table.header.len() != order.len() {
        return Err(DataError::DimensionMismatch {
            expected: names.len(),
            found: table.header.len() - 1,
        });
    }
    let pick = |row: &Vec<String>| order.iter().map(|&c| row.get(c).cloned().unwrap_or_default()).collect();
    let aligned = RawTable {
        header: order.iter().map(|&c| table.header[c].clone()).collect(),
        rows: table
            .rows
            .iter()
            .map(|r| if r.len() == table.header.len() { pick(r) } else { r.clone() })
            .collect(),
    };
    validate_target(&aligned, names.len())
}

pub fn write_source<W: Write>(sample: &SourceSample, out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = sample.covariate_names().iter().map(String::as_str).collect();
    header.extend(["a", "u", "delta"]);
    w.write_record(&header)?;
    for r in sample.records() {
        let mut row: Vec<String> = r.x.iter().map(f64::to_string).collect();
        row.push(u8::from(r.arm.is_treated()).to_string());
        row.push(r.time.to_string());
        row.push(u8::from(r.event).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_target<W: Write>(sample: &TargetSample, out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = sample.covariate_names().iter().map(String::as_str).collect();
    header.push("design_weight");
    w.write_record(&header)?;
    for r in sample.records() {
        let mut row: Vec<String> = r.x.iter().map(f64::to_string).collect();
        row.push(r.design_weight.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_source(sample: &SourceSample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    write_source(sample, file).map_err(|e| io_error(path, e))
}

pub fn save_target(sample: &TargetSample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    write_target(sample, file).map_err(|e| io_error(path, e))
}
