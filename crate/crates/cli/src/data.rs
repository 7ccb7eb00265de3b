//! CSV data files: optional header row, `#` comments, columns `t,y[,w]`.

use std::path::Path;

use sepfit::model::{DataSet, WeightPolicy};

use crate::config::{ColumnMap, ColumnRef, Weights};
use crate::error::CliError;

struct Table {
    header: Option<Vec<String>>,
    /// `(line number, values)`.
    rows: Vec<(u64, Vec<f64>)>,
}

fn parse_table(text: &str, source: &str) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut header = None;
    let mut rows = Vec::new();
    let mut width = None;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Input(format!("{source}: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = record.iter().map(str::parse::<f64>).collect();
        if header.is_none() && rows.is_empty() && parsed.iter().any(Result::is_err) {
            header = Some(record.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(CliError::Input(format!(
                    "{source} line {line}: expected {w} fields, found {}",
                    record.len()
                )))
            }
            _ => width = Some(record.len()),
        }
        let mut values = Vec::with_capacity(record.len());
        for (i, (cell, v)) in record.iter().zip(parsed).enumerate() {
            match v {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(CliError::Input(format!(
                        "{source} line {line}: column {} value {cell:?} is not a finite number",
                        i + 1
                    )))
                }
            }
        }
        rows.push((line, values));
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{source}: no data rows")));
    }
    Ok(Table { header, rows })
}

fn column_index(table: &Table, col: &ColumnRef, source: &str) -> Result<usize, CliError> {
    let width = table.rows[0].1.len();
    let idx = match col {
        ColumnRef::Index(i) => *i,
        ColumnRef::Name(name) => table
            .header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| CliError::Input(format!("{source}: no column named {name:?}")))?,
    };
    if idx >= width {
        return Err(CliError::Input(format!(
            "{source}: column {idx} requested but rows have {width} fields"
        )));
    }
    Ok(idx)
}

/// Parses CSV text into a dataset.
pub fn parse_data(
    text: &str,
    source: &str,
    columns: &ColumnMap,
    weights: Option<Weights>,
) -> Result<DataSet, CliError> {
    let table = parse_table(text, source)?;
    let width = table.rows[0].1.len();
    let ti = column_index(&table, &columns.t, source)?;
    let yi = column_index(&table, &columns.y, source)?;
    let wi = match &columns.w {
        Some(c) => Some(column_index(&table, c, source)?),
        None if width > 2 => Some(2),
        None => None,
    };
    let t: Vec<f64> = table.rows.iter().map(|(_, r)| r[ti]).collect();
    let y: Vec<f64> = table.rows.iter().map(|(_, r)| r[yi]).collect();
    let policy = match (weights, wi) {
        (Some(Weights::Uniform), _) | (None, None) => WeightPolicy::Uniform,
        (Some(Weights::InverseY), _) => WeightPolicy::InverseY,
        (Some(Weights::Column) | None, Some(wi)) => {
            let w: Vec<f64> = table.rows.iter().map(|(_, r)| r[wi]).collect();
            if let Some((line, _)) = table.rows.iter().find(|(_, r)| r[wi] <= 0.0) {
                return Err(CliError::Input(format!(
                    "{source} line {line}: weight must be positive"
                )));
            }
            WeightPolicy::Explicit(w)
        }
        (Some(Weights::Column), None) => {
            return Err(CliError::Input(format!(
                "{source}: weights = \"column\" but the file has no weight column"
            )))
        }
    };
    DataSet::with_policy(t, y, policy).map_err(|e| CliError::Input(format!("{source}: {e}")))
}

pub fn read_data(path: &Path, columns: &ColumnMap, weights: Option<Weights>) -> Result<DataSet, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read data file {}: {e}", path.display())))?;
    parse_data(&text, &path.display().to_string(), columns, weights)
}

/// `t,y,w` with 17 significant digits.
pub fn write_data(out: &mut impl std::io::Write, header: &str, data: &DataSet) -> std::io::Result<()> {
    out.write_all(header.as_bytes())?;
    writeln!(out, "t,y,w")?;
    for ((t, y), w) in data.t().iter().zip(data.y()).zip(data.w()) {
        writeln!(out, "{t:.16e},{y:.16e},{w:.16e}")?;
    }
    Ok(())
}
