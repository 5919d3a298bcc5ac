//! CSV input and output for datasets and partitions.
//!
//! Dataset files have a header row whose first column is `y` followed by one
//! column per variable id; each subsequent row is one sample. Partition files
//! have the header `variable_id,cell_id` and one row per variable.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ShapeBuilder};

use super::{Dataset, Partition};
use crate::error::{CtfError, Result};
use crate::scalar::Real;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CtfError {
    CtfError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file))
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback)
}

/// Reads `variable_id,cell_id` rows. Cells are numbered in order of first
/// appearance; `variable_order` fixes the variable indices.
pub fn read_partition_csv(path: &Path, variable_order: &[String]) -> Result<Partition> {
    let mut rdr = reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "variable_id" || &headers[1] != "cell_id" {
        return Err(parse_err(path, 1, "expected header `variable_id,cell_id`"));
    }
    let index: HashMap<&str, usize> = variable_order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut cell_ids: HashMap<String, usize> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let mut seen = vec![false; variable_order.len()];
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(k + 2);
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec, k + 2);
        if rec.len() != 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        let v = *index
            .get(&rec[0])
            .ok_or_else(|| parse_err(path, line, format!("unknown variable `{}`", &rec[0])))?;
        if std::mem::replace(&mut seen[v], true) {
            return Err(parse_err(
                path,
                line,
                format!("variable `{}` listed twice", &rec[0]),
            ));
        }
        let g = *cell_ids.entry(rec[1].to_string()).or_insert_with(|| {
            names.push(rec[1].to_string());
            cells.push(Vec::new());
            cells.len() - 1
        });
        cells[g].push(v);
    }
    if let Some(v) = seen.iter().position(|s| !s) {
        return Err(parse_err(
            path,
            0,
            format!("variable `{}` has no cell", variable_order[v]),
        ));
    }
    Partition::new(cells, variable_order.len())?.with_cell_names(names)
}

/// Reads the response and design; the partition is read separately.
pub fn read_dataset_csv<T: Real>(data_path: &Path, partition_path: &Path) -> Result<Dataset<T>> {
    let mut rdr = reader(data_path)?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(data_path, 1, e.to_string()))?
        .clone();
    if headers.is_empty() || &headers[0] != "y" {
        return Err(parse_err(data_path, 1, "first column must be `y`"));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if names.is_empty() {
        return Err(parse_err(data_path, 1, "no variable columns"));
    }
    let mut uniq = std::collections::HashSet::new();
    if let Some(dup) = names.iter().find(|n| !uniq.insert(n.as_str())) {
        return Err(parse_err(data_path, 1, format!("duplicate column `{dup}`")));
    }

    let p = names.len();
    let mut y = Vec::new();
    let mut cols: Vec<Vec<T>> = vec![Vec::new(); p];
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(k + 2);
            parse_err(data_path, line, e.to_string())
        })?;
        let line = record_line(&rec, k + 2);
        if rec.len() != p + 1 {
            return Err(parse_err(
                data_path,
                line,
                format!("expected {} fields, found {}", p + 1, rec.len()),
            ));
        }
        let mut vals = rec.iter().enumerate().map(|(j, s)| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(T::lit)
                .ok_or_else(|| {
                    parse_err(
                        data_path,
                        line,
                        format!("field {}: bad number `{s}`", j + 1),
                    )
                })
        });
        y.push(vals.next().expect("non-empty record")?);
        for (col, v) in cols.iter_mut().zip(vals) {
            col.push(v?);
        }
    }
    let n = y.len();
    let flat: Vec<T> = cols.into_iter().flatten().collect();
    let x = Array2::from_shape_vec((n, p).f(), flat)
        .map_err(|e| CtfError::InvalidConfig(e.to_string()))?;
    let partition = read_partition_csv(partition_path, &names)?;
    Dataset::new(Array1::from(y), x, partition)?.with_variable_names(names)
}

pub fn write_dataset_csv<T: Real>(data: &Dataset<T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["y".to_string()];
    header.extend(data.variable_names().iter().cloned());
    w.write_record(&header).map_err(csv_io)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..data.n_samples() {
        row.clear();
        row.push(format!("{:e}", data.y()[i].as_f64()));
        row.extend(data.x().row(i).iter().map(|v| format!("{:e}", v.as_f64())));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_partition_csv<T: Real>(data: &Dataset<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "variable_id,cell_id")?;
    let p = data.partition();
    for (v, name) in data.variable_names().iter().enumerate() {
        writeln!(out, "{name},{}", p.cell_name(p.cell_of(v)))?;
    }
    out.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> CtfError {
    CtfError::Io(std::io::Error::other(e))
}
