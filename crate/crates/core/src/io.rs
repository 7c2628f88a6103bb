//! CSV and JSON persistence.
//!
//! Floats in CSV files carry 17 significant digits (`{:.16e}`), enough to
//! round-trip every `f64`. JSON uses serde_json's shortest round-trip form.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid};

pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:.16e}")
    }
}

/// Field CSV with header `index,x[,y],value` in node order.
pub fn field_csv(field: &Field) -> String {
    let grid = field.grid();
    let d = grid.dimension();
    let mut out = String::from(if d == 1 { "index,x,value\n" } else { "index,x,y,value\n" });
    for (i, v) in field.values().iter().enumerate() {
        let c = grid.coords(i);
        out.push_str(&i.to_string());
        for x in &c[..d] {
            out.push(',');
            out.push_str(&fmt_float(*x));
        }
        out.push(',');
        out.push_str(&fmt_float(*v));
        out.push('\n');
    }
    out
}

pub fn write_field_csv(field: &Field, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, field_csv(field))?;
    Ok(())
}

/// Reads a field CSV written by [`field_csv`] back onto `grid`.
pub fn read_field_csv(grid: &Arc<Grid>, path: &Path) -> Result<Field> {
    let text = fs::read_to_string(path)?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"index") || columns.last() != Some(&"value") {
        return Err(parse_err(format!("unexpected header `{header}`")));
    }
    let mut values = vec![0.0; grid.node_count()];
    let mut seen = 0;
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(parse_err(format!("line {}: expected {} cells", k + 2, columns.len())));
        }
        let index: usize = cells[0]
            .parse()
            .map_err(|e| parse_err(format!("line {}: {e}", k + 2)))?;
        let value: f64 = cells[cells.len() - 1]
            .parse()
            .map_err(|e| parse_err(format!("line {}: {e}", k + 2)))?;
        if index >= values.len() {
            return Err(parse_err(format!("line {}: index {index} out of range", k + 2)));
        }
        values[index] = value;
        seen += 1;
    }
    if seen != grid.node_count() {
        return Err(parse_err(format!("expected {} rows, found {seen}", grid.node_count())));
    }
    Field::from_values(grid, values)
}

/// Series CSV: one header row, then rows of floats.
pub fn series_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|&x| fmt_float(x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
