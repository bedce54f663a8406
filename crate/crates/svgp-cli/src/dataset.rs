//! Delimited-text datasets: header `x0,..,x{d-1},y0,..,y{k-1}`, one finite
//! real per cell, UTF-8, LF or CRLF.

use ndarray::{Array1, Array2};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    /// Single-target column as a vector.
    pub fn y_single(&self) -> CliResult<Array1<f64>> {
        if self.y.ncols() != 1 {
            return Err(CliError::data(format!(
                "expected a single target column y0, found {}",
                self.y.ncols()
            )));
        }
        Ok(self.y.column(0).to_owned())
    }
}

pub fn read_dataset(path: &std::path::Path) -> CliResult<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::data(format!("{}: header: {e}", path.display())))?
        .clone();
    let mut x_names = Vec::new();
    let mut y_names = Vec::new();
    for h in headers.iter() {
        if let Some(rest) = h.strip_prefix('x') {
            if rest.parse::<usize>().is_ok() {
                if !y_names.is_empty() {
                    return Err(CliError::data(format!(
                        "column {h} appears after target columns; expected x0..x{{d-1}},y0..y{{k-1}}"
                    )));
                }
                x_names.push(h.to_string());
                continue;
            }
        }
        if let Some(rest) = h.strip_prefix('y') {
            if rest.parse::<usize>().is_ok() {
                y_names.push(h.to_string());
                continue;
            }
        }
        return Err(CliError::data(format!("unrecognized column name {h}")));
    }
    if y_names.is_empty() {
        return Err(CliError::data("dataset has no target column (expected y0)"));
    }
    for (i, name) in x_names.iter().enumerate() {
        if name != &format!("x{i}") {
            return Err(CliError::data(format!("input columns out of order near {name}")));
        }
    }
    for (i, name) in y_names.iter().enumerate() {
        if name != &format!("y{i}") {
            return Err(CliError::data(format!("target columns out of order near {name}")));
        }
    }
    let d = x_names.len();
    let k = y_names.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (rix, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(format!("row {}: {e}", rix + 2)))?;
        if rec.len() != d + k {
            return Err(CliError::data(format!(
                "row {}: expected {} cells, found {}",
                rix + 2,
                d + k,
                rec.len()
            )));
        }
        let mut vals = Vec::with_capacity(d + k);
        for (cix, cell) in rec.iter().enumerate() {
            let name = headers.get(cix).unwrap_or("?");
            let v: f64 = cell.parse().map_err(|_| {
                CliError::data(format!("row {}, column {name}: cannot parse {cell:?}", rix + 2))
            })?;
            if !v.is_finite() {
                return Err(CliError::data(format!(
                    "row {}, column {name}: value not finite",
                    rix + 2
                )));
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{}: dataset has no rows", path.display())));
    }
    let n = rows.len();
    let mut x = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, k));
    for (i, row) in rows.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = row[j];
        }
        for j in 0..k {
            y[[i, j]] = row[d + j];
        }
    }
    Ok(Dataset { x, y, x_names, y_names })
}

pub fn write_dataset(
    path: &std::path::Path,
    x: &Array2<f64>,
    y: &Array2<f64>,
) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut header = Vec::new();
    for j in 0..x.ncols() {
        header.push(format!("x{j}"));
    }
    for j in 0..y.ncols() {
        header.push(format!("y{j}"));
    }
    w.write_record(&header).map_err(|e| CliError::data(e.to_string()))?;
    for i in 0..x.nrows() {
        let mut row = Vec::with_capacity(x.ncols() + y.ncols());
        for j in 0..x.ncols() {
            row.push(format!("{}", x[[i, j]]));
        }
        for j in 0..y.ncols() {
            row.push(format!("{}", y[[i, j]]));
        }
        w.write_record(&row).map_err(|e| CliError::data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;
    Ok(())
}

/// Check Bernoulli targets are exactly zero or one.
pub fn check_binary_targets(y: &Array1<f64>) -> CliResult<()> {
    for (i, &v) in y.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(CliError::data(format!(
                "row {}: Bernoulli target must be 0 or 1, found {v}",
                i + 2
            )));
        }
    }
    Ok(())
}
