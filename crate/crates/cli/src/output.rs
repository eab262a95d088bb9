//! File helpers shared by the commands.

use std::fs;
use std::path::{Path, PathBuf};

use dgp_core::error::{Error, Result};
use dgp_core::matrix::MatrixContainer;
use dgp_core::uq::PdfCurve;
use nalgebra::DMatrix;
use serde::Serialize;

pub const TOOL: &str = "dgp";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", dir.display())))
}

/// Writes a container and returns its file name.
pub fn put_matrix(dir: &Path, name: &str, m: &DMatrix<f64>) -> Result<String> {
    let file = format!("{name}.dgpm");
    MatrixContainer::from_dmatrix(m).save(dir.join(&file))?;
    Ok(file)
}

/// A flat field as a `side × side` matrix, one row per grid row.
pub fn as_grid(field: &[f64]) -> DMatrix<f64> {
    let side = square_side(field.len()).unwrap_or(1);
    let cols = field.len() / side;
    DMatrix::from_row_slice(side, cols, field)
}

pub fn square_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s * s == n).then_some(s)
}

pub fn put_field(dir: &Path, name: &str, field: &[f64]) -> Result<String> {
    put_matrix(dir, name, &as_grid(field))
}

pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_pdf_csv(path: &Path, pdf: &PdfCurve) -> Result<()> {
    let rows = (0..pdf.abscissae.len()).map(|k| format!("{},{},{},{}", pdf.abscissae[k], pdf.mean[k], pdf.lower[k], pdf.upper[k]));
    write_csv(path, "abscissa,mean,lower,upper", rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Side-car path `<dir>/<stem>.<suffix>` next to a file.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Parses `"x,y"` into a point of the unit square.
pub fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected \"x,y\", got {s:?}"));
    }
    let x: f64 = parts[0].parse().map_err(|_| format!("bad coordinate {:?}", parts[0]))?;
    let y: f64 = parts[1].parse().map_err(|_| format!("bad coordinate {:?}", parts[1]))?;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(format!("point {s:?} lies outside the unit square"));
    }
    Ok([x, y])
}

/// Index of the output cell containing `p` on a `side × side` grid.
pub fn cell_of(p: [f64; 2], side: usize) -> usize {
    let i = ((p[0] * side as f64) as usize).min(side - 1);
    let j = ((p[1] * side as f64) as usize).min(side - 1);
    j * side + i
}

pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| format!("bad integer {t:?} in {s:?}")))
        .collect()
}
