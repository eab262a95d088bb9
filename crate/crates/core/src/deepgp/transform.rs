//! Affine (optionally log) column transforms applied before training.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x ↦ (g(x) − offset) / scale` per column, with `g = ln` when `log` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub log: bool,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    x.column_iter().map(|c| c.mean()).collect()
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            log: false,
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// Zero mean and unit variance per column. Constant columns keep scale 1.
    pub fn fit_columns(x: &DMatrix<f64>, log: bool) -> Result<Self> {
        let x = if log { log_of(x)? } else { x.clone() };
        if x.nrows() < 2 {
            return Err(Error::InvalidArgument("need at least two rows to standardize".into()));
        }
        let offset = column_means(&x);
        let scale = x
            .column_iter()
            .map(|c| {
                let s = c.variance().sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { log, offset, scale })
    }

    /// Column means removed, one common scale so that the mean column variance is 1.
    pub fn fit_global(y: &DMatrix<f64>) -> Result<Self> {
        if y.nrows() < 2 {
            return Err(Error::InvalidArgument("need at least two rows to standardize".into()));
        }
        let offset = column_means(y);
        let var = y.column_iter().map(|c| c.variance()).sum::<f64>() / y.ncols() as f64;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::Degenerate("outputs have zero variance".into()));
        }
        Ok(Self {
            log: false,
            offset,
            scale: vec![var.sqrt(); y.ncols()],
        })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::dims("transform input columns", x.ncols(), self.dim()));
        }
        let mut out = if self.log { log_of(x)? } else { x.clone() };
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.iter_mut().for_each(|v| *v = (*v - self.offset[j]) / self.scale[j]);
        }
        Ok(out)
    }

    /// Maps transformed means back. Only defined without the log.
    pub fn invert_mean(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_invertible(m)?;
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.iter_mut().for_each(|v| *v = *v * self.scale[j] + self.offset[j]);
        }
        Ok(out)
    }

    pub fn invert_variance(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_invertible(v)?;
        let mut out = v.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let s2 = self.scale[j] * self.scale[j];
            col.iter_mut().for_each(|v| *v *= s2);
        }
        Ok(out)
    }

    fn check_invertible(&self, m: &DMatrix<f64>) -> Result<()> {
        if self.log {
            return Err(Error::InvalidArgument("log transforms are not inverted".into()));
        }
        if m.ncols() != self.dim() {
            return Err(Error::dims("transform output columns", m.ncols(), self.dim()));
        }
        Ok(())
    }
}

fn log_of(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log transform needs strictly positive inputs".into()));
    }
    Ok(x.map(f64::ln))
}
