//! Log-normal permeability fields from a truncated Karhunen-Loève expansion
//! of an exponential-covariance Gaussian field on the unit square.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell-centred grid on `[0,1]²`. Fields are flattened with `x` fastest:
/// cell `(i, j)` lives at index `j * nx + i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument(format!("grid must be at least 2x2, got {nx}x{ny}")));
        }
        Ok(Self { nx, ny })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.hx() * self.hy()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * self.hx(), (j as f64 + 0.5) * self.hy()]
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| (i, j)))
            .map(|(i, j)| self.center(i, j))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpCovSpec {
    pub s_g_sq: f64,
    pub lambdas: [f64; 2],
    pub mean: f64,
}

impl ExpCovSpec {
    pub fn new(s_g_sq: f64, lambdas: [f64; 2], mean: f64) -> Result<Self> {
        if !(s_g_sq > 0.0) || lambdas.iter().any(|l| !(*l > 0.0)) || !mean.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid covariance spec s_g_sq={s_g_sq}, lambdas={lambdas:?}, mean={mean}"
            )));
        }
        Ok(Self {
            s_g_sq,
            lambdas,
            mean,
        })
    }
}

impl Default for ExpCovSpec {
    fn default() -> Self {
        Self {
            s_g_sq: 1.0,
            lambdas: [0.1, 0.1],
            mean: 0.0,
        }
    }
}

pub fn exp_cov(xs1: [f64; 2], xs2: [f64; 2], spec: &ExpCovSpec) -> f64 {
    let r = (xs1[0] - xs2[0]).abs() / spec.lambdas[0] + (xs1[1] - xs2[1]).abs() / spec.lambdas[1];
    spec.s_g_sq * (-r).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KLExpansion {
    pub eigenvalues: Vec<f64>,
    /// `k_xi × (nx·ny)`, row `k` is the scaled eigenfunction `ψ_k` at cell centres.
    pub eigenfields: DMatrix<f64>,
    pub mean: f64,
    pub grid: Grid2D,
}

/// Eigenpairs of the Nyström operator `h·C` for the 1-D exponential kernel.
fn eigen_1d(n: usize, lambda: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let h = 1.0 / n as f64;
    let c = DMatrix::from_fn(n, n, |a, b| h * (-((a as f64 - b as f64).abs() * h) / lambda).exp());
    let eig = SymmetricEigen::try_new(c, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen(format!("1-D exponential kernel, n = {n}")))?;
    let mut vecs = eig.eigenvectors;
    // Fix the sign so the largest-magnitude entry is positive.
    for mut col in vecs.column_iter_mut() {
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    Ok((eig.eigenvalues.iter().copied().collect(), vecs))
}

/// Truncated KLE. The exponential covariance is separable, so the 2-D
/// Nyström eigenpairs are products of 1-D eigenpairs in x and y.
pub fn kle_decompose(grid: Grid2D, spec: &ExpCovSpec, k_xi: usize) -> Result<KLExpansion> {
    let n = grid.len();
    if k_xi == 0 || k_xi > n {
        return Err(Error::InvalidArgument(format!("k_xi must be in 1..={n}, got {k_xi}")));
    }
    let (ex, vx) = eigen_1d(grid.nx, spec.lambdas[0])?;
    let (ey, vy) = eigen_1d(grid.ny, spec.lambdas[1])?;

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (b, eyb) in ey.iter().enumerate() {
        for (a, exa) in ex.iter().enumerate() {
            pairs.push((spec.s_g_sq * exa * eyb, a, b));
        }
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.2, p.1).cmp(&(q.2, q.1))));
    pairs.truncate(k_xi);

    let inv_sqrt_area = 1.0 / grid.cell_area().sqrt();
    let mut eigenvalues = Vec::with_capacity(k_xi);
    let mut eigenfields = DMatrix::zeros(k_xi, n);
    for (k, &(ev, a, b)) in pairs.iter().enumerate() {
        let ev = if ev < 0.0 {
            if ev < -1e-10 {
                return Err(Error::Eigen(format!("negative eigenvalue {ev:e}")));
            }
            0.0
        } else {
            ev
        };
        eigenvalues.push(ev);
        let scale = ev.sqrt() * inv_sqrt_area;
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                eigenfields[(k, grid.index(i, j))] = scale * vx[(i, a)] * vy[(j, b)];
            }
        }
    }
    Ok(KLExpansion {
        eigenvalues,
        eigenfields,
        mean: spec.mean,
        grid,
    })
}

impl KLExpansion {
    pub fn k_xi(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `m + Σ_k w_k ψ_k` at every cell centre.
    pub fn sample_log_field(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.k_xi() {
            return Err(Error::dims("KLE coefficients", w.len(), self.k_xi()));
        }
        let mut field = vec![self.mean; self.grid.len()];
        for (k, wk) in w.iter().enumerate() {
            if *wk == 0.0 {
                continue;
            }
            for (c, f) in field.iter_mut().enumerate() {
                *f += wk * self.eigenfields[(k, c)];
            }
        }
        Ok(field)
    }

    /// `exp(m + Σ_k Φ⁻¹(ξ_k) ψ_k)`.
    pub fn permeability(&self, xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.k_xi() {
            return Err(Error::dims("KLE uniform inputs", xi.len(), self.k_xi()));
        }
        let w = xi.iter().map(|u| std_normal_inv_cdf(*u)).collect::<Result<Vec<_>>>()?;
        let mut field = self.sample_log_field(&w)?;
        field.iter_mut().for_each(|g| *g = g.exp());
        Ok(field)
    }

    /// Covariance of the truncated field between two cells.
    pub fn truncated_cov(&self, c1: usize, c2: usize) -> f64 {
        (0..self.k_xi())
            .map(|k| self.eigenfields[(k, c1)] * self.eigenfields[(k, c2)])
            .sum()
    }

    /// Fraction of the total field variance captured by the first `k` modes.
    pub fn energy_fraction(&self, k: usize, spec: &ExpCovSpec) -> f64 {
        self.eigenvalues.iter().take(k).sum::<f64>() / spec.s_g_sq
    }
}

pub fn sample_log_field(kle: &KLExpansion, w: &[f64]) -> Result<Vec<f64>> {
    kle.sample_log_field(w)
}

pub fn permeability(kle: &KLExpansion, xi: &[f64]) -> Result<Vec<f64>> {
    kle.permeability(xi)
}

/// Uniform draws strictly inside `(0, 1)`.
pub fn sample_xi<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| rng.sample::<f64, _>(Open01)).collect()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF: Acklam's rational approximation followed by
/// one Halley step against `erfc`.
pub fn std_normal_inv_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidArgument(format!("probability must lie in (0,1), got {u}")));
    }
    if u == 0.5 {
        return Ok(0.0);
    }
    // Work in the lower tail and reflect, which makes the result exactly antisymmetric.
    if u > 0.5 {
        return Ok(-lower_tail_inv(1.0 - u));
    }
    Ok(lower_tail_inv(u))
}

fn lower_tail_inv(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549671010243972,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}
