//! Single-phase Darcy flow, `u = -K∇p`, `∇·u = f`, no-flux walls, on a
//! cell-centred grid with two-point flux approximation.

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random_field::Grid2D;

/// Two square wells: injection (`-r`) at the origin corner, production (`+r`)
/// at the opposite corner, each of side `w`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub rate: f64,
    pub width: f64,
}

impl SourceSpec {
    pub fn new(rate: f64, width: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) || !(width > 0.0 && width < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "source needs rate > 0 and 0 < width < 1, got rate={rate}, width={width}"
            )));
        }
        Ok(Self { rate, width })
    }
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            rate: 10.0,
            width: 0.125,
        }
    }
}

pub fn source_term(xs: [f64; 2], spec: &SourceSpec) -> f64 {
    let hw = 0.5 * spec.width;
    let in_low = xs.iter().all(|x| (x - hw).abs() < hw);
    let in_high = xs.iter().all(|x| (x - 1.0 + hw).abs() < hw);
    if in_low {
        -spec.rate
    } else if in_high {
        spec.rate
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DarcySolution {
    pub pressure: Vec<f64>,
    pub vel_x: Vec<f64>,
    pub vel_y: Vec<f64>,
    /// Normal velocity on vertical faces, `(nx + 1) × ny`, face `(i, j)` at index `j * (nx + 1) + i`.
    pub face_vel_x: Vec<f64>,
    /// Normal velocity on horizontal faces, `nx × (ny + 1)`, face `(i, j)` at index `j * nx + i`.
    pub face_vel_y: Vec<f64>,
    pub grid: Grid2D,
}

impl DarcySolution {
    /// Net outflow minus the integrated source per cell; zero up to round-off.
    pub fn conservation_residual(&self, source: &[f64]) -> Vec<f64> {
        let g = self.grid;
        let (hx, hy) = (g.hx(), g.hy());
        let mut res = vec![0.0; g.len()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                let out = (self.face_vel_x[j * (g.nx + 1) + i + 1] - self.face_vel_x[j * (g.nx + 1) + i]) * hy
                    + (self.face_vel_y[(j + 1) * g.nx + i] - self.face_vel_y[j * g.nx + i]) * hx;
                res[g.index(i, j)] = out - source[g.index(i, j)] * g.cell_area();
            }
        }
        res
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Cell-centre source values projected to zero mean so the Neumann problem is solvable.
pub fn source_field(grid: Grid2D, spec: &SourceSpec) -> Vec<f64> {
    let f: Vec<f64> = grid.centers().into_iter().map(|c| source_term(c, spec)).collect();
    zero_mean(f)
}

fn zero_mean(mut f: Vec<f64>) -> Vec<f64> {
    let m = f.iter().sum::<f64>() / f.len() as f64;
    f.iter_mut().for_each(|v| *v -= m);
    f
}

pub fn solve(k: &[f64], grid: Grid2D, spec: &SourceSpec) -> Result<DarcySolution> {
    solve_with_source(k, grid, &source_field(grid, spec))
}

/// Solves `-∇·(K∇p) = f` with no-flux walls and zero-mean pressure. The source
/// is projected onto zero mean first.
pub fn solve_with_source(k: &[f64], grid: Grid2D, source: &[f64]) -> Result<DarcySolution> {
    let n = grid.len();
    if k.len() != n {
        return Err(Error::dims("permeability field vs grid", k.len(), n));
    }
    if source.len() != n {
        return Err(Error::dims("source field vs grid", source.len(), n));
    }
    if let Some(v) = k.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!("permeability must be positive, found {v}")));
    }
    let (nx, ny) = (grid.nx, grid.ny);
    let (hx, hy) = (grid.hx(), grid.hy());
    let tx = hy / hx;
    let ty = hx / hy;

    let mut coo = CooMatrix::new(n, n);
    let mut diag = vec![0.0; n];
    for j in 0..ny {
        for i in 0..nx {
            let c = grid.index(i, j);
            if i + 1 < nx {
                let e = grid.index(i + 1, j);
                let t = tx * harmonic(k[c], k[e]);
                diag[c] += t;
                diag[e] += t;
                coo.push(c, e, -t);
                coo.push(e, c, -t);
            }
            if j + 1 < ny {
                let nb = grid.index(i, j + 1);
                let t = ty * harmonic(k[c], k[nb]);
                diag[c] += t;
                diag[nb] += t;
                coo.push(c, nb, -t);
                coo.push(nb, c, -t);
            }
        }
    }
    // Doubling one diagonal entry removes the constant null space and forces p₀ = 0.
    diag[0] *= 2.0;
    for (c, d) in diag.iter().enumerate() {
        coo.push(c, c, *d);
    }
    let a = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&a).map_err(|e| Error::Solver(format!("Cholesky: {e}")))?;

    let f = zero_mean(source.to_vec());
    let area = grid.cell_area();
    let b = DMatrix::from_iterator(n, 1, f.iter().map(|v| v * area));
    let sol = chol.solve(&b);
    let mut p: Vec<f64> = sol.iter().copied().collect();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pressure solution".into()));
    }
    let mean = p.iter().sum::<f64>() / n as f64;
    p.iter_mut().for_each(|v| *v -= mean);

    let mut face_vel_x = vec![0.0; (nx + 1) * ny];
    let mut face_vel_y = vec![0.0; nx * (ny + 1)];
    for j in 0..ny {
        for i in 1..nx {
            let (w, e) = (grid.index(i - 1, j), grid.index(i, j));
            face_vel_x[j * (nx + 1) + i] = -harmonic(k[w], k[e]) * (p[e] - p[w]) / hx;
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let (s, nb) = (grid.index(i, j - 1), grid.index(i, j));
            face_vel_y[j * nx + i] = -harmonic(k[s], k[nb]) * (p[nb] - p[s]) / hy;
        }
    }
    let mut vel_x = vec![0.0; n];
    let mut vel_y = vec![0.0; n];
    for j in 0..ny {
        for i in 0..nx {
            let c = grid.index(i, j);
            vel_x[c] = 0.5 * (face_vel_x[j * (nx + 1) + i] + face_vel_x[j * (nx + 1) + i + 1]);
            vel_y[c] = 0.5 * (face_vel_y[j * nx + i] + face_vel_y[(j + 1) * nx + i]);
        }
    }
    Ok(DarcySolution {
        pressure: p,
        vel_x,
        vel_y,
        face_vel_x,
        face_vel_y,
        grid,
    })
}

/// Block-averages a field onto a coarser grid.
pub fn restrict(field: &[f64], grid: Grid2D, out_nx: usize, out_ny: usize) -> Result<Vec<f64>> {
    if field.len() != grid.len() {
        return Err(Error::dims("field vs grid", field.len(), grid.len()));
    }
    if out_nx == 0 || out_ny == 0 || !grid.nx.is_multiple_of(out_nx) || !grid.ny.is_multiple_of(out_ny) {
        return Err(Error::InvalidArgument(format!(
            "cannot restrict {}x{} to {out_nx}x{out_ny}",
            grid.nx, grid.ny
        )));
    }
    let (bx, by) = (grid.nx / out_nx, grid.ny / out_ny);
    let scale = 1.0 / (bx * by) as f64;
    let mut out = vec![0.0; out_nx * out_ny];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            out[(j / by) * out_nx + i / bx] += field[grid.index(i, j)];
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(out)
}

/// Relative discrete L² error of the scheme against `p = cos(πx)cos(πy)` with `K ≡ 1`.
pub fn manufactured_error(grid: Grid2D) -> Result<f64> {
    use std::f64::consts::PI;
    let centers = grid.centers();
    let exact: Vec<f64> = centers.iter().map(|c| (PI * c[0]).cos() * (PI * c[1]).cos()).collect();
    let f: Vec<f64> = exact.iter().map(|p| 2.0 * PI * PI * p).collect();
    let sol = solve_with_source(&vec![1.0; grid.len()], grid, &f)?;
    let num: f64 = sol.pressure.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = exact.iter().map(|b| b * b).sum();
    Ok((num / den).sqrt())
}
