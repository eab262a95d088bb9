//! Exact GP regression with a zero mean and the RBF kernel.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{chol_psd_default, gram, gram_sym, symmetrize, Kernel, PsdCholesky, RbfParams};
use crate::optim::{maximize, OptimOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug)]
pub struct GpModel {
    pub kernel: RbfParams,
    pub noise_var: f64,
    pub train_x: DMatrix<f64>,
    pub train_y: DMatrix<f64>,
    chol: PsdCholesky,
    alpha: DMatrix<f64>,
}

/// Gradient of the log marginal likelihood in log-parameter space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfGrad {
    pub log_tau0_sq: f64,
    pub log_b: Vec<f64>,
    pub log_noise_var: f64,
}

impl RbfGrad {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.log_tau0_sq];
        v.extend_from_slice(&self.log_b);
        v.push(self.log_noise_var);
        v
    }
}

/// Packs `(τ₀², b, σ²)` as log-values in that order.
pub fn pack_log_params(kernel: &RbfParams, noise_var: f64) -> Vec<f64> {
    let mut v = vec![kernel.tau0_sq.ln()];
    v.extend(kernel.lengthscale_inv.iter().map(|b| b.ln()));
    v.push(noise_var.ln());
    v
}

pub fn unpack_log_params(v: &[f64]) -> Result<(RbfParams, f64)> {
    if v.len() < 3 {
        return Err(Error::InvalidArgument("need at least three log-parameters".into()));
    }
    let d = v.len() - 2;
    let kernel = RbfParams::new(v[0].exp(), v[1..=d].iter().map(|x| x.exp()).collect())?;
    let noise = v[d + 1].exp();
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise variance {noise}")));
    }
    Ok((kernel, noise))
}

/// Chains `G = ∂F/∂K` (symmetric) for `K = K_rbf(X, X) + σ²I` into log-parameters.
pub(crate) fn rbf_chain(x: &DMatrix<f64>, kx: &DMatrix<f64>, g: &DMatrix<f64>, kernel: &RbfParams, noise_var: f64) -> RbfGrad {
    let w = g.component_mul(kx);
    let log_tau0_sq = w.sum();
    let r: Vec<f64> = w.row_iter().map(|row| row.sum()).collect();
    let wx = &w * x;
    let log_b = kernel
        .lengthscale_inv
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let xk = x.column(k);
            let s1: f64 = r.iter().zip(xk.iter()).map(|(ri, v)| ri * v * v).sum();
            let s2 = xk.dot(&wx.column(k));
            -b * 2.0 * (s1 - s2)
        })
        .collect();
    RbfGrad {
        log_tau0_sq,
        log_b,
        log_noise_var: noise_var * g.trace(),
    }
}

impl GpModel {
    pub fn new(kernel: RbfParams, noise_var: f64, train_x: DMatrix<f64>, train_y: DMatrix<f64>) -> Result<Self> {
        kernel.validate()?;
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance must be positive, got {noise_var}")));
        }
        if train_x.nrows() != train_y.nrows() {
            return Err(Error::dims("training inputs vs targets", train_x.nrows(), train_y.nrows()));
        }
        if train_x.nrows() == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut k = gram_sym(&train_x, &kernel)?;
        for i in 0..k.nrows() {
            k[(i, i)] += noise_var;
        }
        let chol = chol_psd_default(&k)?;
        let alpha = chol.solve(&train_y);
        Ok(Self {
            kernel,
            noise_var,
            train_x,
            train_y,
            chol,
            alpha,
        })
    }

    pub fn n(&self) -> usize {
        self.train_x.nrows()
    }

    pub fn chol(&self) -> &PsdCholesky {
        &self.chol
    }

    pub fn log_marginal(&self) -> f64 {
        let n = self.n() as f64;
        let nu = self.train_y.ncols() as f64;
        let fit = self.train_y.dot(&self.alpha);
        -0.5 * fit - 0.5 * nu * self.chol.log_det() - 0.5 * nu * n * LN_2PI
    }

    pub fn log_marginal_grad(&self) -> RbfGrad {
        let nu = self.train_y.ncols() as f64;
        let kinv = self.chol.inverse();
        let mut g = &self.alpha * self.alpha.transpose() - kinv * nu;
        g *= 0.5;
        symmetrize(&mut g);
        let kx = gram_sym(&self.train_x, &self.kernel).expect("shapes validated at construction");
        rbf_chain(&self.train_x, &kx, &g, &self.kernel, self.noise_var)
    }

    /// Predictive mean `n*×ν` and covariance `n*×n*` of the latent function.
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let ks = self.cross(xstar)?;
        let mean = ks.transpose() * &self.alpha;
        let v = self.chol.solve_lower(&ks);
        let mut cov = gram_sym(xstar, &self.kernel)? - v.transpose() * v;
        symmetrize(&mut cov);
        Ok((mean, cov))
    }

    /// Predictive mean and marginal variances only.
    pub fn predict_marginal(&self, xstar: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let ks = self.cross(xstar)?;
        let mean = ks.transpose() * &self.alpha;
        let v = self.chol.solve_lower(&ks);
        let s = self.kernel.signal_variance();
        let var = v.column_iter().map(|c| (s - c.norm_squared()).max(0.0)).collect();
        Ok((mean, var))
    }

    fn cross(&self, xstar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if xstar.ncols() != self.train_x.ncols() {
            return Err(Error::dims("prediction inputs vs training inputs", xstar.ncols(), self.train_x.ncols()));
        }
        gram(&self.train_x, xstar, &self.kernel)
    }
}

#[derive(Clone, Debug)]
pub struct GpFit {
    pub model: GpModel,
    pub trace: Vec<f64>,
}

/// Maximizes the log marginal likelihood over log-hyperparameters.
pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, init: RbfParams, noise_var: f64, opts: &OptimOptions) -> Result<GpFit> {
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("GP fit needs at least two points".into()));
    }
    let objective = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (k, s) = unpack_log_params(v)?;
        let m = GpModel::new(k, s, x.clone(), y.clone())?;
        Ok((m.log_marginal(), m.log_marginal_grad().to_vec()))
    };
    let res = maximize(objective, pack_log_params(&init, noise_var), opts)?;
    let (k, s) = unpack_log_params(&res.x)?;
    Ok(GpFit {
        model: GpModel::new(k, s, x.clone(), y.clone())?,
        trace: res.trace,
    })
}

/// Like [`fit`], but with one inverse lengthscale shared by every input
/// dimension. Parameters are `(τ₀², b, σ²)`.
pub fn fit_isotropic(x: &DMatrix<f64>, y: &DMatrix<f64>, tau0_sq: f64, b: f64, noise_var: f64, opts: &OptimOptions) -> Result<GpFit> {
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("GP fit needs at least two points".into()));
    }
    let d = x.ncols();
    let build = |v: &[f64]| -> Result<GpModel> {
        let kernel = RbfParams::isotropic(v[0].exp(), v[1].exp(), d)?;
        let noise = v[2].exp();
        if !(noise > 0.0 && noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance {noise}")));
        }
        GpModel::new(kernel, noise, x.clone(), y.clone())
    };
    let objective = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let m = build(v)?;
        let g = m.log_marginal_grad();
        Ok((m.log_marginal(), vec![g.log_tau0_sq, g.log_b.iter().sum(), g.log_noise_var]))
    };
    let res = maximize(objective, vec![tau0_sq.ln(), b.ln(), noise_var.ln()], opts)?;
    Ok(GpFit {
        model: build(&res.x)?,
        trace: res.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn explicit_k(x: &DMatrix<f64>, kernel: &RbfParams, noise: f64) -> DMatrix<f64> {
        let n = x.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            let a: Vec<f64> = x.row(i).iter().copied().collect();
            let b: Vec<f64> = x.row(j).iter().copied().collect();
            kernel.eval(&a, &b).unwrap() + if i == j { noise } else { 0.0 }
        })
    }

    #[test]
    fn single_point_zero_target() {
        let k = RbfParams::new(0.75, vec![1.0]).unwrap();
        let m = GpModel::new(k, 0.25, DMatrix::from_element(1, 1, 0.3), DMatrix::zeros(1, 2)).unwrap();
        assert!((m.log_marginal() - 2.0 * -0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_marginal_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(3, 2, &mut rng);
        let y = random(3, 2, &mut rng);
        let kernel = RbfParams::new(1.4, vec![0.8, 2.1]).unwrap();
        let m = GpModel::new(kernel.clone(), 0.1, x.clone(), y.clone()).unwrap();
        let k = explicit_k(&x, &kernel, 0.1);
        let inv = k.clone().try_inverse().unwrap();
        let det = k.determinant();
        let expected: f64 = (0..2)
            .map(|j| {
                let yj = y.column(j);
                -0.5 * (yj.transpose() * &inv * yj)[(0, 0)] - 0.5 * det.ln() - 1.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum();
        assert!((m.log_marginal() - expected).abs() < 1e-10);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(7, 2, &mut rng);
        let y = random(7, 3, &mut rng);
        let kernel = RbfParams::new(1.0, vec![1.0, 3.0]).unwrap();
        let a = GpModel::new(kernel.clone(), 0.05, x.clone(), y.clone()).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let xp = DMatrix::from_fn(7, 2, |i, j| x[(perm[i], j)]);
        let yp = DMatrix::from_fn(7, 3, |i, j| y[(perm[i], j)]);
        let b = GpModel::new(kernel, 0.05, xp, yp).unwrap();
        assert!((a.log_marginal() - b.log_marginal()).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let x = random(10, 3, &mut rng);
            let y = random(10, 2, &mut rng);
            let kernel = RbfParams::new(rng.gen_range(0.5..2.0), (0..3).map(|_| rng.gen_range(0.3..3.0)).collect()).unwrap();
            let noise = rng.gen_range(0.05..0.5);
            let m = GpModel::new(kernel.clone(), noise, x.clone(), y.clone()).unwrap();
            let g = m.log_marginal_grad().to_vec();
            let fd = central_diff(
                |v| {
                    let (k, s) = unpack_log_params(v)?;
                    Ok(GpModel::new(k, s, x.clone(), y.clone())?.log_marginal())
                },
                &pack_log_params(&kernel, noise),
                1e-5,
            )
            .unwrap();
            assert!(rel_error(&g, &fd, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn predict_matches_explicit_inverse() {
        let x = DMatrix::from_column_slice(3, 1, &[-0.5, 0.1, 0.7]);
        let y = DMatrix::from_column_slice(3, 1, &[0.3, -0.2, 0.9]);
        let kernel = RbfParams::new(1.2, vec![1.5]).unwrap();
        let m = GpModel::new(kernel.clone(), 0.05, x.clone(), y.clone()).unwrap();
        let xs = DMatrix::from_column_slice(2, 1, &[0.0, 0.4]);
        let (mean, cov) = m.predict(&xs).unwrap();
        let inv = explicit_k(&x, &kernel, 0.05).try_inverse().unwrap();
        let ks = DMatrix::from_fn(3, 2, |i, j| kernel.eval(&[x[(i, 0)]], &[xs[(j, 0)]]).unwrap());
        let kss = explicit_k(&xs, &kernel, 0.0);
        let em = ks.transpose() * &inv * &y;
        let ec = kss - ks.transpose() * &inv * &ks;
        assert!((mean - em).amax() < 1e-10);
        assert!((cov - ec).amax() < 1e-10);
    }

    #[test]
    fn interpolation_and_prior_reversion() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.3, 0.6, 0.9]);
        let y = DMatrix::from_column_slice(4, 1, &[1.0, -0.5, 0.2, 0.4]);
        let kernel = RbfParams::new(1.0, vec![2.0]).unwrap();
        let m = GpModel::new(kernel, 1e-12, x.clone(), y.clone()).unwrap();
        let (mean, cov) = m.predict(&x.rows(1, 1).into_owned()).unwrap();
        assert!((mean[(0, 0)] + 0.5).abs() < 1e-6);
        assert!(cov[(0, 0)] < 1e-6);
        let far = DMatrix::from_element(1, 1, 50.0);
        let (mean, cov) = m.predict(&far).unwrap();
        assert!(mean[(0, 0)].abs() < 1e-6);
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn predictive_variance_bounded_by_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(15, 2, &mut rng);
        let y = random(15, 1, &mut rng);
        let m = GpModel::new(RbfParams::new(0.9, vec![1.0, 1.0]).unwrap(), 0.1, x, y).unwrap();
        let xs = random(20, 2, &mut rng);
        let (_, var) = m.predict_marginal(&xs).unwrap();
        assert!(var.iter().all(|v| *v >= 0.0 && *v <= 0.9 + 0.1 + 1e-10));
    }

    #[test]
    fn fit_noise_free_sine() {
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64 * 6.0);
        let y = x.map(f64::sin);
        let fit = fit(&x, &y, RbfParams::new(1.0, vec![1.0]).unwrap(), 0.1, &OptimOptions::with_iters(200)).unwrap();
        let var = y.variance();
        assert!(fit.model.noise_var < 1e-3 * var, "noise {}", fit.model.noise_var);
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn isotropic_fit_matches_tied_ard_fit_on_one_dimension() {
        let n = 25;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64 * 3.0);
        let y = x.map(|v| (2.0 * v).cos());
        let opts = OptimOptions::with_iters(150);
        let a = fit(&x, &y, RbfParams::new(1.0, vec![1.0]).unwrap(), 0.05, &opts).unwrap();
        let b = fit_isotropic(&x, &y, 1.0, 1.0, 0.05, &opts).unwrap();
        assert!((a.model.log_marginal() - b.model.log_marginal()).abs() < 1e-6);
        assert!(b.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn rescaling_targets_scales_signal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 30;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 / n as f64 * 4.0);
        let y = DMatrix::from_fn(n, 1, |i, _| (x[(i, 0)] * 1.7).sin() + 0.05 * rng.gen_range(-1.0..1.0));
        let init = RbfParams::new(1.0, vec![1.0]).unwrap();
        let opts = OptimOptions::with_iters(300);
        let a = fit(&x, &y, init.clone(), 0.01, &opts).unwrap();
        let b = fit(&x, &(&y * 2.0), init, 0.04, &opts).unwrap();
        let ratio = b.model.kernel.tau0_sq / a.model.kernel.tau0_sq;
        assert!((ratio - 4.0).abs() <= 2.0, "ratio {ratio}");
    }
}
