//! The observed-input layer: `p(h₁ | X) = N(0, K)` with `K = K_rbf(X, X) + σ₁² I`
//! and a full-covariance `q(h₁)` per latent dimension in the form
//! `S = (K⁻¹ + Λ)⁻¹`, `μ = K μ̄`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{rbf_chain, RbfGrad};
use crate::kernels::{gram_sym, symmetrize, RbfParams};
use crate::gplvm::Reparam;

/// GP mapping from observed inputs to the first hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputLayer {
    pub kernel: RbfParams,
    pub noise_var: f64,
    /// Training inputs after the model's input transform.
    pub inputs: DMatrix<f64>,
    /// One inverse lengthscale for all input dimensions.
    pub shared_lengthscale: bool,
}

impl InputLayer {
    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    /// `K_rbf(X, X)` and `K_rbf(X, X) + σ₁² I`.
    pub fn covariances(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let kx = gram_sym(&self.inputs, &self.kernel)?;
        let mut k = kx.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_var;
        }
        Ok((kx, k))
    }

    /// Number of free inverse-lengthscale parameters.
    pub fn n_lengthscales(&self) -> usize {
        if self.shared_lengthscale {
            1
        } else {
            self.inputs.ncols()
        }
    }
}

/// Marginal moments of `q(h₁)` and the KL divergence to `p(h₁ | X)`.
#[derive(Clone, Debug)]
pub struct Layer1Moments {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
    pub kl: f64,
}

struct DimFactors {
    sl: DVector<f64>,
    binv: DMatrix<f64>,
    log_det_b: f64,
}

fn factor_dim(k: &DMatrix<f64>, lambda: &[f64]) -> Result<DimFactors> {
    let n = k.nrows();
    let sl = DVector::from_iterator(n, lambda.iter().map(|l| l.sqrt()));
    let mut b = DMatrix::from_fn(n, n, |i, j| sl[i] * k[(i, j)] * sl[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    symmetrize(&mut b);
    let chol = Cholesky::new(b).ok_or(Error::SingularMatrix { max_jitter: 0.0 })?;
    let log_det_b = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut binv = chol.inverse();
    symmetrize(&mut binv);
    Ok(DimFactors { sl, binv, log_det_b })
}

/// `W = Λ^½ B⁻¹ Λ^½` where `B = I + Λ^½ K Λ^½`; then `S = K − K W K`.
fn w_matrix(f: &DimFactors) -> DMatrix<f64> {
    let n = f.binv.nrows();
    DMatrix::from_fn(n, n, |i, j| f.sl[i] * f.binv[(i, j)] * f.sl[j])
}

fn check_shapes(k: &DMatrix<f64>, rp: &Reparam) -> Result<()> {
    if rp.mu_bar.nrows() != k.nrows() {
        return Err(Error::dims("first-layer parameters vs inputs", rp.mu_bar.nrows(), k.nrows()));
    }
    if rp.lambda.shape() != rp.mu_bar.shape() {
        return Err(Error::dims("first-layer precisions vs means", rp.lambda.ncols(), rp.mu_bar.ncols()));
    }
    if rp.lambda.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::NonFinite("first-layer precisions".into()));
    }
    Ok(())
}

/// Marginals of `q(h₁)` and `KL(q(h₁) ‖ p(h₁ | X))`, given `K = K_x + σ₁² I`.
pub fn layer1_moments(k: &DMatrix<f64>, rp: &Reparam) -> Result<Layer1Moments> {
    check_shapes(k, rp)?;
    let (n, q) = rp.mu_bar.shape();
    let means = k * &rp.mu_bar;
    let mut variances = DMatrix::zeros(n, q);
    let mut kl = 0.0;
    for j in 0..q {
        let f = factor_dim(k, rp.lambda.column(j).as_slice())?;
        let kw = k * w_matrix(&f);
        for i in 0..n {
            let reduction = kw.row(i).dot(&k.column(i).transpose());
            variances[(i, j)] = (k[(i, i)] - reduction).max(1e-14 * k[(i, i)]);
        }
        kl += 0.5 * (f.binv.trace() + rp.mu_bar.column(j).dot(&means.column(j)) - n as f64 + f.log_det_b);
    }
    if !kl.is_finite() {
        return Err(Error::NonFinite("first-layer KL divergence".into()));
    }
    Ok(Layer1Moments { means, variances, kl })
}

/// Gradients of `F(μ, diag S) − KL` given `∂F/∂μ` and `∂F/∂diag S`.
pub(crate) struct Layer1Grad {
    pub mu_bar: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub kernel: RbfGrad,
}

pub(crate) fn layer1_backward(
    layer: &InputLayer,
    kx: &DMatrix<f64>,
    k: &DMatrix<f64>,
    rp: &Reparam,
    g_mu: &DMatrix<f64>,
    g_s: &DMatrix<f64>,
) -> Result<Layer1Grad> {
    let (n, q) = rp.mu_bar.shape();
    let mut d_mu_bar = DMatrix::zeros(n, q);
    let mut d_lambda = DMatrix::zeros(n, q);
    let mut gk = DMatrix::zeros(n, n);
    for j in 0..q {
        let lambda = rp.lambda.column(j);
        let mu_bar = rp.mu_bar.column(j);
        let gm = g_mu.column(j);
        let gs = g_s.column(j);
        let f = factor_dim(k, lambda.as_slice())?;
        let w = w_matrix(&f);
        let kw = k * &w;
        let mut s = k - &kw * k;
        symmetrize(&mut s);

        d_mu_bar.set_column(j, &(k * (gm - mu_bar)));
        let s2 = s.component_mul(&s);
        let c = DVector::from_fn(n, |i, _| gs[i] + 0.5 * lambda[i]);
        d_lambda.set_column(j, &(-(s2 * c)));

        // (I − WK) D (I − KW)
        let mut r = -kw;
        for i in 0..n {
            r[(i, i)] += 1.0;
        }
        let dr = DMatrix::from_fn(n, n, |a, b| gs[a] * r[(a, b)]);
        gk += r.transpose() * dr;
        let u = DMatrix::from_fn(n, n, |a, b| f.sl[a] * f.binv[(a, b)]);
        gk -= (w - &u * u.transpose()) * 0.5;
        let mb = mu_bar.clone_owned();
        gk += (gm * mb.transpose() + mb * gm.transpose()) * 0.5 - (mu_bar * mu_bar.transpose()) * 0.5;
    }
    symmetrize(&mut gk);
    let kernel = rbf_chain(&layer.inputs, kx, &gk, &layer.kernel, layer.noise_var);
    Ok(Layer1Grad {
        mu_bar: d_mu_bar,
        lambda: d_lambda,
        kernel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize, q: usize) -> (InputLayer, Reparam) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let layer = InputLayer {
            kernel: RbfParams::new(1.3, vec![0.7, 1.9]).unwrap(),
            noise_var: 0.2,
            inputs,
            shared_lengthscale: false,
        };
        let rp = Reparam {
            mu_bar: DMatrix::from_fn(n, q, |_, _| rng.gen_range(-1.0..1.0)),
            lambda: DMatrix::from_fn(n, q, |_, _| rng.gen_range(0.2..3.0)),
        };
        (layer, rp)
    }

    #[test]
    fn moments_match_dense_formulas() {
        let (layer, rp) = instance(1, 6, 2);
        let (_, k) = layer.covariances().unwrap();
        let mom = layer1_moments(&k, &rp).unwrap();
        let kinv = k.clone().try_inverse().unwrap();
        let mut kl = 0.0;
        for j in 0..2 {
            let s = (&kinv + DMatrix::from_diagonal(&rp.lambda.column(j).into_owned())).try_inverse().unwrap();
            let mu = &k * rp.mu_bar.column(j);
            for i in 0..6 {
                assert!((mom.variances[(i, j)] - s[(i, i)]).abs() < 1e-12);
                assert!((mom.means[(i, j)] - mu[i]).abs() < 1e-12);
            }
            kl += 0.5 * ((&kinv * &s).trace() + (mu.transpose() * &kinv * &mu)[(0, 0)] - 6.0 + k.determinant().ln()
                - s.determinant().ln());
        }
        assert!((mom.kl - kl).abs() < 1e-10);
    }

    #[test]
    fn kl_vanishes_when_posterior_equals_prior() {
        let (layer, mut rp) = instance(2, 5, 1);
        rp.mu_bar.fill(0.0);
        rp.lambda.fill(1e-300);
        let (_, k) = layer.covariances().unwrap();
        assert!(layer1_moments(&k, &rp).unwrap().kl.abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // F = Σ a∘μ + Σ c∘s for fixed random a, c.
        let (n, q) = (7, 2);
        let (layer, rp) = instance(3, n, q);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(n, q, |_, _| rng.gen_range(-1.0..1.0));
        let c = DMatrix::from_fn(n, q, |_, _| rng.gen_range(-1.0..1.0));
        let objective = |v: &[f64]| -> Result<f64> {
            let mu_bar = DMatrix::from_column_slice(n, q, &v[..n * q]);
            let lambda = DMatrix::from_iterator(n, q, v[n * q..2 * n * q].iter().map(|x| x.exp()));
            let l = InputLayer {
                kernel: RbfParams::new(v[2 * n * q].exp(), vec![v[2 * n * q + 1].exp(), v[2 * n * q + 2].exp()])?,
                noise_var: v[2 * n * q + 3].exp(),
                ..layer.clone()
            };
            let (_, k) = l.covariances()?;
            let mom = layer1_moments(&k, &Reparam { mu_bar, lambda })?;
            Ok(a.dot(&mom.means) + c.dot(&mom.variances) - mom.kl)
        };
        let mut x = rp.mu_bar.as_slice().to_vec();
        x.extend(rp.lambda.iter().map(|l| l.ln()));
        x.extend([1.3f64.ln(), 0.7f64.ln(), 1.9f64.ln(), 0.2f64.ln()]);
        let fd = central_diff(objective, &x, 1e-5).unwrap();

        let (kx, k) = layer.covariances().unwrap();
        let g = layer1_backward(&layer, &kx, &k, &rp, &a, &c).unwrap();
        let mut an = g.mu_bar.as_slice().to_vec();
        an.extend(g.lambda.iter().zip(rp.lambda.iter()).map(|(d, l)| d * l));
        an.extend(g.kernel.to_vec());
        assert!(rel_error(&an, &fd, 1e-8) < 1e-6, "{:?}\n{:?}", an, fd);
    }
}
