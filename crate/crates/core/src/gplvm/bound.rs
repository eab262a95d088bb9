//! Collapsed variational bound of one sparse GP layer with uncertain inputs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{chol_psd_default, symmetrize, ArdParams, PsdCholesky};

use super::stats::{kuu, kuu_backprop, phi0, phi1, phi2, phi_backprop, StatGrads};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Default `K_uu` jitter, relative to the signal variance. Without it the
/// bound loses all precision once the ARD weights become small.
pub const DEFAULT_KUU_JITTER: f64 = 1e-6;

/// Inputs of one layer: `q(H)` moments, inducing inputs, targets.
#[derive(Clone, Copy, Debug)]
pub struct LayerInputs<'a> {
    pub kernel: &'a ArdParams,
    pub beta: f64,
    pub means: &'a DMatrix<f64>,
    pub variances: &'a DMatrix<f64>,
    pub z: &'a DMatrix<f64>,
    pub target: &'a DMatrix<f64>,
    /// Variances of a latent target; `None` for observed data.
    pub target_vars: Option<&'a DMatrix<f64>>,
    /// Added to the diagonal of `K_uu` as a multiple of `σ_h²`.
    pub kuu_jitter: f64,
}

#[derive(Clone, Debug)]
pub struct LayerGrad {
    pub stats: StatGrads,
    pub beta: f64,
    pub target: DMatrix<f64>,
    pub target_vars: f64,
}

/// Intermediate quantities reused by prediction.
#[derive(Clone, Debug)]
pub struct LayerPosterior {
    pub kuu_chol: PsdCholesky,
    pub a_chol: PsdCholesky,
    /// `β A⁻¹ Φ₁ᵀ Y`, so that the predictive mean is `Ψ₁ᵀ V`.
    pub v: DMatrix<f64>,
}

struct Terms {
    value: f64,
    /// `K_uu` including the relative jitter; differentiated by backprop.
    kuu_model: DMatrix<f64>,
    /// `kuu_model` plus any extra jitter the factorization needed.
    kuu: DMatrix<f64>,
    phi1: DMatrix<f64>,
    phi2: DMatrix<f64>,
    kuu_chol: PsdCholesky,
    a_chol: PsdCholesky,
    p: DMatrix<f64>,
}

fn validate(inp: &LayerInputs) -> Result<()> {
    let n = inp.means.nrows();
    if inp.target.nrows() != n {
        return Err(Error::dims("layer targets vs latent rows", inp.target.nrows(), n));
    }
    if let Some(s) = inp.target_vars {
        if s.shape() != inp.target.shape() {
            return Err(Error::dims("target variances vs targets", s.nrows(), n));
        }
    }
    if !(inp.beta > 0.0 && inp.beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise precision must be positive, got {}", inp.beta)));
    }
    if inp.z.nrows() == 0 {
        return Err(Error::InvalidArgument("need at least one inducing point".into()));
    }
    Ok(())
}

fn terms(inp: &LayerInputs) -> Result<Terms> {
    validate(inp)?;
    let (n, nu) = inp.target.shape();
    let (n_f, nu_f) = (n as f64, nu as f64);
    let beta = inp.beta;
    let y = inp.target;

    let mut kuu_model = kuu(inp.kernel, inp.z)?;
    for i in 0..kuu_model.nrows() {
        kuu_model[(i, i)] += inp.kuu_jitter * inp.kernel.sigma_h_sq;
    }
    let kuu_chol = chol_psd_default(&kuu_model)?;
    let mut kuu_m = kuu_model.clone();
    for i in 0..kuu_m.nrows() {
        kuu_m[(i, i)] += kuu_chol.jitter();
    }
    let p1 = phi1(inp.kernel, inp.means, inp.variances, inp.z)?;
    let p2 = phi2(inp.kernel, inp.means, inp.variances, inp.z)?;
    let p0 = phi0(inp.kernel, n);

    let mut a = &kuu_m + &p2 * beta;
    symmetrize(&mut a);
    let a_chol = chol_psd_default(&a)?;
    let p = p1.transpose() * y;
    let ainv_p = a_chol.solve(&p);
    let yy = y.norm_squared();
    let pap = p.dot(&ainv_p);
    let kinv_p2 = kuu_chol.solve(&p2);
    let s_out: f64 = inp.target_vars.map_or(0.0, |s| s.sum());

    let value = -0.5 * n_f * nu_f * LN_2PI + 0.5 * n_f * nu_f * beta.ln() + 0.5 * nu_f * kuu_chol.log_det()
        - 0.5 * nu_f * a_chol.log_det()
        - 0.5 * beta * yy
        + 0.5 * beta * beta * pap
        - 0.5 * nu_f * beta * p0
        + 0.5 * nu_f * beta * kinv_p2.trace()
        - 0.5 * beta * s_out;
    if !value.is_finite() {
        return Err(Error::NonFinite("layer bound".into()));
    }
    Ok(Terms {
        value,
        kuu_model,
        kuu: kuu_m,
        phi1: p1,
        phi2: p2,
        kuu_chol,
        a_chol,
        p,
    })
}

pub fn layer_bound(inp: &LayerInputs) -> Result<f64> {
    Ok(terms(inp)?.value)
}

pub fn layer_bound_grad(inp: &LayerInputs) -> Result<(f64, LayerGrad)> {
    let t = terms(inp)?;
    let (n, nu) = inp.target.shape();
    let (m, q) = inp.z.shape();
    let (n_f, nu_f) = (n as f64, nu as f64);
    let beta = inp.beta;
    let y = inp.target;

    let ainv = t.a_chol.inverse();
    let kinv = t.kuu_chol.inverse();
    let ainv_p = &ainv * &t.p;
    let mut appa = &ainv_p * ainv_p.transpose();
    symmetrize(&mut appa);
    let kinv_p2_kinv = {
        let mut v = &kinv * &t.phi2 * &kinv;
        symmetrize(&mut v);
        v
    };

    let g0 = -0.5 * nu_f * beta;
    let g1 = y * ainv_p.transpose() * (beta * beta);
    let mut g2 = &ainv * (-0.5 * nu_f * beta) - &appa * (0.5 * beta.powi(3)) + &kinv * (0.5 * nu_f * beta);
    symmetrize(&mut g2);
    let mut gk = &kinv * (0.5 * nu_f) - &ainv * (0.5 * nu_f) - &appa * (0.5 * beta * beta) - &kinv_p2_kinv * (0.5 * nu_f * beta);
    symmetrize(&mut gk);

    let s_out: f64 = inp.target_vars.map_or(0.0, |s| s.sum());
    let dbeta = 0.5 * n_f * nu_f / beta - 0.5 * nu_f * ainv.dot(&t.phi2) - 0.5 * y.norm_squared() + beta * t.p.dot(&ainv_p)
        - 0.5 * beta * beta * appa.dot(&t.phi2)
        - 0.5 * nu_f * phi0(inp.kernel, n)
        + 0.5 * nu_f * kinv.dot(&t.phi2)
        - 0.5 * s_out;
    let dy = y * (-beta) + &t.phi1 * &ainv_p * (beta * beta);

    let mut stats = StatGrads::zeros(n, m, q);
    phi_backprop(inp.kernel, inp.means, inp.variances, inp.z, &t.phi1, g0, &g1, &g2, &mut stats);
    kuu_backprop(inp.kernel, inp.z, &t.kuu_model, &gk, &mut stats);

    Ok((
        t.value,
        LayerGrad {
            stats,
            beta: dbeta,
            target: dy,
            target_vars: -0.5 * beta,
        },
    ))
}

/// Factorizations and the weight matrix used for prediction from this layer.
pub fn layer_posterior(inp: &LayerInputs) -> Result<LayerPosterior> {
    let t = terms(inp)?;
    let v = t.a_chol.solve(&t.p) * inp.beta;
    Ok(LayerPosterior {
        kuu_chol: t.kuu_chol,
        a_chol: t.a_chol,
        v,
    })
}

/// Moments of the optimal `q(u)`: mean `Kuu V` (`m×ν`) and shared covariance `Kuu A⁻¹ Kuu`.
pub fn optimal_qu(inp: &LayerInputs) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t = terms(inp)?;
    let v = t.a_chol.solve(&t.p) * inp.beta;
    let mean = &t.kuu * v;
    let mut cov = &t.kuu * t.a_chol.solve(&t.kuu);
    symmetrize(&mut cov);
    Ok((mean, cov))
}
