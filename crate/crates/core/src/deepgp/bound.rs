//! Joint variational bound of the deep GP and its packed parameterization.
//!
//! `L = Σ_l F_l − KL(q(h₁) ‖ p(h₁ | X)) + Σ_{l ≥ 2} H(q(h_l))`, where `F_l` is
//! the collapsed bound of hidden layer `l` with `q(h_l)` as inputs and
//! `q(h_{l+1})` (or the outputs) as targets.
//!
//! Packed order: the input block `[μ̄₁, log λ₁, log τ₀², log b, log σ₁²]` (when
//! free), then per hidden layer `[Z, log ω, log σ_h², log β]`, then per latent
//! layer after the first `[μ, log S]`. Matrices are column-major.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gplvm::{layer_bound, layer_bound_grad, LayerInputs, Reparam, VariationalLatent, DEFAULT_KUU_JITTER};
use crate::kernels::{ArdParams, RbfParams};

use super::layer1::{layer1_backward, layer1_moments};
use super::DeepGpModel;

/// Which parameter blocks the optimizer may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreeBlocks {
    pub input_layer: bool,
}

impl FreeBlocks {
    pub const ALL: FreeBlocks = FreeBlocks { input_layer: true };
}

fn first_reparam(model: &DeepGpModel) -> Result<&Reparam> {
    model.hidden_layers[0]
        .reparam
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("first hidden layer needs (mu_bar, lambda)".into()))
}

pub fn packed_len(model: &DeepGpModel, free: FreeBlocks) -> usize {
    let n = model.n();
    let mut len = 0;
    if free.input_layer {
        len += 2 * n * model.dims[0] + 2 + model.input_layer.n_lengthscales();
    }
    for layer in &model.hidden_layers {
        len += layer.inducing.inputs.len() + layer.q() + 2;
    }
    for layer in model.hidden_layers.iter().skip(1) {
        len += 2 * layer.latent.means.len();
    }
    len
}

pub fn pack(model: &DeepGpModel, free: FreeBlocks) -> Vec<f64> {
    let mut v = Vec::with_capacity(packed_len(model, free));
    if free.input_layer {
        let rp = first_reparam(model).expect("validated model");
        let il = &model.input_layer;
        v.extend_from_slice(rp.mu_bar.as_slice());
        v.extend(rp.lambda.iter().map(|l| l.ln()));
        v.push(il.kernel.tau0_sq.ln());
        v.extend(il.kernel.lengthscale_inv.iter().take(il.n_lengthscales()).map(|b| b.ln()));
        v.push(il.noise_var.ln());
    }
    for layer in &model.hidden_layers {
        v.extend_from_slice(layer.inducing.inputs.as_slice());
        v.extend(layer.kernel.weights.iter().map(|w| w.ln()));
        v.push(layer.kernel.sigma_h_sq.ln());
        v.push(layer.beta.ln());
    }
    for layer in model.hidden_layers.iter().skip(1) {
        v.extend_from_slice(layer.latent.means.as_slice());
        v.extend(layer.latent.variances.iter().map(|s| s.ln()));
    }
    v
}

struct Reader<'a> {
    v: &'a [f64],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> &'a [f64] {
        let s = &self.v[self.off..self.off + len];
        self.off += len;
        s
    }

    fn exp(&mut self, len: usize) -> Vec<f64> {
        self.take(len).iter().map(|x| x.exp()).collect()
    }
}

fn positive(x: f64, what: &str) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Rebuilds a model from packed parameters; blocks that are not free come from `template`.
pub fn unpack(v: &[f64], template: &DeepGpModel, free: FreeBlocks) -> Result<DeepGpModel> {
    Ok(unpack_with_kl(v, template, free)?.0)
}

fn unpack_with_kl(v: &[f64], template: &DeepGpModel, free: FreeBlocks) -> Result<(DeepGpModel, Option<f64>)> {
    let expected = packed_len(template, free);
    if v.len() != expected {
        return Err(Error::dims("packed deep GP parameters", v.len(), expected));
    }
    let mut model = template.clone();
    let mut r = Reader { v, off: 0 };
    let n = model.n();
    if free.input_layer {
        let q = model.dims[0];
        let kappa = model.input_dim();
        let mu_bar = DMatrix::from_column_slice(n, q, r.take(n * q));
        let lambda = DMatrix::from_vec(n, q, r.exp(n * q));
        let tau0_sq = positive(r.exp(1)[0], "input signal variance")?;
        let nb = model.input_layer.n_lengthscales();
        let b = r.exp(nb);
        let b = if nb == 1 { vec![b[0]; kappa] } else { b };
        model.input_layer.kernel = RbfParams::new(tau0_sq, b).map_err(|_| Error::NonFinite("input lengthscales".into()))?;
        model.input_layer.noise_var = positive(r.exp(1)[0], "input noise variance")?;
        model.hidden_layers[0].reparam = Some(Reparam { mu_bar, lambda });
    }
    for layer in model.hidden_layers.iter_mut() {
        let (m, q) = layer.inducing.inputs.shape();
        layer.inducing.inputs = DMatrix::from_column_slice(m, q, r.take(m * q));
        let weights = r.exp(q);
        let sigma = positive(r.exp(1)[0], "signal variance")?;
        layer.kernel = ArdParams::new(sigma, weights).map_err(|_| Error::NonFinite("ARD weights".into()))?;
        layer.beta = positive(r.exp(1)[0], "noise precision")?;
    }
    for layer in model.hidden_layers.iter_mut().skip(1) {
        let q = layer.q();
        let means = DMatrix::from_column_slice(n, q, r.take(n * q));
        let vars = DMatrix::from_vec(n, q, r.exp(n * q));
        if vars.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::NonFinite("latent variances".into()));
        }
        layer.latent = VariationalLatent::new(means, vars)?;
    }
    let kl = if free.input_layer {
        Some(model.sync_first_latent()?)
    } else {
        None
    };
    Ok((model, kl))
}

/// The joint bound. `q(h₁)` marginals are recomputed from `(μ̄, λ)`.
pub fn joint_bound(model: &DeepGpModel) -> Result<f64> {
    let (_, k) = model.input_layer.covariances()?;
    let mom = layer1_moments(&k, first_reparam(model)?)?;
    let mut m = model.clone();
    m.hidden_layers[0].latent = VariationalLatent::new(mom.means, mom.variances)?;
    Ok(evaluate(&m, mom.kl, None)?.0)
}

/// The joint bound and its gradient in packed coordinates.
pub fn joint_bound_grad(model: &DeepGpModel, free: FreeBlocks) -> Result<(f64, Vec<f64>)> {
    let (_, k) = model.input_layer.covariances()?;
    let mom = layer1_moments(&k, first_reparam(model)?)?;
    let mut m = model.clone();
    m.hidden_layers[0].latent = VariationalLatent::new(mom.means, mom.variances)?;
    let (f, g) = evaluate(&m, mom.kl, Some(free))?;
    Ok((f, g.expect("gradient requested")))
}

/// Objective for the optimizer: packed parameters to bound and gradient.
pub fn joint_objective(v: &[f64], template: &DeepGpModel, free: FreeBlocks) -> Result<(f64, Vec<f64>)> {
    let (model, kl) = unpack_with_kl(v, template, free)?;
    let kl = match kl {
        Some(kl) => kl,
        None => {
            let (_, k) = model.input_layer.covariances()?;
            layer1_moments(&k, first_reparam(&model)?)?.kl
        }
    };
    let (f, g) = evaluate(&model, kl, Some(free))?;
    Ok((f, g.expect("gradient requested")))
}

/// Assumes `q(h₁)` marginals in the model are consistent with `(μ̄, λ)`.
fn evaluate(model: &DeepGpModel, kl: f64, grad: Option<FreeBlocks>) -> Result<(f64, Option<Vec<f64>>)> {
    let g = model.n_layers();
    let mut value = -kl;
    let Some(free) = grad else {
        for l in 0..g {
            let layer = &model.hidden_layers[l];
            let (t, tv) = model.layer_targets(l);
            value += layer_bound(&inputs(model, l, t, tv)).map_err(|e| e.in_layer(l + 1))?;
            if l > 0 {
                value += layer.latent.entropy();
            }
        }
        return finite(value).map(|v| (v, None));
    };

    let mut g_means: Vec<DMatrix<f64>> = model.hidden_layers.iter().map(|h| DMatrix::zeros(h.latent.n(), h.q())).collect();
    let mut g_vars = g_means.clone();
    let mut hidden = Vec::with_capacity(g);
    for l in 0..g {
        let layer = &model.hidden_layers[l];
        let (t, tv) = model.layer_targets(l);
        let (f, lg) = layer_bound_grad(&inputs(model, l, t, tv)).map_err(|e| e.in_layer(l + 1))?;
        value += f;
        g_means[l] += &lg.stats.means;
        g_vars[l] += &lg.stats.variances;
        if l + 1 < g {
            g_means[l + 1] += &lg.target;
            g_vars[l + 1].add_scalar_mut(lg.target_vars);
        }
        if l > 0 {
            value += layer.latent.entropy();
            g_vars[l] += layer.latent.variances.map(|s| 0.5 / s);
        }
        hidden.push(lg);
    }
    let value = finite(value)?;

    let mut out = Vec::with_capacity(packed_len(model, free));
    if free.input_layer {
        let il = &model.input_layer;
        let rp = first_reparam(model)?;
        let (kx, k) = il.covariances()?;
        let g1 = layer1_backward(il, &kx, &k, rp, &g_means[0], &g_vars[0])?;
        out.extend_from_slice(g1.mu_bar.as_slice());
        out.extend(g1.lambda.iter().zip(rp.lambda.iter()).map(|(d, l)| d * l));
        out.push(g1.kernel.log_tau0_sq);
        if il.shared_lengthscale {
            out.push(g1.kernel.log_b.iter().sum());
        } else {
            out.extend_from_slice(&g1.kernel.log_b);
        }
        out.push(g1.kernel.log_noise_var);
    }
    for (layer, lg) in model.hidden_layers.iter().zip(&hidden) {
        out.extend_from_slice(lg.stats.z.as_slice());
        out.extend(lg.stats.omega.iter().zip(&layer.kernel.weights).map(|(d, w)| d * w));
        out.push(lg.stats.sigma_sq * layer.kernel.sigma_h_sq);
        out.push(lg.beta * layer.beta);
    }
    for l in 1..g {
        let s = &model.hidden_layers[l].latent.variances;
        out.extend_from_slice(g_means[l].as_slice());
        out.extend(g_vars[l].iter().zip(s.iter()).map(|(d, s)| d * s));
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("deep GP gradient entry {i}")));
    }
    Ok((value, Some(out)))
}

fn inputs<'a>(model: &'a DeepGpModel, l: usize, t: &'a DMatrix<f64>, tv: Option<&'a DMatrix<f64>>) -> LayerInputs<'a> {
    let layer = &model.hidden_layers[l];
    LayerInputs {
        kernel: &layer.kernel,
        beta: layer.beta,
        means: &layer.latent.means,
        variances: &layer.latent.variances,
        z: &layer.inducing.inputs,
        target: t,
        target_vars: tv,
        kuu_jitter: DEFAULT_KUU_JITTER,
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("deep GP bound".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepgp::{initialize, DeepOptions};
    use crate::gradcheck::{blockwise_rel_error, central_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_model(seed: u64) -> DeepGpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, kappa, nu) = (10, 2, 2);
        let x = DMatrix::from_fn(n, kappa, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, nu, |i, j| (x[(i, 0)] * (j + 1) as f64).sin() + 0.3 * x[(i, 1)] + 0.05 * rng.gen_range(-1.0..1.0));
        let opts = DeepOptions::new(vec![2, 2], vec![3, 3], 5, seed);
        let mut model = initialize(&x, &y, &opts).unwrap();
        // Move away from the initialization so no block sits at a stationary point.
        for layer in model.hidden_layers.iter_mut() {
            layer.inducing.inputs.iter_mut().for_each(|z| *z += rng.gen_range(-0.2..0.2));
            layer.kernel.weights.iter_mut().for_each(|w| *w *= rng.gen_range(0.7..1.4));
            layer.beta = rng.gen_range(2.0..20.0);
        }
        let v = model.hidden_layers[1].latent.variances.map(|_| rng.gen_range(0.05..0.5));
        model.hidden_layers[1].latent.variances = v;
        model.sync_first_latent().unwrap();
        model
    }

    fn block_sizes(model: &DeepGpModel) -> Vec<usize> {
        let n = model.n();
        let mut b = vec![n * model.dims[0], n * model.dims[0], 1, model.input_dim(), 1];
        for layer in &model.hidden_layers {
            b.extend([layer.inducing.inputs.len(), layer.q(), 1, 1]);
        }
        for layer in model.hidden_layers.iter().skip(1) {
            b.extend([layer.latent.means.len(), layer.latent.means.len()]);
        }
        b
    }

    #[test]
    fn pack_unpack_round_trip() {
        let model = tiny_model(1);
        let v = pack(&model, FreeBlocks::ALL);
        assert_eq!(v.len(), packed_len(&model, FreeBlocks::ALL));
        let back = unpack(&v, &model, FreeBlocks::ALL).unwrap();
        assert_eq!(pack(&back, FreeBlocks::ALL), v);
        let a = joint_bound(&model).unwrap();
        let b = joint_bound(&back).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let model = tiny_model(10 + seed);
            let v = pack(&model, FreeBlocks::ALL);
            let (f, g) = joint_objective(&v, &model, FreeBlocks::ALL).unwrap();
            assert!((f - joint_bound(&model).unwrap()).abs() < 1e-8 * f.abs().max(1.0));
            let fd = central_diff(|p| Ok(joint_objective(p, &model, FreeBlocks::ALL)?.0), &v, 1e-5).unwrap();
            let err = blockwise_rel_error(&g, &fd, &block_sizes(&model), 1e-6);
            assert!(err < 1e-4, "seed {seed}: blockwise error {err}");
        }
    }

    #[test]
    fn frozen_input_block_gradient() {
        let model = tiny_model(5);
        let free = FreeBlocks { input_layer: false };
        let v = pack(&model, free);
        let (_, g) = joint_objective(&v, &model, free).unwrap();
        let fd = central_diff(|p| Ok(joint_objective(p, &model, free)?.0), &v, 1e-5).unwrap();
        assert!(crate::gradcheck::rel_error(&g, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn entropy_matches_gaussian_formula() {
        let model = tiny_model(2);
        let lat = &model.hidden_layers[1].latent;
        // Sum over independent univariate normals of ½ log(2πe s).
        let direct: f64 = lat.variances.iter().map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s).ln()).sum();
        assert!((lat.entropy() - direct).abs() < 1e-10);
    }
}
