//! Bayesian GP-LVM: variational latent inputs, inducing points and ARD.

pub mod bound;
pub mod stats;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ArdParams;
use crate::optim::{maximize, OptimOptions};

pub use bound::{DEFAULT_KUU_JITTER, layer_bound, layer_bound_grad, layer_posterior, optimal_qu, LayerGrad, LayerInputs, LayerPosterior};
pub use stats::{phi0, phi1, phi2, phi2_point, phi_stats, PhiStats, StatGrads, VariationalLatent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    pub inputs: DMatrix<f64>,
    /// Mean of the optimal `q(U)`, `m×ν`; empty until refreshed.
    pub out_means: DMatrix<f64>,
    /// Covariance of the optimal `q(u_j)`, identical for every output column.
    pub out_cov: DMatrix<f64>,
}

impl InducingSet {
    pub fn new(inputs: DMatrix<f64>) -> Self {
        Self {
            inputs,
            out_means: DMatrix::zeros(0, 0),
            out_cov: DMatrix::zeros(0, 0),
        }
    }

    pub fn m(&self) -> usize {
        self.inputs.nrows()
    }
}

/// Natural parameters `μ̄` and `λ` with `S = (K_h⁻¹ + Λ)⁻¹`, `μ = K_h μ̄`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reparam {
    pub mu_bar: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub kernel: ArdParams,
    pub beta: f64,
    pub latent: VariationalLatent,
    pub inducing: InducingSet,
    pub reparam: Option<Reparam>,
}

impl LayerState {
    pub fn q(&self) -> usize {
        self.kernel.dim()
    }

    pub fn inputs<'a>(&'a self, target: &'a DMatrix<f64>, target_vars: Option<&'a DMatrix<f64>>) -> LayerInputs<'a> {
        LayerInputs {
            kernel: &self.kernel,
            beta: self.beta,
            means: &self.latent.means,
            variances: &self.latent.variances,
            z: &self.inducing.inputs,
            target,
            target_vars,
            kuu_jitter: DEFAULT_KUU_JITTER,
        }
    }

    pub fn refresh_inducing_moments(&mut self, target: &DMatrix<f64>) -> Result<()> {
        let (mean, cov) = optimal_qu(&self.inputs(target, None))?;
        self.inducing.out_means = mean;
        self.inducing.out_cov = cov;
        Ok(())
    }
}

/// Standalone GP-LVM bound with a standard-normal prior on the latents.
pub fn elbo_layer(state: &LayerState, y: &DMatrix<f64>) -> Result<f64> {
    Ok(layer_bound(&state.inputs(y, None))? - state.latent.kl_standard_normal())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GplvmGrad {
    pub mu_bar: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub omega: Vec<f64>,
    pub sigma_sq: f64,
    pub beta: f64,
}

/// Gradient of `elbo_layer` in the `(μ̄, λ)` parameterization with `K_h = I`,
/// i.e. `μ = μ̄` and `S = 1/(1 + λ)`.
pub fn elbo_grad(state: &LayerState, y: &DMatrix<f64>) -> Result<(f64, GplvmGrad)> {
    let rp = state
        .reparam
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("layer has no (mu_bar, lambda) parameters".into()))?;
    let (f, g) = layer_bound_grad(&state.inputs(y, None))?;
    let value = f - state.latent.kl_standard_normal();
    let s = &state.latent.variances;
    let d_mu = &g.stats.means - &state.latent.means;
    let d_lambda = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        let si = s[(i, j)];
        -si * si * (g.stats.variances[(i, j)] + 0.5 * rp.lambda[(i, j)])
    });
    let out = GplvmGrad {
        mu_bar: d_mu,
        lambda: d_lambda,
        z: g.stats.z,
        omega: g.stats.omega,
        sigma_sq: g.stats.sigma_sq,
        beta: g.beta,
    };
    let blocks: [(&str, &[f64]); 6] = [
        ("mu_bar", out.mu_bar.as_slice()),
        ("lambda", out.lambda.as_slice()),
        ("inducing inputs", out.z.as_slice()),
        ("ARD weights", &out.omega),
        ("signal variance", std::slice::from_ref(&out.sigma_sq)),
        ("noise precision", std::slice::from_ref(&out.beta)),
    ];
    if let Some((name, _)) = blocks.iter().find(|(_, b)| b.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient block {name}")));
    }
    Ok((value, out))
}

/// Block sizes of the packed GP-LVM parameter vector.
pub fn packed_blocks(n: usize, q: usize, m: usize) -> [usize; 6] {
    [n * q, n * q, m * q, q, 1, 1]
}

/// `[μ̄, log λ, Z, log ω, log σ_h², log β]`, matrices column-major.
pub fn pack(state: &LayerState) -> Result<Vec<f64>> {
    let rp = state
        .reparam
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("layer has no (mu_bar, lambda) parameters".into()))?;
    let mut v = rp.mu_bar.as_slice().to_vec();
    v.extend(rp.lambda.iter().map(|l| l.ln()));
    v.extend_from_slice(state.inducing.inputs.as_slice());
    v.extend(state.kernel.weights.iter().map(|w| w.ln()));
    v.push(state.kernel.sigma_h_sq.ln());
    v.push(state.beta.ln());
    Ok(v)
}

pub fn unpack(v: &[f64], n: usize, q: usize, m: usize) -> Result<LayerState> {
    let b = packed_blocks(n, q, m);
    if v.len() != b.iter().sum::<usize>() {
        return Err(Error::dims("packed GP-LVM parameters", v.len(), b.iter().sum()));
    }
    let mut off = 0;
    let mut take = |len: usize| {
        let s = &v[off..off + len];
        off += len;
        s
    };
    let mu_bar = DMatrix::from_column_slice(n, q, take(b[0]));
    let lambda = DMatrix::from_iterator(n, q, take(b[1]).iter().map(|x| x.exp()));
    let z = DMatrix::from_column_slice(m, q, take(b[2]));
    let weights: Vec<f64> = take(b[3]).iter().map(|x| x.exp()).collect();
    let sigma_h_sq = take(1)[0].exp();
    let beta = take(1)[0].exp();
    let variances = lambda.map(|l| 1.0 / (1.0 + l));
    if variances.iter().any(|s| !(*s > 0.0)) || lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("latent precision parameters".into()));
    }
    Ok(LayerState {
        kernel: ArdParams::new(sigma_h_sq, weights)?,
        beta,
        latent: VariationalLatent::new(mu_bar.clone(), variances)?,
        inducing: InducingSet::new(z),
        reparam: Some(Reparam { mu_bar, lambda }),
    })
}

fn packed_grad(state: &LayerState, g: &GplvmGrad) -> Vec<f64> {
    let rp = state.reparam.as_ref().expect("packed state carries reparam");
    let mut v = g.mu_bar.as_slice().to_vec();
    v.extend(g.lambda.iter().zip(rp.lambda.iter()).map(|(d, l)| d * l));
    v.extend_from_slice(g.z.as_slice());
    v.extend(g.omega.iter().zip(&state.kernel.weights).map(|(d, w)| d * w));
    v.push(g.sigma_sq * state.kernel.sigma_h_sq);
    v.push(g.beta * state.beta);
    v
}

/// Objective and gradient in packed coordinates.
pub fn packed_objective(v: &[f64], y: &DMatrix<f64>, q: usize, m: usize) -> Result<(f64, Vec<f64>)> {
    let state = unpack(v, y.nrows(), q, m)?;
    let (f, g) = elbo_grad(&state, y)?;
    Ok((f, packed_grad(&state, &g)))
}

/// Principal-component scores of `Y` in `q` dimensions, scaled so the leading
/// component has unit variance. Each component's sign is fixed so its
/// largest-magnitude score is positive.
pub fn pca(y: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
    let (n, nu) = y.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two rows".into()));
    }
    let mut yc = y.clone();
    for mut col in yc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let mut scores = DMatrix::zeros(n, q);
    if n <= nu {
        let g = &yc * yc.transpose();
        let eig = SymmetricEigen::try_new(g, 1e-14, 10_000).ok_or_else(|| Error::Eigen("PCA Gram matrix".into()))?;
        let order = descending(eig.eigenvalues.as_slice());
        for (c, &k) in order.iter().take(q).enumerate() {
            let s = eig.eigenvalues[k].max(0.0).sqrt();
            scores.set_column(c, &(eig.eigenvectors.column(k) * s));
        }
    } else {
        let c = yc.transpose() * &yc;
        let eig = SymmetricEigen::try_new(c, 1e-14, 10_000).ok_or_else(|| Error::Eigen("PCA covariance".into()))?;
        let order = descending(eig.eigenvalues.as_slice());
        for (col, &k) in order.iter().take(q).enumerate() {
            scores.set_column(col, &(&yc * eig.eigenvectors.column(k)));
        }
    }
    for mut col in scores.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    let lead = scores.column(0).variance().sqrt();
    if !(lead > 0.0) {
        return Err(Error::Degenerate("data has zero variance".into()));
    }
    scores /= lead;
    Ok(scores)
}

fn descending(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*b].total_cmp(&v[*a]).then(a.cmp(b)));
    idx
}

/// Rows of `means` picked uniformly without replacement.
pub fn pick_inducing(means: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = means.nrows();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("inducing count must be in 1..={n}, got {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = sample(&mut rng, n, m).into_vec();
    rows.sort_unstable();
    Ok(DMatrix::from_fn(m, means.ncols(), |k, j| means[(rows[k], j)]))
}

pub fn data_variance(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    y.column_iter().map(|c| c.variance()).sum::<f64>() / y.ncols() as f64 * n / n.max(1.0)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GplvmOptions {
    pub q: usize,
    pub m: usize,
    pub optim: OptimOptions,
    pub seed: u64,
    pub init_variance: f64,
}

impl GplvmOptions {
    pub fn new(q: usize, m: usize, iters: usize, seed: u64) -> Self {
        Self {
            q,
            m,
            optim: OptimOptions::with_iters(iters),
            seed,
            init_variance: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GplvmFit {
    pub state: LayerState,
    pub trace: Vec<f64>,
}

/// PCA-initialized layer state before optimization.
pub fn init_layer(y: &DMatrix<f64>, q: usize, m: usize, init_variance: f64, seed: u64) -> Result<LayerState> {
    let nu = y.ncols();
    if q == 0 || q >= nu {
        return Err(Error::InvalidArgument(format!("latent dimension must satisfy 1 <= q < {nu}, got {q}")));
    }
    init_layer_any(y, q, m, init_variance, seed)
}

/// As [`init_layer`] but allows `q >= ν`. Latent columns that PCA leaves
/// empty are filled with small seeded noise so ARD can still rank them.
pub(crate) fn init_layer_any(y: &DMatrix<f64>, q: usize, m: usize, init_variance: f64, seed: u64) -> Result<LayerState> {
    let n = y.nrows();
    if q == 0 {
        return Err(Error::InvalidArgument("latent dimension must be positive".into()));
    }
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("inducing count must be in 1..={n}, got {m}")));
    }
    let var = data_variance(y);
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Degenerate("targets have zero variance".into()));
    }
    let mut mu = pca(y, q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    for mut col in mu.column_iter_mut() {
        if col.norm_squared() < 1e-12 * n as f64 {
            col.iter_mut().for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let z = pick_inducing(&mu, m, seed)?;
    let lambda = DMatrix::from_element(n, q, 1.0 / init_variance - 1.0);
    let variances = lambda.map(|l| 1.0 / (1.0 + l));
    Ok(LayerState {
        kernel: ArdParams::new(var, vec![1.0; q])?,
        beta: 100.0 / var,
        latent: VariationalLatent::new(mu.clone(), variances)?,
        inducing: InducingSet::new(z),
        reparam: Some(Reparam { mu_bar: mu, lambda }),
    })
}

pub fn train_gplvm(y: &DMatrix<f64>, opts: &GplvmOptions) -> Result<GplvmFit> {
    let nu = y.ncols();
    if opts.q == 0 || opts.q >= nu {
        return Err(Error::InvalidArgument(format!("latent dimension must satisfy 1 <= q < {nu}, got {}", opts.q)));
    }
    train_layer(y, opts)
}

/// [`train_gplvm`] without the `q < ν` restriction, for stacking hidden layers.
pub(crate) fn train_layer(y: &DMatrix<f64>, opts: &GplvmOptions) -> Result<GplvmFit> {
    if !(opts.init_variance > 0.0 && opts.init_variance < 1.0) {
        return Err(Error::InvalidArgument("initial latent variance must lie in (0, 1)".into()));
    }
    let init = init_layer_any(y, opts.q, opts.m, opts.init_variance, opts.seed)?;
    let (n, q, m) = (y.nrows(), opts.q, opts.m);
    let res = maximize(|v| packed_objective(v, y, q, m), pack(&init)?, &opts.optim)?;
    let mut state = unpack(&res.x, n, q, m)?;
    state.refresh_inducing_moments(y)?;
    Ok(GplvmFit { state, trace: res.trace })
}

/// Indices `k` with `ω_k ≥ threshold_frac · max ω`, ascending.
pub fn effective_dims(kernel: &ArdParams, threshold_frac: f64) -> Result<Vec<usize>> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0,1), got {threshold_frac}")));
    }
    let max = kernel.weights.iter().fold(0.0f64, |a, w| a.max(*w));
    if !(max > 0.0) {
        return Err(Error::Degenerate("all ARD weights are zero".into()));
    }
    Ok(kernel
        .weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w >= threshold_frac * max)
        .map(|(k, _)| k)
        .collect())
}
