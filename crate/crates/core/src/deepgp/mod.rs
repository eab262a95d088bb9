//! Supervised deep GP: an exact GP from observed inputs to the first hidden
//! layer, followed by sparse variational layers down to the outputs.

pub mod bound;
pub mod layer1;
pub mod predict;
pub mod transform;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit, fit_isotropic};
use crate::gplvm::{data_variance, init_layer_any, pick_inducing, train_layer, GplvmOptions, InducingSet, LayerState, Reparam, VariationalLatent};
use crate::kernels::{chol_psd_default, RbfParams};
use crate::optim::{maximize, OptimOptions};

pub use bound::{joint_bound, joint_bound_grad, joint_objective, pack, packed_len, unpack, FreeBlocks};
pub use layer1::{layer1_moments, InputLayer, Layer1Moments};
pub use predict::{predict, predict_layer1, propagate, psi_stats, LayerPredictor, Predictor, PsiStats};
pub use transform::Standardizer;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub init_iters: usize,
    pub gp_iters: usize,
    pub joint_iters: usize,
    /// ELBO traces of the layer-wise GP-LVM fits, deepest layer first.
    pub init_traces: Vec<Vec<f64>>,
    /// Log marginal trace of the first-layer GP fit.
    pub gp_trace: Vec<f64>,
    /// Joint bound at initialization and after every accepted step.
    pub elbo_trace: Vec<f64>,
}

impl TrainingMeta {
    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepGpModel {
    pub input_layer: InputLayer,
    /// Layer `i` maps `h_{i+1}` to `h_{i+2}`, the last one to the outputs.
    /// Its `latent` field holds `q(h_{i+1})`.
    pub hidden_layers: Vec<LayerState>,
    pub dims: Vec<usize>,
    /// Training outputs after the output transform.
    pub targets: DMatrix<f64>,
    pub x_transform: Standardizer,
    pub y_transform: Standardizer,
    pub training_meta: TrainingMeta,
}

impl DeepGpModel {
    pub fn n_layers(&self) -> usize {
        self.hidden_layers.len()
    }

    pub fn n(&self) -> usize {
        self.targets.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_layer.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Targets of hidden layer `l`: the next layer's latent moments, or the outputs.
    pub fn layer_targets(&self, l: usize) -> (&DMatrix<f64>, Option<&DMatrix<f64>>) {
        match self.hidden_layers.get(l + 1) {
            Some(next) => (&next.latent.means, Some(&next.latent.variances)),
            None => (&self.targets, None),
        }
    }

    /// Recomputes `q(h₁)` marginals from the first layer's `(μ̄, λ)`.
    pub fn sync_first_latent(&mut self) -> Result<f64> {
        let (_, k) = self.input_layer.covariances()?;
        let rp = self.hidden_layers[0]
            .reparam
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("first hidden layer needs (mu_bar, lambda)".into()))?;
        let mom = layer1_moments(&k, rp)?;
        self.hidden_layers[0].latent = VariationalLatent::new(mom.means, mom.variances)?;
        Ok(mom.kl)
    }

    /// Stores the optimal `q(u)` moments in every layer's inducing set.
    pub fn refresh_inducing_moments(&mut self) -> Result<()> {
        for l in 0..self.n_layers() {
            let (mean, cov) = {
                let (t, tv) = self.layer_targets(l);
                crate::gplvm::optimal_qu(&self.hidden_layers[l].inputs(t, tv)).map_err(|e| e.in_layer(l + 1))?
            };
            self.hidden_layers[l].inducing.out_means = mean;
            self.hidden_layers[l].inducing.out_cov = cov;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.hidden_layers.len();
        if g == 0 || self.dims.len() != g {
            return Err(Error::dims("layer dimensions vs hidden layers", self.dims.len(), g));
        }
        let n = self.n();
        if self.input_layer.n() != n {
            return Err(Error::dims("training inputs vs targets", self.input_layer.n(), n));
        }
        for (l, layer) in self.hidden_layers.iter().enumerate() {
            if layer.q() != self.dims[l] || layer.latent.q() != self.dims[l] || layer.inducing.inputs.ncols() != self.dims[l] {
                return Err(Error::dims("hidden layer dimension", layer.q(), self.dims[l]).in_layer(l + 1));
            }
            if layer.latent.n() != n {
                return Err(Error::dims("latent rows vs data", layer.latent.n(), n).in_layer(l + 1));
            }
        }
        if self.hidden_layers[0].reparam.is_none() {
            return Err(Error::InvalidArgument("first hidden layer needs (mu_bar, lambda)".into()));
        }
        if self.x_transform.dim() != self.input_dim() || self.y_transform.dim() != self.output_dim() {
            return Err(Error::InvalidArgument("transform dimensions do not match the data".into()));
        }
        Ok(())
    }
}

/// How the first hidden layer is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentInit {
    /// Stacked GP-LVMs fitted from the outputs upwards.
    Stacked,
    /// `q(h₁)` centred on the transformed inputs; needs `dims = [κ]`.
    Inputs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeepOptions {
    pub dims: Vec<usize>,
    pub inducing: Vec<usize>,
    pub init_iters: usize,
    pub gp_iters: usize,
    pub joint_iters: usize,
    pub seed: u64,
    pub log_inputs: bool,
    pub shared_lengthscale: bool,
    pub latent_init: LatentInit,
    /// Keep the input GP and `q(h₁)` fixed during joint refinement.
    pub fix_input_layer: bool,
    pub init_variance: f64,
}

impl DeepOptions {
    pub fn new(dims: Vec<usize>, inducing: Vec<usize>, iters: usize, seed: u64) -> Self {
        Self {
            dims,
            inducing,
            init_iters: iters,
            gp_iters: iters,
            joint_iters: iters,
            seed,
            log_inputs: false,
            shared_lengthscale: false,
            latent_init: LatentInit::Stacked,
            fix_input_layer: false,
            init_variance: 0.1,
        }
    }

    fn validate(&self, n: usize, kappa: usize) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidArgument("need at least one hidden layer".into()));
        }
        if self.inducing.len() != self.dims.len() {
            return Err(Error::dims("inducing counts vs layer dimensions", self.inducing.len(), self.dims.len()));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument("layer dimensions must be positive".into()));
        }
        if let Some(m) = self.inducing.iter().find(|m| **m == 0 || **m > n) {
            return Err(Error::InvalidArgument(format!("inducing count {m} outside 1..={n}")));
        }
        if !(self.init_variance > 0.0 && self.init_variance < 1.0) {
            return Err(Error::InvalidArgument("initial latent variance must lie in (0, 1)".into()));
        }
        if self.latent_init == LatentInit::Inputs && (self.dims.len() != 1 || self.dims[0] != kappa) {
            return Err(Error::InvalidArgument("input-centred initialization needs a single layer of input dimension".into()));
        }
        Ok(())
    }
}

fn layer_seed(seed: u64, l: usize) -> u64 {
    seed.wrapping_add((l as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Layer-wise initialization followed by joint refinement of the deep bound.
pub fn train_deep(x: &DMatrix<f64>, y: &DMatrix<f64>, opts: &DeepOptions) -> Result<DeepGpModel> {
    let (n, kappa) = x.shape();
    if y.nrows() != n {
        return Err(Error::dims("inputs vs outputs", n, y.nrows()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two training points".into()));
    }
    opts.validate(n, kappa)?;
    let mut model = initialize(x, y, opts)?;
    let free = FreeBlocks {
        input_layer: !opts.fix_input_layer,
    };
    let template = model.clone();
    let x0 = pack(&model, free);
    let res = maximize(|v| joint_objective(v, &template, free), x0, &OptimOptions::with_iters(opts.joint_iters))?;
    model = unpack(&res.x, &template, free)?;
    model.training_meta.elbo_trace = res.trace;
    model.refresh_inducing_moments()?;
    Ok(model)
}

/// Stacked initialization without the joint refinement.
pub fn initialize(x: &DMatrix<f64>, y: &DMatrix<f64>, opts: &DeepOptions) -> Result<DeepGpModel> {
    let (n, kappa) = x.shape();
    opts.validate(n, kappa)?;
    let x_transform = Standardizer::fit_columns(x, opts.log_inputs)?;
    let y_transform = Standardizer::fit_global(y)?;
    let xs = x_transform.apply(x)?;
    let ys = y_transform.apply(y)?;
    let g = opts.dims.len();

    let mut meta = TrainingMeta {
        seed: opts.seed,
        init_iters: opts.init_iters,
        gp_iters: opts.gp_iters,
        joint_iters: opts.joint_iters,
        ..TrainingMeta::default()
    };
    let mut layers: Vec<LayerState> = Vec::with_capacity(g);
    match opts.latent_init {
        LatentInit::Stacked => {
            let mut target = ys.clone();
            for l in (0..g).rev() {
                let lo = GplvmOptions {
                    q: opts.dims[l],
                    m: opts.inducing[l],
                    optim: OptimOptions::with_iters(opts.init_iters),
                    seed: layer_seed(opts.seed, l),
                    init_variance: opts.init_variance,
                };
                let fit = train_layer(&target, &lo).map_err(|e| e.in_layer(l + 1))?;
                target = fit.state.latent.means.clone();
                meta.init_traces.push(fit.trace);
                layers.push(fit.state);
            }
            layers.reverse();
        }
        LatentInit::Inputs => {
            let mut state = init_layer_any(&ys, kappa, opts.inducing[0], opts.init_variance, layer_seed(opts.seed, 0))?;
            let vars = DMatrix::from_element(n, kappa, opts.init_variance);
            state.inducing = InducingSet::new(pick_inducing(&xs, opts.inducing[0], layer_seed(opts.seed, 0))?);
            state.latent = VariationalLatent::new(xs.clone(), vars)?;
            layers.push(state);
        }
    }
    for layer in layers.iter_mut().skip(1) {
        layer.reparam = None;
    }

    // Exact GP from the inputs to the first latent means.
    let mu1 = layers[0].latent.means.clone();
    let s1 = layers[0].latent.variances.clone();
    let tau0_sq = data_variance(&mu1).max(1e-6);
    let b0 = 1.0 / kappa as f64;
    let noise0 = 0.01 * tau0_sq;
    let gp_opts = OptimOptions::with_iters(opts.gp_iters);
    let gp = if opts.shared_lengthscale {
        fit_isotropic(&xs, &mu1, tau0_sq, b0, noise0, &gp_opts)?
    } else {
        fit(&xs, &mu1, RbfParams::isotropic(tau0_sq, b0, kappa)?, noise0, &gp_opts)?
    };
    meta.gp_trace = gp.trace;
    let input_layer = InputLayer {
        kernel: gp.model.kernel.clone(),
        noise_var: gp.model.noise_var,
        inputs: xs,
        shared_lengthscale: opts.shared_lengthscale,
    };
    let (_, k) = input_layer.covariances()?;
    let mu_bar = chol_psd_default(&k)?.solve(&mu1);
    let lambda = s1.map(|s| (1.0 / s).clamp(1e-6, 1e12));
    layers[0].reparam = Some(Reparam { mu_bar, lambda });

    let mut model = DeepGpModel {
        input_layer,
        hidden_layers: layers,
        dims: opts.dims.clone(),
        targets: ys,
        x_transform,
        y_transform,
        training_meta: meta,
    };
    model.sync_first_latent()?;
    model.validate()?;
    Ok(model)
}
