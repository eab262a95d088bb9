//! Moment propagation from test inputs through the layers.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::gplvm::{layer_posterior, phi1, phi2, phi2_point};
use crate::kernels::{gram, gram_sym, symmetrize, ArdParams};

use super::transform::Standardizer;
use super::DeepGpModel;

/// Test-point analogues of the `Φ` statistics. `psi1` is `m×n*`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiStats {
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

pub fn psi_stats(kernel: &ArdParams, means: &DMatrix<f64>, variances: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<PsiStats> {
    Ok(PsiStats {
        psi0: means.nrows() as f64 * kernel.sigma_h_sq,
        psi1: phi1(kernel, means, variances, z)?.transpose(),
        psi2: phi2(kernel, means, variances, z)?,
    })
}

/// Everything needed to predict from one sparse layer.
#[derive(Clone, Debug)]
pub struct LayerPredictor {
    pub kernel: ArdParams,
    pub beta: f64,
    pub z: DMatrix<f64>,
    /// `β A⁻¹ Φ₁ᵀ T`, `m×ν`.
    pub v: DMatrix<f64>,
    /// `K_uu⁻¹ − A⁻¹`.
    pub c: DMatrix<f64>,
}

impl LayerPredictor {
    pub fn new(model: &DeepGpModel, l: usize) -> Result<Self> {
        let layer = model
            .hidden_layers
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("no hidden layer {}", l + 1)))?;
        let (t, tv) = model.layer_targets(l);
        let post = layer_posterior(&layer.inputs(t, tv)).map_err(|e| e.in_layer(l + 1))?;
        let mut c = post.kuu_chol.inverse() - post.a_chol.inverse();
        symmetrize(&mut c);
        Ok(Self {
            kernel: layer.kernel.clone(),
            beta: layer.beta,
            z: layer.inducing.inputs.clone(),
            v: post.v,
            c,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.v.ncols()
    }

    /// Output mean and variance (noise included) for independent Gaussian
    /// inputs with the given means and variances, one row per point.
    pub fn propagate(&self, means: &DMatrix<f64>, variances: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if means.ncols() != self.input_dim() {
            return Err(Error::dims("propagated inputs vs layer dimension", means.ncols(), self.input_dim()));
        }
        if variances.shape() != means.shape() {
            return Err(Error::dims("propagated variances vs means", variances.nrows(), means.nrows()));
        }
        let psi1 = phi1(&self.kernel, means, variances, &self.z)?;
        let mean = &psi1 * &self.v;
        let (ns, nu) = (means.nrows(), self.output_dim());
        let rows: Vec<Result<Vec<f64>>> = (0..ns)
            .into_par_iter()
            .map(|i| {
                let mu: Vec<f64> = means.row(i).iter().copied().collect();
                let s: Vec<f64> = variances.row(i).iter().copied().collect();
                let p2 = phi2_point(&self.kernel, &mu, &s, &self.z)?;
                let base = self.kernel.sigma_h_sq - self.c.dot(&p2);
                let pv = &p2 * &self.v;
                let psi = psi1.row(i);
                Ok((0..nu)
                    .map(|j| {
                        let vj = self.v.column(j);
                        let m = psi.dot(&vj.transpose());
                        let f = vj.dot(&pv.column(j)) - m * m + base;
                        f.max(0.0) + 1.0 / self.beta
                    })
                    .collect())
            })
            .collect();
        let mut var = DMatrix::zeros(ns, nu);
        for (i, row) in rows.into_iter().enumerate() {
            for (j, v) in row?.into_iter().enumerate() {
                var[(i, j)] = v;
            }
        }
        Ok((mean, var))
    }

    /// Joint predictive of the latent function at fixed inputs: mean `n*×ν`
    /// and the `n*×n*` covariance shared by every output column.
    pub fn predict_joint(&self, h: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if h.ncols() != self.input_dim() {
            return Err(Error::dims("layer inputs vs layer dimension", h.ncols(), self.input_dim()));
        }
        let ksu = gram(h, &self.z, &self.kernel)?;
        let mean = &ksu * &self.v;
        let mut cov = gram_sym(h, &self.kernel)? - &ksu * &self.c * ksu.transpose();
        symmetrize(&mut cov);
        Ok((mean, cov))
    }
}

/// Cached predictors for the whole stack.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub layer1: GpModel,
    pub layers: Vec<LayerPredictor>,
    pub x_transform: Standardizer,
    pub y_transform: Standardizer,
}

impl Predictor {
    pub fn new(model: &DeepGpModel) -> Result<Self> {
        model.validate()?;
        let il = &model.input_layer;
        let layer1 = GpModel::new(il.kernel.clone(), il.noise_var, il.inputs.clone(), model.hidden_layers[0].latent.means.clone())?;
        let layers = (0..model.n_layers()).map(|l| LayerPredictor::new(model, l)).collect::<Result<_>>()?;
        Ok(Self {
            layer1,
            layers,
            x_transform: model.x_transform.clone(),
            y_transform: model.y_transform.clone(),
        })
    }

    /// Mean and variance of the outputs in transformed units, from transformed inputs.
    pub fn predict_transformed(&self, xs: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (mut mean, var1) = self.layer1.predict_marginal(xs)?;
        let mut var = DMatrix::from_fn(mean.nrows(), mean.ncols(), |i, _| var1[i]);
        for (l, layer) in self.layers.iter().enumerate() {
            let (m, v) = layer.propagate(&mean, &var).map_err(|e| e.in_layer(l + 1))?;
            mean = m;
            var = v;
        }
        Ok((mean, var))
    }

    /// Mean and variance of the outputs in original units.
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let xs = self.x_transform.apply(xstar)?;
        let (mean, var) = self.predict_transformed(&xs)?;
        Ok((self.y_transform.invert_mean(&mean)?, self.y_transform.invert_variance(&var)?))
    }
}

/// Predictive mean and covariance of `h₁*` at raw test inputs.
pub fn predict_layer1(model: &DeepGpModel, xstar: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let xs = model.x_transform.apply(xstar)?;
    let il = &model.input_layer;
    let gp = GpModel::new(il.kernel.clone(), il.noise_var, il.inputs.clone(), model.hidden_layers[0].latent.means.clone())?;
    gp.predict(&xs)
}

/// Moments of the outputs of hidden layer `l` given Gaussian inputs.
pub fn propagate(model: &DeepGpModel, l: usize, means: &DMatrix<f64>, variances: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    LayerPredictor::new(model, l)?.propagate(means, variances)
}

/// Output mean and variance at raw test inputs, in original units.
pub fn predict(model: &DeepGpModel, xstar: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    Predictor::new(model)?.predict(xstar)
}
