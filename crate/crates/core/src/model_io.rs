//! Model files: a JSON document with scalar parameters and metadata, plus one
//! matrix container per array stored next to it.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::deepgp::{DeepGpModel, InputLayer, Standardizer, TrainingMeta};
use crate::error::{Error, Result};
use crate::gplvm::{InducingSet, LayerState, Reparam, VariationalLatent};
use crate::kernels::{ArdParams, RbfParams};
use crate::matrix::MatrixContainer;

pub const FORMAT_VERSION: u32 = 1;

/// A matrix stored in a sibling container file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRef {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InputLayerRecord {
    tau0_sq: f64,
    lengthscale_inv: Vec<f64>,
    noise_var: f64,
    shared_lengthscale: bool,
    inputs: ArrayRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    dim: usize,
    sigma_h_sq: f64,
    ard_weights: Vec<f64>,
    beta: f64,
    latent_means: ArrayRef,
    latent_variances: ArrayRef,
    inducing_inputs: ArrayRef,
    inducing_out_means: ArrayRef,
    inducing_out_cov: ArrayRef,
    mu_bar: Option<ArrayRef>,
    lambda: Option<ArrayRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingRecord {
    #[serde(flatten)]
    meta: TrainingMeta,
    final_elbo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    library_version: String,
    dims: Vec<usize>,
    input_layer: InputLayerRecord,
    layers: Vec<LayerRecord>,
    targets: ArrayRef,
    x_transform: Standardizer,
    y_transform: Standardizer,
    training: TrainingRecord,
}

struct Writer<'a> {
    dir: &'a Path,
    stem: &'a str,
}

impl Writer<'_> {
    fn put(&self, name: &str, m: &DMatrix<f64>) -> Result<ArrayRef> {
        let file = format!("{}.{name}.dgpm", self.stem);
        MatrixContainer::from_dmatrix(m).save(self.dir.join(&file))?;
        Ok(ArrayRef {
            file,
            rows: m.nrows(),
            cols: m.ncols(),
        })
    }
}

fn get(dir: &Path, r: &ArrayRef) -> Result<DMatrix<f64>> {
    if r.file.contains('/') || r.file.contains('\\') || r.file.starts_with("..") {
        return Err(Error::Format(format!("array reference {:?} must be a sibling file name", r.file)));
    }
    let c = MatrixContainer::load(dir.join(&r.file))?;
    if (c.rows(), c.cols()) != (r.rows, r.cols) {
        return Err(Error::Format(format!(
            "{} holds {}×{}, model file says {}×{}",
            r.file,
            c.rows(),
            c.cols(),
            r.rows,
            r.cols
        )));
    }
    Ok(c.to_dmatrix())
}

fn split(path: &Path) -> Result<(PathBuf, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("model path {} has no file name", path.display())))?;
    let dir = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok((dir, stem.to_string()))
}

/// Writes `path` and its sibling array files. Returns the paths written.
pub fn save_model(model: &DeepGpModel, path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    model.validate()?;
    let path = path.as_ref();
    let (dir, stem) = split(path)?;
    let w = Writer { dir: &dir, stem: &stem };
    let il = &model.input_layer;
    let input_layer = InputLayerRecord {
        tau0_sq: il.kernel.tau0_sq,
        lengthscale_inv: il.kernel.lengthscale_inv.clone(),
        noise_var: il.noise_var,
        shared_lengthscale: il.shared_lengthscale,
        inputs: w.put("inputs", &il.inputs)?,
    };
    let layers = model
        .hidden_layers
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let p = format!("layer{}", l + 1);
            Ok(LayerRecord {
                dim: s.q(),
                sigma_h_sq: s.kernel.sigma_h_sq,
                ard_weights: s.kernel.weights.clone(),
                beta: s.beta,
                latent_means: w.put(&format!("{p}.latent_means"), &s.latent.means)?,
                latent_variances: w.put(&format!("{p}.latent_variances"), &s.latent.variances)?,
                inducing_inputs: w.put(&format!("{p}.inducing_inputs"), &s.inducing.inputs)?,
                inducing_out_means: w.put(&format!("{p}.inducing_out_means"), &s.inducing.out_means)?,
                inducing_out_cov: w.put(&format!("{p}.inducing_out_cov"), &s.inducing.out_cov)?,
                mu_bar: s.reparam.as_ref().map(|r| w.put(&format!("{p}.mu_bar"), &r.mu_bar)).transpose()?,
                lambda: s.reparam.as_ref().map(|r| w.put(&format!("{p}.lambda"), &r.lambda)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = ModelFile {
        format_version: FORMAT_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        dims: model.dims.clone(),
        input_layer,
        targets: w.put("targets", &model.targets)?,
        layers,
        x_transform: model.x_transform.clone(),
        y_transform: model.y_transform.clone(),
        training: TrainingRecord {
            meta: model.training_meta.clone(),
            final_elbo: model.training_meta.final_elbo(),
        },
    };
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    let mut written = vec![path.to_path_buf()];
    written.extend(doc_refs(&doc).into_iter().map(|r| dir.join(&r.file)));
    Ok(written)
}

fn doc_refs(doc: &ModelFile) -> Vec<&ArrayRef> {
    let mut refs = vec![&doc.input_layer.inputs, &doc.targets];
    for l in &doc.layers {
        refs.extend([
            &l.latent_means,
            &l.latent_variances,
            &l.inducing_inputs,
            &l.inducing_out_means,
            &l.inducing_out_cov,
        ]);
        refs.extend(l.mu_bar.iter().chain(l.lambda.iter()));
    }
    refs
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DeepGpModel> {
    let path = path.as_ref();
    let (dir, _) = split(path)?;
    let doc: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {} is not supported (expected {FORMAT_VERSION})",
            doc.format_version
        )));
    }
    let il = &doc.input_layer;
    let input_layer = InputLayer {
        kernel: RbfParams::new(il.tau0_sq, il.lengthscale_inv.clone())?,
        noise_var: il.noise_var,
        inputs: get(&dir, &il.inputs)?,
        shared_lengthscale: il.shared_lengthscale,
    };
    let hidden_layers = doc
        .layers
        .iter()
        .enumerate()
        .map(|(l, r)| {
            let reparam = match (&r.mu_bar, &r.lambda) {
                (Some(m), Some(lam)) => Some(Reparam {
                    mu_bar: get(&dir, m)?,
                    lambda: get(&dir, lam)?,
                }),
                (None, None) => None,
                _ => return Err(Error::Format(format!("layer {} stores only half of (mu_bar, lambda)", l + 1))),
            };
            Ok(LayerState {
                kernel: ArdParams::new(r.sigma_h_sq, r.ard_weights.clone())?,
                beta: r.beta,
                latent: VariationalLatent::new(get(&dir, &r.latent_means)?, get(&dir, &r.latent_variances)?)?,
                inducing: InducingSet {
                    inputs: get(&dir, &r.inducing_inputs)?,
                    out_means: get(&dir, &r.inducing_out_means)?,
                    out_cov: get(&dir, &r.inducing_out_cov)?,
                },
                reparam,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = DeepGpModel {
        input_layer,
        hidden_layers,
        dims: doc.dims,
        targets: get(&dir, &doc.targets)?,
        x_transform: doc.x_transform,
        y_transform: doc.y_transform,
        training_meta: doc.training.meta,
    };
    model.validate()?;
    Ok(model)
}
