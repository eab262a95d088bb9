use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use dgp_core::dataset::{generate, FieldSpec, Simulator, Target};
use dgp_core::deepgp::{train_deep, DeepOptions, Predictor};
use dgp_core::error::{Error, Result};
use dgp_core::gplvm::effective_dims;
use dgp_core::matrix::MatrixContainer;
use dgp_core::model_io::{load_model, save_model};
use dgp_core::uq::{self, InputDistribution, PropagationMode, UqOptions};
use serde::{Deserialize, Serialize};

use crate::output::{
    cell_of, ensure_dir, parse_list, parse_point, put_field, put_matrix, sibling, square_side, write_csv, write_json,
    write_pdf_csv, TOOL, VERSION,
};

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 700)]
    pub n: usize,
    /// Cells per side of the solve grid.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Cells per side of the output grid.
    #[arg(long, default_value_t = 32)]
    pub out_grid: usize,
    /// Number of KLE terms.
    #[arg(long, default_value_t = 50)]
    pub kle: usize,
    /// Correlation length of the log-permeability.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    /// Standard deviation of the log-permeability.
    #[arg(long, default_value_t = 1.0)]
    pub sg: f64,
    /// Mean of the log-permeability.
    #[arg(long, default_value_t = 0.0)]
    pub mean: f64,
    /// Injection rate at the corner wells.
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    /// Side length of the well squares.
    #[arg(long, default_value_t = 0.125)]
    pub width: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl GenDataArgs {
    fn field_spec(&self) -> FieldSpec {
        FieldSpec {
            grid: self.grid,
            out_grid: self.out_grid,
            k_xi: self.kle,
            lambda: self.lambda,
            sg: self.sg,
            mean: self.mean,
            rate: self.rate,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataFiles {
    permeability: String,
    p: String,
    ux: String,
    uy: String,
}

impl DataFiles {
    fn target(&self, t: Target) -> &str {
        match t {
            Target::Pressure => &self.p,
            Target::VelocityX => &self.ux,
            Target::VelocityY => &self.uy,
        }
    }
}

#[derive(Debug, Serialize)]
struct DataManifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    flags: &'a GenDataArgs,
    n: usize,
    seed: u64,
    field: FieldSpec,
    files: DataFiles,
}

/// The parts of a dataset manifest the other commands read back.
#[derive(Debug, Deserialize)]
struct DataManifestIn {
    n: usize,
    field: FieldSpec,
    files: DataFiles,
}

fn read_data_manifest(path: &Path) -> Result<DataManifestIn> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read dataset manifest {}: {e}", path.display())))?;
    let m: DataManifestIn = serde_json::from_str(&text)?;
    m.field.validate()?;
    Ok(m)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::InvalidArgument("--n must be positive".into()));
    }
    let spec = a.field_spec();
    let sim = Simulator::new(&spec)?;
    let data = generate(&sim, a.n, a.seed)?;
    ensure_dir(&a.out)?;
    let files = DataFiles {
        permeability: put_matrix(&a.out, "K", &data.permeability)?,
        p: put_matrix(&a.out, "p", &data.pressure)?,
        ux: put_matrix(&a.out, "ux", &data.vel_x)?,
        uy: put_matrix(&a.out, "uy", &data.vel_y)?,
    };
    write_json(
        &a.out.join("manifest.json"),
        &DataManifest {
            tool: TOOL,
            version: VERSION,
            command: "gen-data",
            flags: a,
            n: a.n,
            seed: a.seed,
            field: spec,
            files,
        },
    )
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum TargetArg {
    P,
    Ux,
    Uy,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::P => Target::Pressure,
            TargetArg::Ux => Target::VelocityX,
            TargetArg::Uy => Target::VelocityY,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum Lengthscales {
    /// Shared when there are at least as many input dimensions as samples.
    Auto,
    Shared,
    Ard,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub target: TargetArg,
    /// Number of hidden layers.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Latent dimension per hidden layer, comma separated.
    #[arg(long, default_value = "30,30")]
    pub dims: String,
    /// Inducing points per hidden layer, comma separated.
    #[arg(long, default_value = "50,50")]
    pub inducing: String,
    /// Optimizer iterations for every stage.
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Overrides --iters for the layer-wise initialization.
    #[arg(long)]
    pub init_iters: Option<usize>,
    /// Overrides --iters for the input GP fit.
    #[arg(long)]
    pub gp_iters: Option<usize>,
    /// Overrides --iters for the joint refinement.
    #[arg(long)]
    pub joint_iters: Option<usize>,
    /// Train on the first N samples only.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Use the permeability itself rather than its logarithm as input.
    #[arg(long)]
    pub raw_inputs: bool,
    #[arg(long, value_enum, default_value_t = Lengthscales::Auto)]
    pub lengthscales: Lengthscales,
    /// Keep the input GP fixed after initialization.
    #[arg(long)]
    pub fix_input_layer: bool,
    /// ARD weights at or above this fraction of the largest count as retained.
    #[arg(long, default_value_t = 0.1)]
    pub ard_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file to write (JSON); arrays go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct LayerSummary {
    layer: usize,
    ard_weights: Vec<f64>,
    retained: Vec<usize>,
    /// Largest over smallest ARD weight.
    decay_ratio: f64,
}

#[derive(Debug, Serialize)]
struct TrainManifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    flags: &'a TrainArgs,
    n_train: usize,
    input_dim: usize,
    output_dim: usize,
    final_elbo: Option<f64>,
    layers: Vec<LayerSummary>,
    files: Vec<String>,
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .filter_map(|p| p.file_name().and_then(|s| s.to_str()).map(str::to_string))
        .collect()
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let dims = parse_list(&a.dims).map_err(Error::InvalidArgument)?;
    let inducing = parse_list(&a.inducing).map_err(Error::InvalidArgument)?;
    if dims.len() != a.layers || inducing.len() != a.layers {
        return Err(Error::InvalidArgument(format!(
            "--layers {} needs that many --dims and --inducing entries",
            a.layers
        )));
    }
    let manifest = read_data_manifest(&a.data.join("manifest.json"))?;
    let target = Target::from(a.target);
    let mut x = MatrixContainer::load(a.data.join(&manifest.files.permeability))?.to_dmatrix();
    let mut y = MatrixContainer::load(a.data.join(manifest.files.target(target)))?.to_dmatrix();
    if x.nrows() != y.nrows() {
        return Err(Error::InvalidArgument(format!("dataset has {} inputs but {} outputs", x.nrows(), y.nrows())));
    }
    if let Some(n) = a.n_train {
        if n < 2 || n > x.nrows() {
            return Err(Error::InvalidArgument(format!("--n-train must lie in 2..={}", x.nrows())));
        }
        x = x.rows(0, n).into_owned();
        y = y.rows(0, n).into_owned();
    }
    let (n, kappa) = x.shape();
    let mut opts = DeepOptions::new(dims, inducing, a.iters, a.seed);
    opts.init_iters = a.init_iters.unwrap_or(a.iters);
    opts.gp_iters = a.gp_iters.unwrap_or(a.iters);
    opts.joint_iters = a.joint_iters.unwrap_or(a.iters);
    opts.log_inputs = !a.raw_inputs;
    opts.fix_input_layer = a.fix_input_layer;
    opts.shared_lengthscale = match a.lengthscales {
        Lengthscales::Auto => kappa >= n,
        Lengthscales::Shared => true,
        Lengthscales::Ard => false,
    };
    let model = train_deep(&x, &y, &opts)?;

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut written = save_model(&model, &a.out)?;

    let elbo = sibling(&a.out, "elbo.csv");
    write_csv(
        &elbo,
        "iteration,elbo",
        model.training_meta.elbo_trace.iter().enumerate().map(|(i, v)| format!("{i},{v}")),
    )?;
    let init = sibling(&a.out, "init_elbo.csv");
    // Initialization traces are stored deepest layer first.
    let g = model.n_layers();
    write_csv(
        &init,
        "layer,iteration,elbo",
        model
            .training_meta
            .init_traces
            .iter()
            .enumerate()
            .flat_map(|(k, t)| t.iter().enumerate().map(move |(i, v)| format!("{},{i},{v}", g - k))),
    )?;
    let mut layers = Vec::with_capacity(g);
    let mut ard_rows = Vec::new();
    for (l, s) in model.hidden_layers.iter().enumerate() {
        let w = &s.kernel.weights;
        let retained = effective_dims(&s.kernel, a.ard_threshold)?;
        let max = w.iter().copied().fold(0.0, f64::max);
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        for (k, wk) in w.iter().enumerate() {
            ard_rows.push(format!("{},{k},{wk},{},{}", l + 1, wk / max, u8::from(retained.contains(&k))));
        }
        layers.push(LayerSummary {
            layer: l + 1,
            ard_weights: w.clone(),
            retained,
            decay_ratio: max / min,
        });
    }
    let ard = sibling(&a.out, "ard.csv");
    write_csv(&ard, "layer,dim,weight,relative,retained", ard_rows)?;
    written.extend([elbo, init, ard]);
    write_json(
        &sibling(&a.out, "manifest.json"),
        &TrainManifest {
            tool: TOOL,
            version: VERSION,
            command: "train",
            flags: a,
            n_train: n,
            input_dim: kappa,
            output_dim: y.ncols(),
            final_elbo: model.training_meta.final_elbo(),
            layers,
            files: file_names(&written),
        },
    )
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Model file written by train.
    #[arg(long)]
    pub model: PathBuf,
    /// Container with one input field per row.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct PredictManifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    flags: &'a PredictArgs,
    rows: usize,
    outputs: usize,
    files: Vec<String>,
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let x = MatrixContainer::load(&a.inputs)?.to_dmatrix();
    if x.ncols() != model.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "inputs have {} columns, the model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    let (mean, var) = Predictor::new(&model)?.predict(&x)?;
    ensure_dir(&a.out)?;
    let mut files = vec![put_matrix(&a.out, "mean", &mean)?, put_matrix(&a.out, "variance", &var)?];
    if square_side(mean.ncols()).is_some() && mean.nrows() > 0 {
        let row = |m: &nalgebra::DMatrix<f64>| m.row(0).iter().copied().collect::<Vec<_>>();
        files.push(put_field(&a.out, "mean_field", &row(&mean))?);
        files.push(put_field(&a.out, "variance_field", &row(&var))?);
    }
    write_json(
        &a.out.join("manifest.json"),
        &PredictManifest {
            tool: TOOL,
            version: VERSION,
            command: "predict",
            flags: a,
            rows: mean.nrows(),
            outputs: mean.ncols(),
            files,
        },
    )
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum ModeArg {
    /// Draw every layer jointly.
    Joint,
    /// Draw the first layer only and use predictive means afterwards.
    Mean,
}

impl From<ModeArg> for PropagationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Joint => PropagationMode::JointDraw,
            ModeArg::Mean => PropagationMode::PosteriorMean,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct UqArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset manifest describing the input distribution.
    #[arg(long)]
    pub kle_manifest: PathBuf,
    /// Input samples per repeat.
    #[arg(long, default_value_t = 120)]
    pub inner: usize,
    /// Number of repeats.
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    /// Location "x,y" in the unit square for a density estimate; repeatable.
    #[arg(long, value_parser = parse_point, default_value = "0.5,0.5")]
    pub pdf_at: Vec<[f64; 2]>,
    #[arg(long, value_enum, default_value_t = ModeArg::Joint)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct PdfEntry {
    location: [f64; 2],
    cell: usize,
    file: String,
}

#[derive(Debug, Serialize)]
struct UqManifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    flags: &'a UqArgs,
    n_inner: usize,
    n_repeats: usize,
    mode: PropagationMode,
    fields: Vec<String>,
    pdfs: Vec<PdfEntry>,
}

pub fn uq(a: &UqArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = read_data_manifest(&a.kle_manifest)?;
    let spec = &data.field;
    if model.input_dim() != spec.grid * spec.grid || model.output_dim() != spec.out_grid * spec.out_grid {
        return Err(Error::InvalidArgument(format!(
            "model maps {} → {} values but the manifest describes {}² → {}² grids",
            model.input_dim(),
            model.output_dim(),
            spec.grid,
            spec.out_grid
        )));
    }
    let sim = Simulator::new(spec)?;
    let dist = InputDistribution::KleUniform(sim.kle);
    let cells: Vec<usize> = a.pdf_at.iter().map(|p| cell_of(*p, spec.out_grid)).collect();
    let opts = UqOptions {
        n_inner: a.inner,
        n_repeats: a.repeats,
        seed: a.seed,
        mode: a.mode.into(),
        pdf_cells: cells.clone(),
    };
    let report = uq::uq_report(&Predictor::new(&model)?, &dist, &opts)?;
    ensure_dir(&a.out)?;
    let fields = vec![
        put_field(&a.out, "mean_of_mean", &report.mean_of_mean)?,
        put_field(&a.out, "mean_of_variance", &report.mean_of_variance)?,
        put_field(&a.out, "errorbar_mean", &report.errorbar_mean)?,
        put_field(&a.out, "errorbar_variance", &report.errorbar_variance)?,
        put_field(&a.out, "spread_mean", &report.spread_mean)?,
        put_field(&a.out, "spread_variance", &report.spread_variance)?,
    ];
    let mut pdfs = Vec::new();
    for (k, pdf) in report.pdfs.iter().enumerate() {
        let file = format!("pdf_{k}.csv");
        write_pdf_csv(&a.out.join(&file), pdf)?;
        pdfs.push(PdfEntry {
            location: a.pdf_at[k],
            cell: cells[k],
            file,
        });
    }
    write_json(
        &a.out.join("report.json"),
        &UqManifest {
            tool: TOOL,
            version: VERSION,
            command: "uq",
            flags: a,
            n_inner: report.n_inner,
            n_repeats: report.n_repeats,
            mode: report.mode,
            fields,
            pdfs,
        },
    )
}

#[derive(Debug, Args, Serialize)]
pub struct McBaselineArgs {
    /// Dataset manifest describing the input distribution and the flow problem.
    #[arg(long)]
    pub kle_manifest: PathBuf,
    /// Number of simulator runs.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Location "x,y" in the unit square for a density estimate; repeatable.
    #[arg(long, value_parser = parse_point, default_value = "0.5,0.5")]
    pub pdf_at: Vec<[f64; 2]>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct McManifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    flags: &'a McBaselineArgs,
    n: usize,
    dataset_samples: usize,
    fields: Vec<String>,
    pdfs: Vec<PdfEntry>,
}

pub fn mc_baseline(a: &McBaselineArgs) -> Result<()> {
    let data = read_data_manifest(&a.kle_manifest)?;
    let sim = Simulator::new(&data.field)?;
    let cells: Vec<usize> = a.pdf_at.iter().map(|p| cell_of(*p, data.field.out_grid)).collect();
    let base = uq::mc_baseline(&sim, a.n, a.seed, &cells)?;
    ensure_dir(&a.out)?;
    let mut fields = Vec::new();
    let mut pdfs = Vec::new();
    for f in &base.fields {
        let t = f.target.name();
        fields.push(put_field(&a.out, &format!("{t}_mean"), &f.mean)?);
        fields.push(put_field(&a.out, &format!("{t}_variance"), &f.variance)?);
        for (k, pdf) in f.pdfs.iter().enumerate() {
            let file = format!("{t}_pdf_{k}.csv");
            write_pdf_csv(&a.out.join(&file), pdf)?;
            pdfs.push(PdfEntry {
                location: a.pdf_at[k],
                cell: cells[k],
                file,
            });
        }
    }
    write_json(
        &a.out.join("manifest.json"),
        &McManifest {
            tool: TOOL,
            version: VERSION,
            command: "mc-baseline",
            flags: a,
            n: base.n,
            dataset_samples: data.n,
            fields,
            pdfs,
        },
    )
}
