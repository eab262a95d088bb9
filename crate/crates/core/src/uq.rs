//! Monte Carlo uncertainty propagation through a trained deep GP, and the
//! plain Monte Carlo reference over the simulator.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_rng, Sample, Simulator, Target};
use crate::deepgp::Predictor;
use crate::error::{Error, Result};
use crate::random_field::{sample_xi, KLExpansion};

/// Points per density curve.
pub const PDF_POINTS: usize = 256;

/// Distribution of the model inputs.
#[derive(Clone, Debug)]
pub enum InputDistribution {
    /// Permeability fields `exp(G)` with `ξ ~ U(0,1)^k` mapped through the expansion.
    KleUniform(KLExpansion),
    /// Independent uniform coordinates in a box.
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

impl InputDistribution {
    pub fn dim(&self) -> usize {
        match self {
            InputDistribution::KleUniform(kle) => kle.grid.len(),
            InputDistribution::Uniform { lower, .. } => lower.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let InputDistribution::Uniform { lower, upper } = self {
            if lower.len() != upper.len() || lower.is_empty() {
                return Err(Error::InvalidArgument("uniform box bounds must be non-empty and of equal length".into()));
            }
            if lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
                return Err(Error::InvalidArgument("uniform box needs lower < upper".into()));
            }
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            InputDistribution::KleUniform(kle) => kle.permeability(&sample_xi(kle.k_xi(), rng)),
            InputDistribution::Uniform { lower, upper } => {
                Ok(lower.iter().zip(upper).map(|(a, b)| rng.gen_range(*a..*b)).collect())
            }
        }
    }
}

/// `n × dim` matrix of independent input draws.
pub fn sample_inputs_with<R: Rng + ?Sized>(dist: &InputDistribution, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 input samples, got {n}")));
    }
    dist.validate()?;
    let mut out = DMatrix::zeros(n, dist.dim());
    for i in 0..n {
        for (j, v) in dist.draw(rng)?.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

pub fn sample_inputs(dist: &InputDistribution, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_inputs_with(dist, n, &mut sample_rng(seed, 0))
}

/// How the hidden layers after the first are treated when propagating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropagationMode {
    /// Every layer is drawn jointly from its predictive Gaussian at the
    /// realized inputs, so each layer contributes its own randomness.
    #[default]
    JointDraw,
    /// Only the first layer is drawn; later layers use their predictive mean.
    PosteriorMean,
}

/// `F` with `F Fᵀ = cov`, from the eigendecomposition with negative
/// eigenvalues clipped. A zero covariance gives a zero factor.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predictive covariance".into()));
    }
    let eig = SymmetricEigen::try_new(cov.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Eigen("predictive covariance did not converge".into()))?;
    let mut f = eig.eigenvectors;
    for (j, mut col) in f.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[j].max(0.0).sqrt();
    }
    Ok(f)
}

fn draw<R: Rng + ?Sized>(mean: &DMatrix<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let f = psd_factor(cov)?;
    let e = DMatrix::from_fn(mean.nrows(), mean.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + f * e)
}

/// One realization of the outputs at `xprime` (raw units, `n′ × ν`).
pub fn propagate_realization_with<R: Rng + ?Sized>(
    pred: &Predictor,
    xprime: &DMatrix<f64>,
    mode: PropagationMode,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let xs = pred.x_transform.apply(xprime)?;
    let (mean, cov) = pred.layer1.predict(&xs).map_err(|e| e.in_layer(0))?;
    let mut h = draw(&mean, &cov, rng).map_err(|e| e.in_layer(0))?;
    for (l, layer) in pred.layers.iter().enumerate() {
        let (mean, cov) = layer.predict_joint(&h).map_err(|e| e.in_layer(l + 1))?;
        h = match mode {
            PropagationMode::JointDraw => draw(&mean, &cov, rng).map_err(|e| e.in_layer(l + 1))?,
            PropagationMode::PosteriorMean => mean,
        };
    }
    pred.y_transform.invert_mean(&h)
}

pub fn propagate_realization(pred: &Predictor, xprime: &DMatrix<f64>, mode: PropagationMode, seed: u64) -> Result<DMatrix<f64>> {
    propagate_realization_with(pred, xprime, mode, &mut sample_rng(seed, 0))
}

/// Column means of a realization.
pub fn mean_estimate(r: &DMatrix<f64>) -> Vec<f64> {
    let n = r.nrows() as f64;
    r.column_iter().map(|c| c.sum() / n).collect()
}

/// Column variances with the `1/n` normalization.
pub fn var_estimate(r: &DMatrix<f64>) -> Result<Vec<f64>> {
    if r.nrows() < 2 {
        return Err(Error::InvalidArgument(format!("variance needs at least 2 rows, got {}", r.nrows())));
    }
    let n = r.nrows() as f64;
    Ok(r
        .column_iter()
        .map(|c| {
            let m = c.sum() / n;
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
        })
        .collect())
}

fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    let pos = p * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// `0.9 · min(sd, IQR/1.34) · n^(-1/5)`, falling back to the standard
/// deviation alone, then to a tiny width for constant samples.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = if s.is_empty() { 0.0 } else { quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25) };
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-6 * mean.abs().max(1.0)
    }
}

/// Gaussian kernel density estimate evaluated at `at`.
pub fn kde(values: &[f64], bandwidth: f64, at: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    at.iter()
        .map(|x| {
            values
                .iter()
                .map(|v| {
                    let u = (x - v) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Evenly spaced points over the data range, widened by the larger of 10%
/// of the range and five bandwidths on each side.
pub fn pdf_abscissae(values: &[f64], bandwidth: f64, points: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = (0.1 * (hi - lo)).max(5.0 * bandwidth);
    let (a, b) = (lo - pad, hi + pad);
    let step = (b - a) / (points - 1) as f64;
    (0..points).map(|i| a + step * i as f64).collect()
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

/// Density of one output coordinate with a band of two standard deviations
/// across repeats (`lower` is clipped at zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdfCurve {
    pub cell: usize,
    pub abscissae: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl PdfCurve {
    fn single(cell: usize, values: &[f64]) -> Self {
        let bw = silverman_bandwidth(values);
        let abscissae = pdf_abscissae(values, bw, PDF_POINTS);
        let mean = kde(values, bw, &abscissae);
        Self {
            cell,
            abscissae,
            lower: mean.clone(),
            upper: mean.clone(),
            mean,
        }
    }

    /// `samples[r]` holds the values of repeat `r`.
    fn banded(cell: usize, samples: &[Vec<f64>]) -> Self {
        let bws: Vec<f64> = samples.iter().map(|s| silverman_bandwidth(s)).collect();
        let pooled: Vec<f64> = samples.iter().flatten().copied().collect();
        let abscissae = pdf_abscissae(&pooled, bws.iter().copied().fold(0.0, f64::max), PDF_POINTS);
        let curves: Vec<Vec<f64>> = samples.iter().zip(&bws).map(|(s, bw)| kde(s, *bw, &abscissae)).collect();
        let r = curves.len() as f64;
        let mut mean = vec![0.0; PDF_POINTS];
        let mut lower = vec![0.0; PDF_POINTS];
        let mut upper = vec![0.0; PDF_POINTS];
        for k in 0..PDF_POINTS {
            let m = curves.iter().map(|c| c[k]).sum::<f64>() / r;
            let sd = (curves.iter().map(|c| (c[k] - m).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
            mean[k] = m;
            lower[k] = (m - 2.0 * sd).max(0.0);
            upper[k] = m + 2.0 * sd;
        }
        Self {
            cell,
            abscissae,
            mean,
            lower,
            upper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqOptions {
    pub n_inner: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub mode: PropagationMode,
    /// Output coordinates at which densities are estimated.
    pub pdf_cells: Vec<usize>,
}

impl UqOptions {
    pub fn new(n_inner: usize, n_repeats: usize, seed: u64) -> Self {
        Self {
            n_inner,
            n_repeats,
            seed,
            mode: PropagationMode::default(),
            pdf_cells: Vec::new(),
        }
    }
}

/// Statistics over repeated surrogate realizations. Each field has one entry
/// per output coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqReport {
    pub mean_of_mean: Vec<f64>,
    pub mean_of_variance: Vec<f64>,
    /// Two standard errors of `mean_of_mean`: `2·sd/√N′` over repeats.
    pub errorbar_mean: Vec<f64>,
    pub errorbar_variance: Vec<f64>,
    /// Two standard deviations of the per-repeat estimates.
    pub spread_mean: Vec<f64>,
    pub spread_variance: Vec<f64>,
    pub n_inner: usize,
    pub n_repeats: usize,
    pub mode: PropagationMode,
    pub pdfs: Vec<PdfCurve>,
}

struct Repeat {
    mean: Vec<f64>,
    var: Vec<f64>,
    at_cells: Vec<Vec<f64>>,
}

fn mean_and_sd(rows: &[&Vec<f64>], j: usize) -> (f64, f64) {
    let r = rows.len() as f64;
    let m = rows.iter().map(|v| v[j]).sum::<f64>() / r;
    let sd = (rows.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    (m, sd)
}

/// Repeats the sample-and-propagate procedure `n_repeats` times. Repeat `r`
/// draws its inputs and function values from its own stream of `seed`, so
/// the result does not depend on the thread count.
pub fn uq_report(pred: &Predictor, dist: &InputDistribution, opts: &UqOptions) -> Result<UqReport> {
    if opts.n_repeats < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 repeats, got {}", opts.n_repeats)));
    }
    if opts.n_inner < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 inner samples, got {}", opts.n_inner)));
    }
    let nu = pred.y_transform.dim();
    if let Some(c) = opts.pdf_cells.iter().find(|c| **c >= nu) {
        return Err(Error::InvalidArgument(format!("density cell {c} outside {nu} outputs")));
    }
    let repeats: Vec<Repeat> = (0..opts.n_repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng: ChaCha8Rng = sample_rng(opts.seed, r as u64);
            let x = sample_inputs_with(dist, opts.n_inner, &mut rng)?;
            let f = propagate_realization_with(pred, &x, opts.mode, &mut rng)?;
            Ok(Repeat {
                mean: mean_estimate(&f),
                var: var_estimate(&f)?,
                at_cells: opts.pdf_cells.iter().map(|c| f.column(*c).iter().copied().collect()).collect(),
            })
        })
        .map(|r: Result<Repeat>| r)
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.in_sample(i)))
        .collect::<Result<_>>()?;

    let root_n = (opts.n_repeats as f64).sqrt();
    let means: Vec<&Vec<f64>> = repeats.iter().map(|r| &r.mean).collect();
    let vars: Vec<&Vec<f64>> = repeats.iter().map(|r| &r.var).collect();
    let mut report = UqReport {
        mean_of_mean: vec![0.0; nu],
        mean_of_variance: vec![0.0; nu],
        errorbar_mean: vec![0.0; nu],
        errorbar_variance: vec![0.0; nu],
        spread_mean: vec![0.0; nu],
        spread_variance: vec![0.0; nu],
        n_inner: opts.n_inner,
        n_repeats: opts.n_repeats,
        mode: opts.mode,
        pdfs: Vec::new(),
    };
    for j in 0..nu {
        let (m, sd) = mean_and_sd(&means, j);
        report.mean_of_mean[j] = m;
        report.spread_mean[j] = 2.0 * sd;
        report.errorbar_mean[j] = 2.0 * sd / root_n;
        let (m, sd) = mean_and_sd(&vars, j);
        report.mean_of_variance[j] = m;
        report.spread_variance[j] = 2.0 * sd;
        report.errorbar_variance[j] = 2.0 * sd / root_n;
    }
    report.pdfs = opts
        .pdf_cells
        .iter()
        .enumerate()
        .map(|(k, cell)| {
            let samples: Vec<Vec<f64>> = repeats.iter().map(|r| r.at_cells[k].clone()).collect();
            PdfCurve::banded(*cell, &samples)
        })
        .collect();
    Ok(report)
}

/// Plain Monte Carlo statistics of one simulator output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McField {
    pub target: Target,
    pub mean: Vec<f64>,
    /// `1/N` normalization.
    pub variance: Vec<f64>,
    pub pdfs: Vec<PdfCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McBaseline {
    pub n: usize,
    pub fields: Vec<McField>,
}

impl McBaseline {
    pub fn field(&self, t: Target) -> &McField {
        self.fields.iter().find(|f| f.target == t).expect("every target is present")
    }
}

const TARGETS: [Target; 3] = [Target::Pressure, Target::VelocityX, Target::VelocityY];
const MC_CHUNK: usize = 256;

/// Runs the simulator on `n` inputs drawn as in dataset generation. Samples
/// are solved in parallel chunks and accumulated in index order.
pub fn mc_baseline(sim: &Simulator, n: usize, seed: u64, pdf_cells: &[usize]) -> Result<McBaseline> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 simulator runs, got {n}")));
    }
    let nu = sim.spec.out_grid * sim.spec.out_grid;
    if let Some(c) = pdf_cells.iter().find(|c| **c >= nu) {
        return Err(Error::InvalidArgument(format!("density cell {c} outside {nu} outputs")));
    }
    let k_xi = sim.kle.k_xi();
    // Sums of `x − shift` and its square, with the first sample as shift.
    let mut shift: Option<Vec<Vec<f64>>> = None;
    let mut sum = vec![vec![0.0; nu]; 3];
    let mut sum_dev = vec![vec![0.0; nu]; 3];
    let mut sum_sq = vec![vec![0.0; nu]; 3];
    let mut at_cells = vec![vec![Vec::with_capacity(n); pdf_cells.len()]; 3];
    for start in (0..n).step_by(MC_CHUNK) {
        let end = (start + MC_CHUNK).min(n);
        let chunk: Vec<Sample> = (start..end)
            .into_par_iter()
            .map(|i| {
                let xi = sample_xi(k_xi, &mut sample_rng(seed, i as u64));
                sim.run(&xi).map_err(|e| e.in_sample(i))
            })
            .collect::<Result<_>>()?;
        for s in &chunk {
            let shift = shift.get_or_insert_with(|| TARGETS.iter().map(|t| s.field(*t).to_vec()).collect());
            for (t, target) in TARGETS.iter().enumerate() {
                let x = s.field(*target);
                for j in 0..nu {
                    sum[t][j] += x[j];
                    let d = x[j] - shift[t][j];
                    sum_dev[t][j] += d;
                    sum_sq[t][j] += d * d;
                }
                for (k, c) in pdf_cells.iter().enumerate() {
                    at_cells[t][k].push(x[*c]);
                }
            }
        }
    }
    let nf = n as f64;
    let fields = TARGETS
        .iter()
        .enumerate()
        .map(|(t, target)| McField {
            target: *target,
            mean: sum[t].iter().map(|s| s / nf).collect(),
            variance: (0..nu).map(|j| ((sum_sq[t][j] - sum_dev[t][j] * sum_dev[t][j] / nf) / nf).max(0.0)).collect(),
            pdfs: pdf_cells.iter().enumerate().map(|(k, c)| PdfCurve::single(*c, &at_cells[t][k])).collect(),
        })
        .collect();
    Ok(McBaseline { n, fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FieldSpec;
    use crate::deepgp::{train_deep, DeepOptions};
    use crate::gp::GpModel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sine_predictor(nu: usize) -> Predictor {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(0.0..1.0));
        let y = DMatrix::from_fn(n, nu, |i, j| {
            (2.0 * std::f64::consts::PI * x[(i, 0)] + j as f64).sin() + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        let model = train_deep(&x, &y, &DeepOptions::new(vec![1], vec![10], 40, 1)).unwrap();
        Predictor::new(&model).unwrap()
    }

    fn unit_box() -> InputDistribution {
        InputDistribution::Uniform {
            lower: vec![0.0],
            upper: vec![1.0],
        }
    }

    #[test]
    fn estimators_match_loops() {
        let r = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 2.0, 6.0, 4.0]);
        let m = mean_estimate(&r);
        let v = var_estimate(&r).unwrap();
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..3 {
                s += r[(i, j)];
            }
            let mean = s / 3.0;
            let mut q = 0.0;
            for i in 0..3 {
                q += (r[(i, j)] - mean) * (r[(i, j)] - mean);
            }
            assert!((m[j] - mean).abs() < 1e-12);
            assert!((v[j] - q / 3.0).abs() < 1e-12);
        }
        let two = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        assert_eq!(var_estimate(&two).unwrap(), vec![1.0]);
        assert!(var_estimate(&DMatrix::from_row_slice(1, 1, &[3.0])).is_err());
        let c = DMatrix::from_element(4, 3, 2.5);
        assert_eq!(mean_estimate(&c), vec![2.5; 3]);
        assert_eq!(var_estimate(&c).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn factor_reproduces_covariance() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        let cov = &a * a.transpose();
        let f = psd_factor(&cov).unwrap();
        assert!((&f * f.transpose() - &cov).amax() < 1e-12);
        assert_eq!(psd_factor(&DMatrix::zeros(4, 4)).unwrap(), DMatrix::zeros(4, 4));
    }

    #[test]
    fn kle_inputs_have_lognormal_mean() {
        let spec = FieldSpec {
            grid: 8,
            out_grid: 4,
            k_xi: 6,
            ..FieldSpec::default()
        };
        let sim = Simulator::new(&spec).unwrap();
        let c = sim.kle.grid.index(4, 4);
        let var = sim.kle.truncated_cov(c, c);
        let dist = InputDistribution::KleUniform(sim.kle.clone());
        let x = sample_inputs(&dist, 10_000, 3).unwrap();
        let col = x.column(c);
        let m = col.mean();
        let se = (col.variance() / 10_000.0).sqrt();
        let exact = (spec.mean + 0.5 * var).exp();
        assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact} (se {se})");
        assert_eq!(x, sample_inputs(&dist, 10_000, 3).unwrap());
    }

    #[test]
    fn realization_mean_matches_predictive_mean() {
        let pred = sine_predictor(1);
        let xt = DMatrix::from_element(1, 1, 0.3);
        let (mu, _) = pred.predict(&xt).unwrap();
        // One test point per realization, 200 independent realizations.
        let draws: Vec<f64> = (0..200)
            .map(|s| propagate_realization(&pred, &xt, PropagationMode::JointDraw, s).unwrap()[(0, 0)])
            .collect();
        let m = draws.iter().sum::<f64>() / 200.0;
        let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / 199.0).sqrt();
        assert!((m - mu[(0, 0)]).abs() < 3.0 * sd / 200f64.sqrt(), "{m} vs {}", mu[(0, 0)]);
    }

    #[test]
    fn seeds_give_distinct_realizations() {
        let pred = sine_predictor(1);
        let x = sample_inputs(&unit_box(), 10, 0).unwrap();
        let a = propagate_realization(&pred, &x, PropagationMode::JointDraw, 1).unwrap();
        let b = propagate_realization(&pred, &x, PropagationMode::JointDraw, 2).unwrap();
        assert!((a - b).norm() > 0.0);
    }

    #[test]
    fn collapsed_model_realizes_its_mean() {
        let mut pred = sine_predictor(2);
        // Scaling signal and noise together keeps the layer-1 mean and drives
        // its covariance to zero; scaling V against σ² does the same for layer 2.
        let s = 1e-20;
        let g = &pred.layer1;
        let mut k = g.kernel.clone();
        k.tau0_sq *= s;
        pred.layer1 = GpModel::new(k, g.noise_var * s, g.train_x.clone(), g.train_y.clone()).unwrap();
        for layer in &mut pred.layers {
            layer.kernel.sigma_h_sq *= s;
            layer.v /= s;
            layer.c /= s;
        }
        let x = sample_inputs(&unit_box(), 15, 4).unwrap();
        let (mu, _) = pred.predict(&x).unwrap();
        for seed in 0..3 {
            let r = propagate_realization(&pred, &x, PropagationMode::JointDraw, seed).unwrap();
            assert!((&r - &mu).amax() < 1e-6);
        }
    }

    #[test]
    fn error_bars_shrink_like_inverse_root() {
        let pred = sine_predictor(8);
        let run = |repeats| {
            let r = uq_report(&pred, &unit_box(), &UqOptions::new(20, repeats, 11)).unwrap();
            let mut e = r.errorbar_mean.clone();
            e.sort_by(f64::total_cmp);
            e[e.len() / 2]
        };
        let ratio = run(25) / run(100);
        assert!((ratio - 2.0).abs() < 0.6, "ratio {ratio}");
    }

    #[test]
    fn report_is_deterministic_and_well_formed() {
        let pred = sine_predictor(2);
        let mut opts = UqOptions::new(12, 6, 7);
        opts.pdf_cells = vec![0, 1];
        let a = uq_report(&pred, &unit_box(), &opts).unwrap();
        assert_eq!(a, uq_report(&pred, &unit_box(), &opts).unwrap());
        assert!(a.mean_of_variance.iter().chain(&a.errorbar_mean).chain(&a.errorbar_variance).all(|v| *v >= 0.0));
        for p in &a.pdfs {
            assert_eq!(p.abscissae.len(), PDF_POINTS);
            assert!((trapezoid(&p.abscissae, &p.mean) - 1.0).abs() < 1e-3);
            assert!(p.lower.iter().zip(&p.mean).zip(&p.upper).all(|((l, m), u)| 0.0 <= *l && l <= m && m <= u));
        }
        opts.n_repeats = 1;
        assert!(uq_report(&pred, &unit_box(), &opts).is_err());
    }

    #[test]
    fn baseline_mean_matches_solution_loop() {
        let spec = FieldSpec {
            grid: 8,
            out_grid: 4,
            k_xi: 5,
            ..FieldSpec::default()
        };
        let sim = Simulator::new(&spec).unwrap();
        let n = 300;
        let b = mc_baseline(&sim, n, 2, &[5]).unwrap();
        let mut sum = [0.0; 16];
        let mut rows = Vec::new();
        for i in 0..n {
            let s = sim.run(&sample_xi(5, &mut sample_rng(2, i as u64))).unwrap();
            for (a, v) in sum.iter_mut().zip(&s.pressure) {
                *a += v;
            }
            rows.push(s.pressure);
        }
        let p = b.field(Target::Pressure);
        for j in 0..16 {
            let m = sum[j] / n as f64;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
            assert!((p.mean[j] - m).abs() < 1e-12);
            assert!((p.variance[j] - v).abs() < 1e-10 * v.max(1.0));
        }
        assert!((trapezoid(&p.pdfs[0].abscissae, &p.pdfs[0].mean) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn constant_permeability_has_no_variance() {
        let spec = FieldSpec {
            grid: 8,
            out_grid: 4,
            k_xi: 3,
            sg: 1e-12,
            ..FieldSpec::default()
        };
        let b = mc_baseline(&Simulator::new(&spec).unwrap(), 4, 0, &[]).unwrap();
        for f in &b.fields {
            assert!(f.variance.iter().all(|v| *v < 1e-20));
        }
    }

    proptest! {
        #[test]
        fn densities_integrate_to_one(values in prop::collection::vec(-50.0f64..50.0, 2..60)) {
            let bw = silverman_bandwidth(&values);
            let at = pdf_abscissae(&values, bw, PDF_POINTS);
            let d = kde(&values, bw, &at);
            prop_assert!(d.iter().all(|v| *v >= 0.0));
            prop_assert!((trapezoid(&at, &d) - 1.0).abs() < 1e-3);
        }

        #[test]
        fn estimators_are_linear(scale in -5.0f64..5.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
            let m = mean_estimate(&r);
            let ms = mean_estimate(&(&r * scale));
            let v = var_estimate(&r).unwrap();
            let vs = var_estimate(&(&r * scale)).unwrap();
            for j in 0..3 {
                prop_assert!((ms[j] - scale * m[j]).abs() < 1e-12);
                prop_assert!((vs[j] - scale * scale * v[j]).abs() < 1e-12);
                prop_assert!(v[j] >= 0.0);
            }
        }
    }
}
