//! Squared-exponential covariance functions and numerically safe factorization.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this input dimension the Gram matrix is assembled through a matrix product.
const GEMM_DIM_THRESHOLD: usize = 24;

/// Covariance functions of the form `s² exp(-Σ_k c_k (a_k - b_k)²)`.
pub trait Kernel {
    fn input_dim(&self) -> usize;

    fn signal_variance(&self) -> f64;

    /// Coefficients `c_k` multiplying the squared coordinate differences.
    fn exponent_weights(&self) -> Vec<f64>;

    fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let d = self.input_dim();
        if a.len() != b.len() {
            return Err(Error::dims("kernel arguments", a.len(), b.len()));
        }
        if a.len() != d {
            return Err(Error::dims("kernel argument vs parameters", a.len(), d));
        }
        let c = self.exponent_weights();
        Ok(self.signal_variance() * (-weighted_sq_dist(a, b, &c)).exp())
    }
}

fn weighted_sq_dist(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum()
}

/// Exponentiated quadratic with diagonal smoothness matrix `B`:
/// `τ₀² exp(-(x1 - x2)ᵀ B (x1 - x2))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub tau0_sq: f64,
    pub lengthscale_inv: Vec<f64>,
}

impl RbfParams {
    pub fn new(tau0_sq: f64, lengthscale_inv: Vec<f64>) -> Result<Self> {
        let p = Self {
            tau0_sq,
            lengthscale_inv,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn isotropic(tau0_sq: f64, b: f64, dim: usize) -> Result<Self> {
        Self::new(tau0_sq, vec![b; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0_sq > 0.0 && self.tau0_sq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau0_sq must be positive, got {}",
                self.tau0_sq
            )));
        }
        if self.lengthscale_inv.is_empty() {
            return Err(Error::InvalidArgument("empty lengthscale vector".into()));
        }
        if let Some(b) = self.lengthscale_inv.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "lengthscale_inv entries must be positive, got {b}"
            )));
        }
        Ok(())
    }
}

impl Kernel for RbfParams {
    fn input_dim(&self) -> usize {
        self.lengthscale_inv.len()
    }

    fn signal_variance(&self) -> f64 {
        self.tau0_sq
    }

    fn exponent_weights(&self) -> Vec<f64> {
        self.lengthscale_inv.clone()
    }
}

/// ARD exponentiated quadratic: `σ_h² exp(-½ Σ_k ω_k (h1_k - h2_k)²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArdParams {
    pub sigma_h_sq: f64,
    pub weights: Vec<f64>,
}

impl ArdParams {
    pub fn new(sigma_h_sq: f64, weights: Vec<f64>) -> Result<Self> {
        let p = Self {
            sigma_h_sq,
            weights,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_h_sq > 0.0 && self.sigma_h_sq.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma_h_sq must be positive, got {}",
                self.sigma_h_sq
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("ARD weights must be nonnegative".into()));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::InvalidArgument("at least one ARD weight must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

impl Kernel for ArdParams {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn signal_variance(&self) -> f64 {
        self.sigma_h_sq
    }

    fn exponent_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| 0.5 * w).collect()
    }
}

pub fn rbf_eval(x1: &[f64], x2: &[f64], p: &RbfParams) -> Result<f64> {
    p.eval(x1, x2)
}

pub fn ard_eval(h1: &[f64], h2: &[f64], p: &ArdParams) -> Result<f64> {
    p.eval(h1, h2)
}

/// Matrix of weighted squared distances `Σ_k c_k (a_ik - b_jk)²`.
pub fn weighted_sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &[f64]) -> Result<DMatrix<f64>> {
    let d = a.ncols();
    if b.ncols() != d {
        return Err(Error::dims("gram column counts", d, b.ncols()));
    }
    if c.len() != d {
        return Err(Error::dims("gram inputs vs kernel dimension", d, c.len()));
    }
    let (n, m) = (a.nrows(), b.nrows());
    if d <= GEMM_DIM_THRESHOLD {
        let mut out = DMatrix::zeros(n, m);
        for j in 0..m {
            for i in 0..n {
                let mut s = 0.0;
                for k in 0..d {
                    let t = a[(i, k)] - b[(j, k)];
                    s += c[k] * t * t;
                }
                out[(i, j)] = s;
            }
        }
        return Ok(out);
    }
    // ‖a‖²_c + ‖b‖²_c - 2 a C bᵀ, clamped against cancellation.
    let mut ac = a.clone();
    for (k, w) in c.iter().enumerate() {
        ac.column_mut(k).scale_mut(*w);
    }
    let na: Vec<f64> = (0..n).map(|i| a.row(i).dot(&ac.row(i))).collect();
    let nb: Vec<f64> = (0..m)
        .map(|j| (0..d).map(|k| c[k] * b[(j, k)] * b[(j, k)]).sum())
        .collect();
    let mut out = &ac * b.transpose();
    for j in 0..m {
        for i in 0..n {
            out[(i, j)] = (na[i] + nb[j] - 2.0 * out[(i, j)]).max(0.0);
        }
    }
    Ok(out)
}

/// Cross-covariance matrix with entry `(i, j) = k(row_i(a), row_j(b))`.
pub fn gram<K: Kernel + ?Sized>(a: &DMatrix<f64>, b: &DMatrix<f64>, kernel: &K) -> Result<DMatrix<f64>> {
    let mut d = weighted_sq_dists(a, b, &kernel.exponent_weights())?;
    let s = kernel.signal_variance();
    d.apply(|v| *v = s * (-*v).exp());
    Ok(d)
}

/// Symmetric Gram matrix of one input set; exactly symmetric with `s²` on the diagonal.
pub fn gram_sym<K: Kernel + ?Sized>(a: &DMatrix<f64>, kernel: &K) -> Result<DMatrix<f64>> {
    let mut g = gram(a, a, kernel)?;
    let n = g.nrows();
    let s = kernel.signal_variance();
    for i in 0..n {
        g[(i, i)] = s;
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Lower Cholesky factor of `M + jitter·I`.
#[derive(Clone, Debug)]
pub struct PsdCholesky {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl PsdCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn l_dirty(&self) -> &DMatrix<f64> {
        self.chol.l_dirty()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `(M + jitter·I)⁻¹ b`
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

pub fn default_jitter(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1);
    let mean_diag = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    1e-6 * if mean_diag > 0.0 { mean_diag } else { 1.0 }
}

/// Cholesky with escalating jitter: tries `0, base, 10·base, …, 10⁶·base` and
/// returns the factor for the first value that succeeds.
pub fn chol_psd(m: &DMatrix<f64>, base_jitter: f64) -> Result<PsdCholesky> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dims("chol_psd square matrix", n, m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix passed to chol_psd".into()));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .fold(0.0f64, |a, (i, j)| a.max((m[(i, j)] - m[(j, i)]).abs()));
    if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidArgument(format!(
            "chol_psd needs a symmetric matrix (asymmetry {asym:e})"
        )));
    }
    let ladder = std::iter::once(0.0).chain((0..=6).map(|k| base_jitter * 10f64.powi(k)));
    for jitter in ladder {
        let mut a = m.clone();
        if jitter > 0.0 {
            for i in 0..n {
                a[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(a) {
            if chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok(PsdCholesky { chol, jitter });
            }
        }
    }
    Err(Error::SingularMatrix {
        max_jitter: base_jitter * 1e6,
    })
}

/// `chol_psd` with the default jitter of `1e-6 · mean(diag)`.
pub fn chol_psd_default(m: &DMatrix<f64>) -> Result<PsdCholesky> {
    chol_psd(m, default_jitter(m))
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn rbf_examples() {
        let p = RbfParams::new(2.0, vec![1.0, 3.0]).unwrap();
        assert_eq!(rbf_eval(&[0.3, 0.7], &[0.3, 0.7], &p).unwrap(), 2.0);

        let p = RbfParams::new(1.0, vec![0.5]).unwrap();
        let v = rbf_eval(&[1.0], &[0.0], &p).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn rbf_zero_weight_direction() {
        // B = diag(0, 5) is outside RbfParams' invariant; exercise the formula directly.
        let p = RbfParams {
            tau0_sq: 1.7,
            lengthscale_inv: vec![0.0, 5.0],
        };
        assert_eq!(p.eval(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.7);
    }

    #[test]
    fn ard_examples() {
        let p = ArdParams::new(3.0, vec![1.0, 2.0]).unwrap();
        assert_eq!(ard_eval(&[0.1, -0.4], &[0.1, -0.4], &p).unwrap(), 3.0);
        let p = ArdParams::new(1.0, vec![1.0]).unwrap();
        assert!((ard_eval(&[1.0], &[0.0], &p).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let p = ArdParams::new(1.0, vec![0.0, 4.0]).unwrap();
        let a = ard_eval(&[10.0, 0.2], &[-3.0, 0.1], &p).unwrap();
        let b = ard_eval(&[0.0, 0.2], &[0.0, 0.1], &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_names_lengths() {
        let p = RbfParams::new(1.0, vec![1.0, 1.0]).unwrap();
        match rbf_eval(&[1.0, 2.0], &[1.0], &p) {
            Err(Error::DimensionMismatch { left, right, .. }) => assert_eq!((left, right), (2, 1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(rbf_eval(&[1.0], &[1.0], &p).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(RbfParams::new(0.0, vec![1.0]).is_err());
        assert!(RbfParams::new(1.0, vec![1.0, 0.0]).is_err());
        assert!(ArdParams::new(1.0, vec![0.0, 0.0]).is_err());
        assert!(ArdParams::new(1.0, vec![0.0, 1.0]).is_ok());
        assert!(ArdParams::new(1.0, vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn gram_single_row_is_signal_variance() {
        let p = RbfParams::new(2.5, vec![1.0, 1.0]).unwrap();
        let a = DMatrix::from_row_slice(1, 2, &[0.2, 0.4]);
        let g = gram(&a, &a, &p).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 2.5);
    }

    #[test]
    fn gram_matches_pairwise_oracle() {
        let a = random_matrix(4, 2, 1);
        let b = random_matrix(3, 2, 2);
        let p = RbfParams::new(1.3, vec![0.7, 2.0]).unwrap();
        let g = gram(&a, &b, &p).unwrap();
        assert_eq!(g.shape(), (4, 3));
        for i in 0..4 {
            for j in 0..3 {
                let ai: Vec<f64> = a.row(i).iter().copied().collect();
                let bj: Vec<f64> = b.row(j).iter().copied().collect();
                assert!((g[(i, j)] - rbf_eval(&ai, &bj, &p).unwrap()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wide_inputs_use_product_path_consistently() {
        let d = 64;
        let a = random_matrix(5, d, 3);
        let b = random_matrix(4, d, 4);
        let p = RbfParams::new(1.0, vec![0.01; d]).unwrap();
        let g = gram(&a, &b, &p).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let ai: Vec<f64> = a.row(i).iter().copied().collect();
                let bj: Vec<f64> = b.row(j).iter().copied().collect();
                assert!((g[(i, j)] - rbf_eval(&ai, &bj, &p).unwrap()).abs() < 1e-12);
            }
        }
        let s = gram_sym(&a, &p).unwrap();
        assert_eq!(s, s.transpose());
    }

    #[test]
    fn gram_is_symmetric() {
        let a = random_matrix(5, 3, 7);
        let p = ArdParams::new(1.0, vec![1.0, 0.5, 2.0]).unwrap();
        let g = gram(&a, &a, &p).unwrap();
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn gram_rejects_column_mismatch() {
        let p = RbfParams::new(1.0, vec![1.0, 1.0]).unwrap();
        assert!(gram(&random_matrix(2, 2, 1), &random_matrix(2, 3, 1), &p).is_err());
    }

    #[test]
    fn chol_identity_without_jitter() {
        let c = chol_psd(&DMatrix::identity(4, 4), 1e-6).unwrap();
        assert_eq!(c.jitter(), 0.0);
        assert_eq!(c.l(), DMatrix::identity(4, 4));
    }

    #[test]
    fn chol_rank_deficient_needs_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = chol_psd(&m, 1e-6).unwrap();
        assert!(c.jitter() > 0.0);
    }

    #[test]
    fn chol_reconstructs_spd() {
        let a = random_matrix(6, 6, 11);
        let m = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
        let c = chol_psd_default(&m).unwrap();
        assert_eq!(c.jitter(), 0.0);
        let l = c.l();
        let r = &l * l.transpose() - &m;
        assert!(r.norm() / m.norm() < 1e-10);
    }

    #[test]
    fn chol_rejects_asymmetric_and_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(chol_psd(&m, 1e-6).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(chol_psd(&m, 1e-6), Err(Error::SingularMatrix { .. })));
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(
            a in proptest::collection::vec(-3.0f64..3.0, 3),
            b in proptest::collection::vec(-3.0f64..3.0, 3),
            w in proptest::collection::vec(0.05f64..4.0, 3),
            s in 0.1f64..5.0,
        ) {
            let p = ArdParams::new(s, w).unwrap();
            let ab = ard_eval(&a, &b, &p).unwrap();
            let ba = ard_eval(&b, &a, &p).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab <= s);
            prop_assert!(ab >= 0.0);
            if a != b && ab > 0.0 {
                prop_assert!(ab < s || (s - ab) < 1e-15 * s);
            }
        }

        #[test]
        fn zero_weight_coordinate_is_irrelevant(
            seed in any::<u64>(),
            shift in -5.0f64..5.0,
        ) {
            let a = random_matrix(5, 3, seed);
            let mut b = a.clone();
            for i in 0..5 {
                b[(i, 1)] += shift * (i as f64 + 1.0);
            }
            let p = ArdParams::new(1.0, vec![1.0, 0.0, 2.0]).unwrap();
            let ga = gram(&a, &a, &p).unwrap();
            let gb = gram(&b, &b, &p).unwrap();
            prop_assert!((ga - gb).amax() < 1e-15);
        }

        #[test]
        fn gram_plus_jitter_factorizes(seed in any::<u64>()) {
            let a = random_matrix(8, 2, seed);
            let p = RbfParams::new(1.0, vec![0.5, 0.5]).unwrap();
            let g = gram_sym(&a, &p).unwrap();
            prop_assert!(chol_psd_default(&g).is_ok());
        }
    }
}
