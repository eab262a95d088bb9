//! Expectations of ARD kernel matrices under a factorized Gaussian `q(H)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_sym, ArdParams};

/// Diagonal Gaussian moments, one row per data point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalLatent {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
}

impl VariationalLatent {
    pub fn new(means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        if means.shape() != variances.shape() {
            return Err(Error::dims("latent means vs variances rows", means.nrows(), variances.nrows()));
        }
        if variances.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("latent variances must be nonnegative".into()));
        }
        Ok(Self { means, variances })
    }

    pub fn n(&self) -> usize {
        self.means.nrows()
    }

    pub fn q(&self) -> usize {
        self.means.ncols()
    }

    /// `KL(q(H) ‖ N(0, I))`.
    pub fn kl_standard_normal(&self) -> f64 {
        let s: f64 = self
            .means
            .iter()
            .zip(self.variances.iter())
            .map(|(m, v)| m * m + v - v.ln())
            .sum();
        0.5 * s - 0.5 * (self.n() * self.q()) as f64
    }

    /// Entropy of `q(H)`.
    pub fn entropy(&self) -> f64 {
        let nq = (self.n() * self.q()) as f64;
        0.5 * nq * (1.0 + (2.0 * std::f64::consts::PI).ln()) + 0.5 * self.variances.iter().map(|v| v.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiStats {
    pub phi0: f64,
    pub phi1: DMatrix<f64>,
    pub phi2: DMatrix<f64>,
}

/// Sensitivities of a scalar objective with respect to the inputs of the statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StatGrads {
    pub means: DMatrix<f64>,
    pub variances: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub omega: Vec<f64>,
    pub sigma_sq: f64,
}

impl StatGrads {
    pub fn zeros(n: usize, m: usize, q: usize) -> Self {
        Self {
            means: DMatrix::zeros(n, q),
            variances: DMatrix::zeros(n, q),
            z: DMatrix::zeros(m, q),
            omega: vec![0.0; q],
            sigma_sq: 0.0,
        }
    }
}

fn check(kernel: &ArdParams, means: &DMatrix<f64>, variances: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    let q = kernel.dim();
    if means.ncols() != q {
        return Err(Error::dims("latent dimension vs ARD weights", means.ncols(), q));
    }
    if variances.shape() != means.shape() {
        return Err(Error::dims("latent variances vs means", variances.nrows(), means.nrows()));
    }
    if z.ncols() != q {
        return Err(Error::dims("inducing inputs vs ARD weights", z.ncols(), q));
    }
    Ok(())
}

fn rows_of(z: &DMatrix<f64>) -> Vec<f64> {
    let (m, q) = z.shape();
    let mut out = Vec::with_capacity(m * q);
    for k in 0..m {
        for j in 0..q {
            out.push(z[(k, j)]);
        }
    }
    out
}

pub fn phi0(kernel: &ArdParams, n: usize) -> f64 {
    n as f64 * kernel.sigma_h_sq
}

/// `Φ₁[i, k] = E_{q(h_i)} k(h_i, z_k)`.
pub fn phi1(kernel: &ArdParams, means: &DMatrix<f64>, variances: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check(kernel, means, variances, z)?;
    let (n, q) = means.shape();
    let m = z.nrows();
    let w = &kernel.weights;
    let ln_s = kernel.sigma_h_sq.ln();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        let a: Vec<f64> = (0..q).map(|j| w[j] * variances[(i, j)] + 1.0).collect();
        let c0 = ln_s - 0.5 * a.iter().map(|v| v.ln()).sum::<f64>();
        for k in 0..m {
            let mut s = c0;
            for j in 0..q {
                let d = means[(i, j)] - z[(k, j)];
                s -= 0.5 * w[j] * d * d / a[j];
            }
            out[(i, k)] = s.exp();
        }
    }
    Ok(out)
}

/// `E_{q(h)} k(z, h) k(h, z)ᵀ` for a single Gaussian `q(h)`; `zr` is `Z` flattened row-major.
fn phi2_point_into(kernel: &ArdParams, mu: &[f64], s: &[f64], zr: &[f64], m: usize, out: &mut DMatrix<f64>) {
    let q = mu.len();
    let w = &kernel.weights;
    let b: Vec<f64> = (0..q).map(|j| 2.0 * w[j] * s[j] + 1.0).collect();
    let c0 = 2.0 * kernel.sigma_h_sq.ln() - 0.5 * b.iter().map(|v| v.ln()).sum::<f64>();
    for k in 0..m {
        let zk = &zr[k * q..(k + 1) * q];
        for k2 in 0..=k {
            let zk2 = &zr[k2 * q..(k2 + 1) * q];
            let mut acc = c0;
            for j in 0..q {
                let dz = zk[j] - zk2[j];
                let e = mu[j] - 0.5 * (zk[j] + zk2[j]);
                acc -= w[j] * (0.25 * dz * dz + e * e / b[j]);
            }
            let v = acc.exp();
            out[(k, k2)] = v;
            out[(k2, k)] = v;
        }
    }
}

pub fn phi2_point(kernel: &ArdParams, mu: &[f64], s: &[f64], z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if mu.len() != kernel.dim() || s.len() != kernel.dim() {
        return Err(Error::dims("point moments vs ARD weights", mu.len(), kernel.dim()));
    }
    if z.ncols() != kernel.dim() {
        return Err(Error::dims("inducing inputs vs ARD weights", z.ncols(), kernel.dim()));
    }
    let m = z.nrows();
    let mut out = DMatrix::zeros(m, m);
    phi2_point_into(kernel, mu, s, &rows_of(z), m, &mut out);
    Ok(out)
}

/// `Φ₂ = Σ_i E_{q(h_i)} k(z, h_i) k(h_i, z)ᵀ`.
pub fn phi2(kernel: &ArdParams, means: &DMatrix<f64>, variances: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check(kernel, means, variances, z)?;
    let (n, q) = means.shape();
    let m = z.nrows();
    let zr = rows_of(z);
    let mut total = DMatrix::zeros(m, m);
    let mut buf = DMatrix::zeros(m, m);
    let mut mu = vec![0.0; q];
    let mut s = vec![0.0; q];
    for i in 0..n {
        for j in 0..q {
            mu[j] = means[(i, j)];
            s[j] = variances[(i, j)];
        }
        phi2_point_into(kernel, &mu, &s, &zr, m, &mut buf);
        total += &buf;
    }
    Ok(total)
}

pub fn phi_stats(kernel: &ArdParams, latent: &VariationalLatent, z: &DMatrix<f64>) -> Result<PhiStats> {
    Ok(PhiStats {
        phi0: phi0(kernel, latent.n()),
        phi1: phi1(kernel, &latent.means, &latent.variances, z)?,
        phi2: phi2(kernel, &latent.means, &latent.variances, z)?,
    })
}

/// Accumulates into `out` the gradient of `g0·φ₀ + ⟨G1, Φ₁⟩ + ⟨G2, Φ₂⟩`
/// (`G2` symmetric) with respect to the latent moments, `Z`, `ω` and `σ_h²`.
#[allow(clippy::too_many_arguments)]
pub fn phi_backprop(
    kernel: &ArdParams,
    means: &DMatrix<f64>,
    variances: &DMatrix<f64>,
    z: &DMatrix<f64>,
    phi1: &DMatrix<f64>,
    g0: f64,
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
    out: &mut StatGrads,
) {
    let (n, q) = means.shape();
    let m = z.nrows();
    let w = &kernel.weights;
    let sig = kernel.sigma_h_sq;

    out.sigma_sq += g0 * n as f64;

    // Φ₁
    for i in 0..n {
        for j in 0..q {
            let s = variances[(i, j)];
            let a = w[j] * s + 1.0;
            let mu = means[(i, j)];
            let (mut dmu, mut ds, mut dw) = (0.0, 0.0, 0.0);
            for k in 0..m {
                let t = g1[(i, k)] * phi1[(i, k)];
                if t == 0.0 {
                    continue;
                }
                let d = mu - z[(k, j)];
                dmu -= t * w[j] * d / a;
                ds += t * (-0.5 * w[j] / a + 0.5 * w[j] * w[j] * d * d / (a * a));
                dw += t * (-0.5 * s / a - 0.5 * d * d / (a * a));
                out.z[(k, j)] += t * w[j] * d / a;
            }
            out.means[(i, j)] += dmu;
            out.variances[(i, j)] += ds;
            out.omega[j] += dw;
        }
    }
    let t1: f64 = g1.iter().zip(phi1.iter()).map(|(g, p)| g * p).sum();
    out.sigma_sq += t1 / sig;

    // Φ₂
    let zr = rows_of(z);
    let mut p2 = DMatrix::zeros(m, m);
    let mut mu = vec![0.0; q];
    let mut s = vec![0.0; q];
    let mut b = vec![0.0; q];
    let mut dmu = vec![0.0; q];
    let mut ds = vec![0.0; q];
    let mut t_total = 0.0;
    for i in 0..n {
        for j in 0..q {
            mu[j] = means[(i, j)];
            s[j] = variances[(i, j)];
            b[j] = 2.0 * w[j] * s[j] + 1.0;
        }
        phi2_point_into(kernel, &mu, &s, &zr, m, &mut p2);
        dmu.iter_mut().for_each(|v| *v = 0.0);
        ds.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..m {
            for k2 in 0..=k {
                let mult = if k == k2 { 1.0 } else { 2.0 };
                let t = mult * g2[(k, k2)] * p2[(k, k2)];
                if t == 0.0 {
                    continue;
                }
                t_total += t;
                for j in 0..q {
                    let zk = zr[k * q + j];
                    let zk2 = zr[k2 * q + j];
                    let dz = zk - zk2;
                    let e = mu[j] - 0.5 * (zk + zk2);
                    let wb = w[j] / b[j];
                    dmu[j] -= t * 2.0 * wb * e;
                    ds[j] += t * (-wb + 2.0 * wb * wb * e * e);
                    out.omega[j] += t * (-s[j] / b[j] - 0.25 * dz * dz - e * e / (b[j] * b[j]));
                    out.z[(k, j)] += t * (-0.5 * w[j] * dz + wb * e);
                    out.z[(k2, j)] += t * (0.5 * w[j] * dz + wb * e);
                }
            }
        }
        for j in 0..q {
            out.means[(i, j)] += dmu[j];
            out.variances[(i, j)] += ds[j];
        }
    }
    out.sigma_sq += 2.0 * t_total / sig;
}

/// `K_uu` and the gradient of `⟨G, K_uu⟩` (`G` symmetric) with respect to `Z`, `ω`, `σ_h²`.
pub fn kuu(kernel: &ArdParams, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    gram_sym(z, kernel)
}

pub fn kuu_backprop(kernel: &ArdParams, z: &DMatrix<f64>, kuu: &DMatrix<f64>, g: &DMatrix<f64>, out: &mut StatGrads) {
    let (m, q) = z.shape();
    let w = &kernel.weights;
    let mut total = 0.0;
    for k in 0..m {
        for k2 in 0..m {
            let t = g[(k, k2)] * kuu[(k, k2)];
            total += t;
            if k == k2 {
                continue;
            }
            for j in 0..q {
                let dz = z[(k, j)] - z[(k2, j)];
                out.z[(k, j)] -= 2.0 * t * w[j] * dz;
                out.omega[j] -= 0.5 * t * dz * dz;
            }
        }
    }
    out.sigma_sq += total / kernel.sigma_h_sq;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_error};
    use crate::kernels::gram;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn phi0_example() {
        let k = ArdParams::new(2.0, vec![1.0]).unwrap();
        assert_eq!(phi0(&k, 3), 6.0);
    }

    #[test]
    fn zero_variance_collapses_to_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = ArdParams::new(1.3, vec![0.7, 2.0, 0.1]).unwrap();
        let mu = random(6, 3, -1.0, 1.0, &mut rng);
        let z = random(4, 3, -1.0, 1.0, &mut rng);
        let zero = DMatrix::zeros(6, 3);
        let p1 = phi1(&k, &mu, &zero, &z).unwrap();
        let kfu = gram(&mu, &z, &k).unwrap();
        assert!((&p1 - &kfu).amax() < 1e-10);
        let p2 = phi2(&k, &mu, &zero, &z).unwrap();
        assert!((p2 - kfu.transpose() * &kfu).amax() < 1e-10);
    }

    #[test]
    fn kl_and_entropy_closed_forms() {
        let l = VariationalLatent::new(DMatrix::zeros(3, 2), DMatrix::from_element(3, 2, 1.0)).unwrap();
        assert_eq!(l.kl_standard_normal(), 0.0);

        let v = DMatrix::from_row_slice(2, 2, &[0.5, 2.0, 0.1, 1.5]);
        let l = VariationalLatent::new(DMatrix::zeros(2, 2), v.clone()).unwrap();
        let direct: f64 = v.iter().map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s).ln()).sum();
        assert!((l.entropy() - direct).abs() < 1e-10);
    }

    /// Monte Carlo estimates of Φ₁ and Φ₂ with standard errors.
    pub(crate) fn mc_check(seed: u64, samples: usize) -> (usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, q, m) = (2, 1, 2);
        let k = ArdParams::new(rng.gen_range(0.5..2.0), vec![rng.gen_range(0.3..3.0)]).unwrap();
        let mu = random(n, q, -1.0, 1.0, &mut rng);
        let s = random(n, q, 0.05, 1.0, &mut rng);
        let z = random(m, q, -1.0, 1.0, &mut rng);
        let p1 = phi1(&k, &mu, &s, &z).unwrap();
        let p2 = phi2(&k, &mu, &s, &z).unwrap();

        let mut sum1 = DMatrix::<f64>::zeros(n, m);
        let mut sq1 = DMatrix::<f64>::zeros(n, m);
        let mut sum2 = DMatrix::<f64>::zeros(m, m);
        let mut sq2 = DMatrix::<f64>::zeros(m, m);
        for _ in 0..samples {
            let h = DMatrix::from_fn(n, q, |i, j| mu[(i, j)] + s[(i, j)].sqrt() * rng.sample::<f64, _>(StandardNormal));
            let kfu = gram(&h, &z, &k).unwrap();
            let kk = kfu.transpose() * &kfu;
            sum1 += &kfu;
            sq1 += kfu.component_mul(&kfu);
            sum2 += &kk;
            sq2 += kk.component_mul(&kk);
        }
        let ns = samples as f64;
        let (mut ok, mut total) = (0, 0);
        for (sum, sq, exact) in [(&sum1, &sq1, &p1), (&sum2, &sq2, &p2)] {
            for idx in 0..exact.len() {
                let mean = sum[idx] / ns;
                let var = (sq[idx] / ns - mean * mean) * ns / (ns - 1.0);
                let se = (var / ns).sqrt();
                total += 1;
                if (mean - exact[idx]).abs() <= 3.0 * se {
                    ok += 1;
                }
            }
        }
        (ok, total)
    }

    #[test]
    fn closed_forms_match_monte_carlo() {
        let (ok, total) = mc_check(77, 200_000);
        assert_eq!(ok, total);
    }

    fn objective(
        k: &ArdParams,
        mu: &DMatrix<f64>,
        s: &DMatrix<f64>,
        z: &DMatrix<f64>,
        g1: &DMatrix<f64>,
        g2: &DMatrix<f64>,
        gk: &DMatrix<f64>,
    ) -> f64 {
        let p1 = phi1(k, mu, s, z).unwrap();
        let p2 = phi2(k, mu, s, z).unwrap();
        let ku = kuu(k, z).unwrap();
        0.7 * phi0(k, mu.nrows()) + g1.dot(&p1) + g2.dot(&p2) + gk.dot(&ku)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, q, m) = (5, 2, 3);
        let k = ArdParams::new(1.2, vec![0.8, 1.7]).unwrap();
        let mu = random(n, q, -1.0, 1.0, &mut rng);
        let s = random(n, q, 0.1, 0.8, &mut rng);
        let z = random(m, q, -1.0, 1.0, &mut rng);
        let g1 = random(n, m, -1.0, 1.0, &mut rng);
        let g2 = {
            let a = random(m, m, -1.0, 1.0, &mut rng);
            &a + a.transpose()
        };
        let gk = {
            let a = random(m, m, -1.0, 1.0, &mut rng);
            &a + a.transpose()
        };
        let mut grads = StatGrads::zeros(n, m, q);
        let p1 = phi1(&k, &mu, &s, &z).unwrap();
        phi_backprop(&k, &mu, &s, &z, &p1, 0.7, &g1, &g2, &mut grads);
        kuu_backprop(&k, &z, &kuu(&k, &z).unwrap(), &gk, &mut grads);

        let h = 1e-5;
        let fd_mu = central_diff(
            |v| Ok(objective(&k, &DMatrix::from_column_slice(n, q, v), &s, &z, &g1, &g2, &gk)),
            mu.as_slice(),
            h,
        )
        .unwrap();
        assert!(rel_error(grads.means.as_slice(), &fd_mu, 1e-8) < 1e-6);
        let fd_s = central_diff(
            |v| Ok(objective(&k, &mu, &DMatrix::from_column_slice(n, q, v), &z, &g1, &g2, &gk)),
            s.as_slice(),
            h,
        )
        .unwrap();
        assert!(rel_error(grads.variances.as_slice(), &fd_s, 1e-8) < 1e-6);
        let fd_z = central_diff(
            |v| Ok(objective(&k, &mu, &s, &DMatrix::from_column_slice(m, q, v), &g1, &g2, &gk)),
            z.as_slice(),
            h,
        )
        .unwrap();
        assert!(rel_error(grads.z.as_slice(), &fd_z, 1e-8) < 1e-6);
        let fd_w = central_diff(
            |v| Ok(objective(&ArdParams::new(1.2, v.to_vec()).unwrap(), &mu, &s, &z, &g1, &g2, &gk)),
            &k.weights,
            h,
        )
        .unwrap();
        assert!(rel_error(&grads.omega, &fd_w, 1e-8) < 1e-6);
        let fd_sig = central_diff(
            |v| Ok(objective(&ArdParams::new(v[0], k.weights.clone()).unwrap(), &mu, &s, &z, &g1, &g2, &gk)),
            &[1.2],
            h,
        )
        .unwrap();
        assert!(rel_error(&[grads.sigma_sq], &fd_sig, 1e-8) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn phi2_symmetric_psd(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = ArdParams::new(rng.gen_range(0.2..3.0), vec![rng.gen_range(0.1..5.0), rng.gen_range(0.0..5.0)]).unwrap();
            let mu = random(7, 2, -2.0, 2.0, &mut rng);
            let s = random(7, 2, 0.0, 1.5, &mut rng);
            let z = random(5, 2, -2.0, 2.0, &mut rng);
            let p2 = phi2(&k, &mu, &s, &z).unwrap();
            prop_assert_eq!(&p2, &p2.transpose());
            let eig = p2.symmetric_eigenvalues();
            let scale = p2.amax();
            prop_assert!(eig.iter().all(|e| *e >= -1e-10 * scale));
        }
    }
}
