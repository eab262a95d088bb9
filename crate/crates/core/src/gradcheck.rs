//! Central finite differences for checking analytic gradients.

use crate::error::Result;

pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Largest blockwise relative error; `blocks` are consecutive slice lengths.
pub fn blockwise_rel_error(analytic: &[f64], numeric: &[f64], blocks: &[usize], floor: f64) -> f64 {
    let mut start = 0;
    let mut worst = 0.0f64;
    for len in blocks {
        let end = start + len;
        worst = worst.max(rel_error(&analytic[start..end], &numeric[start..end], floor));
        start = end;
    }
    worst
}
