//! Diversity-aware sample metrics.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::tasks::Mixture;

fn check_same(samples: &[Tensor], reference: &Tensor, op: &'static str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::contract(format!("{op} needs at least one sample")));
    }
    for s in samples {
        if s.len() != reference.len() {
            return Err(Error::shape(op, s.shape(), reference.shape()));
        }
    }
    Ok(())
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `minᵢ mean((sᵢ − truth)²)`.
pub fn best_of_n(samples: &[Tensor], truth: &Tensor) -> Result<f64> {
    check_same(samples, truth, "best_of_n")?;
    Ok(samples.iter().map(|s| mse(s, truth)).fold(f64::INFINITY, f64::min))
}

/// Mean over pixels of the (population) variance across samples.
pub fn pixel_variance(samples: &[Tensor]) -> Result<f64> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("pixel_variance needs at least one sample"))?;
    check_same(samples, first, "pixel_variance")?;
    let n = samples.len() as f64;
    let mut total = 0.0;
    for p in 0..first.len() {
        // Welford's update; exact zero for identical samples.
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, s) in samples.iter().enumerate() {
            let v = s.data()[p];
            let d = v - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (v - mean);
        }
        total += m2 / n;
    }
    Ok(total / first.len() as f64)
}

/// Nearest-center mode statistics of a `[n, 2]` point set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeStats {
    /// Fraction of points assigned to each mode; sums to 1.
    pub frequencies: Vec<f64>,
    /// Mean of the points assigned to each mode (`None` if empty).
    pub means: Vec<Option<[f64; 2]>>,
}

pub fn mode_stats(points: &Tensor, mixture: &Mixture) -> Result<ModeStats> {
    if points.rank() != 2 || points.shape()[1] != 2 {
        return Err(Error::shape("mode_stats", points.shape(), &[points.batch(), 2]));
    }
    let k = mixture.centers.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![[0.0; 2]; k];
    for p in points.data().chunks_exact(2) {
        let m = mixture.assign([p[0], p[1]]);
        counts[m] += 1;
        sums[m][0] += p[0];
        sums[m][1] += p[1];
    }
    let n = points.batch() as f64;
    Ok(ModeStats {
        frequencies: counts.iter().map(|&c| c as f64 / n).collect(),
        means: counts
            .iter()
            .zip(&sums)
            .map(|(&c, s)| (c > 0).then(|| [s[0] / c as f64, s[1] / c as f64]))
            .collect(),
    })
}
