//! Invertible 2×2 downsampling.
//!
//! Each 2×2 spatial block of every channel is treated as a 4-vector
//! `(p00, p01, p10, p11)` (top-left, top-right, bottom-left, bottom-right) and
//! multiplied by an orthogonal 4×4 matrix. For the Haar transform the rows
//! are the average, horizontal, vertical and diagonal filters with entries
//! ±1/2. The output of a `c×h×w` input is `4c×h/2×w/2`, with all
//! average channels first, then the horizontal, vertical and diagonal
//! groups, each in input-channel order.
//!
//! Since the matrix is orthogonal the transform has `|det| = 1` and adds
//! nothing to the log-determinant, and its inverse (and its adjoint) is the
//! transpose.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Haar analysis matrix; rows are (average, horizontal, vertical, diagonal).
pub const HAAR: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// Plain space-to-depth: each block position becomes its own channel group.
pub const SQUEEZE: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsampling {
    Haar,
    /// Naive reshape without frequency separation.
    Squeeze,
}

impl Downsampling {
    pub fn matrix(self) -> &'static [[f64; 4]; 4] {
        match self {
            Downsampling::Haar => &HAAR,
            Downsampling::Squeeze => &SQUEEZE,
        }
    }
}

/// The fixed Haar coefficient matrix.
#[derive(Clone, Copy, Debug, Default)]
pub struct HaarKernel;

impl HaarKernel {
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        HAAR
    }

    /// `‖K·Kᵀ − I‖∞`
    pub fn orthogonality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..4).map(|k| HAAR[i][k] * HAAR[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        det4(&HAAR)
    }
}

fn det4(m: &[[f64; 4]; 4]) -> f64 {
    let mut a = *m;
    let mut det = 1.0;
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

/// Split a rank-3 or rank-4 shape into (batch, c, h, w).
fn nchw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0, 0])),
    }
}

fn with_dims(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![shape[0], c, h, w]
    }
}

pub(crate) fn down_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize, m: &[[f64; 4]; 4]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let plane = oh * ow;
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let xs = &x[s * c * h * w..(s + 1) * c * h * w];
        let os = &mut out[s * c * h * w..(s + 1) * c * h * w];
        for ch in 0..c {
            for by in 0..oh {
                for bx in 0..ow {
                    let base = (ch * h + 2 * by) * w + 2 * bx;
                    let p = [xs[base], xs[base + 1], xs[base + w], xs[base + w + 1]];
                    for (q, row) in m.iter().enumerate() {
                        os[(q * c + ch) * plane + by * ow + bx] =
                            row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3] * p[3];
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`down_raw`]; `c` is the channel count of the full-resolution side.
pub(crate) fn up_raw(x: &[f64], n: usize, c: usize, h: usize, w: usize, m: &[[f64; 4]; 4]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let plane = oh * ow;
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        let xs = &x[s * c * h * w..(s + 1) * c * h * w];
        let os = &mut out[s * c * h * w..(s + 1) * c * h * w];
        for ch in 0..c {
            for by in 0..oh {
                for bx in 0..ow {
                    let mut coef = [0.0; 4];
                    for (q, v) in coef.iter_mut().enumerate() {
                        *v = xs[(q * c + ch) * plane + by * ow + bx];
                    }
                    let base = (ch * h + 2 * by) * w + 2 * bx;
                    for (k, off) in [0, 1, w, w + 1].into_iter().enumerate() {
                        os[base + off] = (0..4).map(|q| m[q][k] * coef[q]).sum();
                    }
                }
            }
        }
    }
    out
}

/// Downsample `c×h×w` (or batched `n×c×h×w`) to `4c×h/2×w/2`.
pub fn downsample(x: &Tensor, kind: Downsampling) -> Result<Tensor> {
    let (n, c, h, w) = nchw(x.shape(), "downsample")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract(format!(
            "downsampling needs even spatial dims, got {h}×{w}"
        )));
    }
    let data = down_raw(x.data(), n, c, h, w, kind.matrix());
    Ok(Tensor::from_parts(with_dims(x.shape(), 4 * c, h / 2, w / 2), data))
}

/// Exact inverse of [`downsample`].
pub fn upsample(x: &Tensor, kind: Downsampling) -> Result<Tensor> {
    let (n, c4, h, w) = nchw(x.shape(), "upsample")?;
    if c4 % 4 != 0 {
        return Err(Error::contract(format!(
            "upsampling needs a channel count divisible by 4, got {c4}"
        )));
    }
    let c = c4 / 4;
    let data = up_raw(x.data(), n, c, 2 * h, 2 * w, kind.matrix());
    Ok(Tensor::from_parts(with_dims(x.shape(), c, 2 * h, 2 * w), data))
}

pub fn haar_down(x: &Tensor) -> Result<Tensor> {
    downsample(x, Downsampling::Haar)
}

pub fn haar_up(x: &Tensor) -> Result<Tensor> {
    upsample(x, Downsampling::Haar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_orthogonal_unit_determinant() {
        let k = HaarKernel;
        assert!(k.orthogonality_error() < 1e-15);
        assert!((k.determinant().abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input() {
        let x = Tensor::ones(&[2, 4, 6]);
        let y = haar_down(&x).unwrap();
        assert_eq!(y.shape(), &[8, 2, 3]);
        let plane = 6;
        for (i, v) in y.data().iter().enumerate() {
            let group = i / (2 * plane);
            let expected = if group == 0 { 2.0 } else { 0.0 };
            assert_eq!(*v, expected, "index {i}");
        }
        assert_eq!(haar_up(&y).unwrap(), x);
    }

    #[test]
    fn single_block_hand_values() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = haar_down(&x).unwrap();
        assert_eq!(y.data(), &[5.0, -1.0, -2.0, 0.0]);
        let back = haar_up(&Tensor::new(&[4, 1, 1], vec![5.0, -1.0, -2.0, 0.0]).unwrap()).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn channel_grouping_is_a_h_v_d() {
        // channel 0 constant 1, channel 1 a horizontal ramp
        let x = Tensor::new(&[2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = haar_down(&x).unwrap();
        // [a0, a1, h0, h1, v0, v1, d0, d1]
        assert_eq!(y.data(), &[2.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn odd_dims_and_bad_channels_rejected() {
        assert!(haar_down(&Tensor::zeros(&[1, 3, 4])).is_err());
        assert!(haar_up(&Tensor::zeros(&[3, 2, 2])).is_err());
        assert!(haar_down(&Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn squeeze_is_a_pure_rearrangement() {
        let x = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let y = downsample(&x, Downsampling::Squeeze).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(vals in proptest::collection::vec(-10.0f64..10.0, 2 * 3 * 8 * 8)) {
            let x = Tensor::new(&[2, 3, 8, 8], vals).unwrap();
            for kind in [Downsampling::Haar, Downsampling::Squeeze] {
                let y = downsample(&x, kind).unwrap();
                prop_assert!((y.sq_norm().sqrt() - x.sq_norm().sqrt()).abs() < 1e-10);
                let back = upsample(&y, kind).unwrap();
                prop_assert!(back.max_abs_diff(&x) < 1e-12);
            }
        }
    }
}
