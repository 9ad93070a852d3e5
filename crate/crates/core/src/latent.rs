//! Latent-space operations on a trained model: encoding, decoding under a
//! new condition, scaling, linear interpolation and PCA.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::Cinn;
use crate::numerics::Tensor;
use crate::rng::{normal_tensor, Seed};

/// Scaling factors for the temperature strip.
pub const ALPHA_STRIP: [f64; 5] = [0.0, 0.7, 0.9, 1.0, 1.25];

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Sampled { seed: u64, temperature: f64 },
    /// Encoded from this `(x, y)` pair (each with a leading axis of 1).
    Encoded { x: Tensor, y: Tensor },
    /// Result of scaling or combining other codes.
    Derived,
}

/// One latent vector, `[dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
    pub provenance: Provenance,
}

impl LatentCode {
    pub fn new(z: Tensor) -> Self {
        let n = z.len();
        Self {
            z: z.reshape(&[n]).expect("same size"),
            provenance: Provenance::Derived,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn norm(&self) -> f64 {
        self.z.sq_norm().sqrt()
    }

    /// Draw `z ~ N(0, T²·I)` for a model of dimension `dim`.
    pub fn sample(dim: usize, temperature: f64, seed: Seed) -> Self {
        Self {
            z: normal_tensor(&[dim], temperature, &mut seed.stream("sample")),
            provenance: Provenance::Sampled {
                seed: seed.0,
                temperature,
            },
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::shape("latent code", &[self.dim()], &[dim]));
        }
        Ok(())
    }
}

fn with_batch(t: &Tensor, per_sample: &[usize], what: &'static str) -> Result<Tensor> {
    let n: usize = per_sample.iter().product();
    if t.len() != n {
        let mut want = vec![1];
        want.extend_from_slice(per_sample);
        return Err(Error::shape(what, t.shape(), &want));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(per_sample);
    t.reshape(&shape)
}

/// `z = f(x; φ(y))` for a single pair.
pub fn encode(model: &Cinn, x: &Tensor, y: &Tensor) -> Result<LatentCode> {
    let x = with_batch(x, model.input_shape(), "encode x")?;
    let y = with_batch(y, &model.condition_shape(), "encode y")?;
    let z = model.density(&x, &y)?.z;
    Ok(LatentCode {
        z: z.reshape(&[model.dim()])?,
        provenance: Provenance::Encoded { x, y },
    })
}

/// Codes for every row of a batch.
pub fn encode_batch(model: &Cinn, x: &Tensor, y: &Tensor) -> Result<Vec<LatentCode>> {
    let z = model.density(x, y)?.z;
    Ok((0..x.batch())
        .map(|i| LatentCode {
            z: z.sample(i).reshape(&[model.dim()]).expect("row"),
            provenance: Provenance::Encoded {
                x: x.sample(i),
                y: y.sample(i),
            },
        })
        .collect())
}

/// `x = g(z; φ(y_new))`, returned with a leading axis of 1. Decoding with
/// the original condition is plain reconstruction.
pub fn transfer(model: &Cinn, code: &LatentCode, y_new: &Tensor) -> Result<Tensor> {
    code.check_dim(model.dim())?;
    let y = with_batch(y_new, &model.condition_shape(), "transfer y")?;
    model.inverse(&code.z.reshape(&[1, model.dim()])?, &y)
}

pub fn scale_latent(code: &LatentCode, alpha: f64) -> LatentCode {
    LatentCode {
        z: code.z.scale(alpha),
        provenance: Provenance::Derived,
    }
}

/// `a1·z1 + a2·z2`.
pub fn interpolate(z1: &LatentCode, z2: &LatentCode, a1: f64, a2: f64) -> Result<LatentCode> {
    z1.check_dim(z2.dim())?;
    Ok(LatentCode {
        z: z1.z.zip_map(&z2.z, "interpolate", |p, q| a1 * p + a2 * q)?,
        provenance: Provenance::Derived,
    })
}

/// Row-major grid over `a1 ∈ coeffs` (rows) and `a2 ∈ coeffs` (columns).
pub fn interpolation_grid(z1: &LatentCode, z2: &LatentCode, coeffs: &[f64]) -> Result<Vec<LatentCode>> {
    let mut out = Vec::with_capacity(coeffs.len() * coeffs.len());
    for &a1 in coeffs {
        for &a2 in coeffs {
            out.push(interpolate(z1, z2, a1, a2)?);
        }
    }
    Ok(out)
}

/// Decode `α·z` under `y` for each `α`.
pub fn alpha_strip(model: &Cinn, code: &LatentCode, y: &Tensor, alphas: &[f64]) -> Result<Vec<Tensor>> {
    alphas
        .iter()
        .map(|&a| transfer(model, &scale_latent(code, a), y))
        .collect()
}

/// Principal axes of a set of codes.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal axes, sorted by descending variance.
    pub axes: Vec<Vec<f64>>,
    /// Variance along each axis (population normalization).
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fraction of the total variance along each axis.
    pub fn explained_ratio(&self) -> Vec<f64> {
        let total: f64 = self.variances.iter().sum();
        self.variances
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect()
    }

    /// Coordinates of a code in the principal basis.
    pub fn project(&self, code: &LatentCode) -> Result<Vec<f64>> {
        code.check_dim(self.mean.len())?;
        let centered: Vec<f64> = code.z.data().iter().zip(&self.mean).map(|(z, m)| z - m).collect();
        Ok(self
            .axes
            .iter()
            .map(|a| a.iter().zip(&centered).map(|(p, q)| p * q).sum())
            .collect())
    }

    /// Inverse of [`Pca::project`].
    pub fn reconstruct(&self, coords: &[f64]) -> LatentCode {
        let mut z = self.mean.clone();
        for (a, &c) in self.axes.iter().zip(coords) {
            for (zi, ai) in z.iter_mut().zip(a) {
                *zi += c * ai;
            }
        }
        LatentCode::new(Tensor::from_vec(z))
    }
}

/// PCA by eigendecomposition of the covariance of mean-centered codes.
/// Each axis is signed so that its first non-negligible entry is positive.
pub fn latent_pca(codes: &[LatentCode]) -> Result<Pca> {
    if codes.len() < 2 {
        return Err(Error::contract(format!("PCA needs at least 2 codes, got {}", codes.len())));
    }
    let d = codes[0].dim();
    for c in codes {
        c.check_dim(d)?;
    }
    let n = codes.len() as f64;
    let mut mean = vec![0.0; d];
    for c in codes {
        for (m, z) in mean.iter_mut().zip(c.z.data()) {
            *m += z / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for c in codes {
        let v: Vec<f64> = c.z.data().iter().zip(&mean).map(|(z, m)| z - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += v[i] * v[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::with_capacity(d);
    let mut variances = Vec::with_capacity(d);
    for k in order {
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let tol = 1e-12 * axis.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if axis.iter().find(|v| v.abs() > tol).is_some_and(|&v| v < 0.0) {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes.push(axis);
        variances.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(Pca { mean, axes, variances })
}
