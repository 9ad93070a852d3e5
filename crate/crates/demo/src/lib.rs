//! Browser bindings: a Haar pyramid viewer and a small conditional-mixture
//! lab that trains in the page, samples at a chosen temperature, and moves
//! shared latent codes between conditions.

use cinn::cli::tasks::{colorize, generate, one_hot, Mixture, ToyTask, ToyTaskSpec};
use cinn::conditioning::ConditioningSpec;
use cinn::latent::{transfer, LatentCode};
use cinn::model::VectorArch;
use cinn::rng::Seed;
use cinn::training::{Dataset, TrainConfig, Trainer};
use cinn::wavelet::{downsample, upsample, Downsampling};
use cinn::{Cinn, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: cinn::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes for a `[1|3, h, w]` image in `[0, 1]`.
fn rgba(img: &Tensor) -> Vec<u8> {
    let (c, hw) = (img.shape()[0], img.shape()[1] * img.shape()[2]);
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8;
    let mut out = Vec::with_capacity(4 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            out.push(byte(img.data()[(ch % c) * hw + p]));
        }
        out.push(255);
    }
    out
}

/// Haar decomposition of one procedurally drawn image.
#[wasm_bindgen]
pub struct HaarView {
    size: usize,
    rgb: Vec<u8>,
    mosaic: Vec<u8>,
    round_trip: f64,
    energy_ratio: f64,
}

#[wasm_bindgen]
impl HaarView {
    /// Draw a toy-colorization image and decompose its luminance over
    /// `levels` Haar stages (1..=3).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, levels: u32) -> Result<HaarView, JsError> {
        let levels = levels.clamp(1, 3) as usize;
        let data = generate(&ToyTaskSpec {
            task: ToyTask::ToyColorization,
            seed: seed as u64,
            samples: 1,
        })
        .map_err(js_err)?;
        let l = data.y.sample(0).reshape(&data.y.shape()[1..]).map_err(js_err)?;
        let chroma = data.x.sample(0).reshape(&data.x.shape()[1..]).map_err(js_err)?;
        let rgb = colorize(&l, &chroma).map_err(js_err)?;
        let size = l.shape()[1];

        // Classic mosaic: approximation in the top-left corner, details in
        // the other three quadrants, recursing on the approximation.
        let mut mosaic = vec![0.0; size * size];
        let mut approx = l.clone();
        let mut round_trip = 0.0f64;
        for level in 0..levels {
            let s = approx.shape()[1];
            let bands = downsample(&approx, Downsampling::Haar).map_err(js_err)?;
            let back = upsample(&bands, Downsampling::Haar).map_err(js_err)?;
            round_trip = round_trip.max(back.max_abs_diff(&approx));
            let half = s / 2;
            let gain = 0.5f64.powi(level as i32 + 1);
            for (k, (r0, c0)) in [(0, 0), (0, half), (half, 0), (half, half)].into_iter().enumerate() {
                for y in 0..half {
                    for x in 0..half {
                        let v = bands.data()[(k * half + y) * half + x];
                        mosaic[(r0 + y) * size + c0 + x] = if k == 0 { v * gain } else { 0.5 + 2.0 * v };
                    }
                }
            }
            approx = bands.narrow_channels(0, 1);
        }
        let all = downsample(&l, Downsampling::Haar).map_err(js_err)?;
        let energy_ratio = all.sq_norm() / l.sq_norm();
        Ok(HaarView {
            size,
            rgb: rgba(&rgb),
            mosaic: rgba(&Tensor::new(&[1, size, size], mosaic).map_err(js_err)?),
            round_trip,
            energy_ratio,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA pixels of the color image.
    pub fn rgb(&self) -> Vec<u8> {
        self.rgb.clone()
    }

    /// RGBA pixels of the subband mosaic.
    pub fn mosaic(&self) -> Vec<u8> {
        self.mosaic.clone()
    }

    /// Largest reconstruction error over all stages.
    pub fn round_trip_error(&self) -> f64 {
        self.round_trip
    }

    /// `‖bands‖² / ‖image‖²`; 1 for an orthogonal transform.
    pub fn energy_ratio(&self) -> f64 {
        self.energy_ratio
    }
}

trait NarrowChannels {
    fn narrow_channels(&self, start: usize, len: usize) -> Tensor;
}

impl NarrowChannels for Tensor {
    fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let (h, w) = (self.shape()[1], self.shape()[2]);
        let data = self.data()[start * h * w..(start + len) * h * w].to_vec();
        Tensor::new(&[len, h, w], data).expect("slice shape")
    }
}

/// A conditional model of a 2-D Gaussian mixture trained in the page.
#[wasm_bindgen]
pub struct MixtureLab {
    mixture: Mixture,
    model: Cinn,
    data: Dataset,
    trainer: Trainer,
    last_loss: f64,
}

#[wasm_bindgen]
impl MixtureLab {
    /// `modes` is 2 or 8.
    #[wasm_bindgen(constructor)]
    pub fn new(modes: u32, seed: u32) -> Result<MixtureLab, JsError> {
        let mixture = match modes {
            2 => Mixture::two_mode(),
            8 => Mixture::eight_mode(),
            m => return Err(JsError::new(&format!("mixture presets have 2 or 8 modes, not {m}"))),
        };
        let k = mixture.weights.len();
        let arch = VectorArch {
            dim: 2,
            conditioning: ConditioningSpec::Mlp {
                input: k,
                hidden: 32,
                width: 8,
            },
            blocks: 6,
            hidden: 48,
            batch_norm: false,
            permute: true,
            clamp: true,
        };
        let mut model = Cinn::new(arch.build(), Seed(seed as u64)).map_err(js_err)?;
        let data = generate(&ToyTaskSpec {
            task: ToyTask::ConditionalMixture(mixture.clone()),
            seed: seed as u64,
            samples: 3000,
        })
        .map_err(js_err)?;
        let config = TrainConfig {
            batch_size: 128,
            steps: 3000,
            lr: 2e-3,
            milestones: vec![1800, 2500],
            noise_fraction: 0.0,
            seed: seed as u64,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(&mut model, &data, &config).map_err(js_err)?;
        Ok(MixtureLab {
            mixture,
            model,
            data,
            trainer,
            last_loss: f64::NAN,
        })
    }

    /// Run `steps` updates; returns the mean batch NLL (nats per dim).
    pub fn train(&mut self, steps: u32) -> Result<f64, JsError> {
        let mut total = 0.0;
        for _ in 0..steps {
            total += self.trainer.step(&mut self.model, &self.data).map_err(js_err)?.1;
        }
        self.last_loss = total / steps.max(1) as f64;
        Ok(self.last_loss)
    }

    pub fn steps_done(&self) -> usize {
        self.trainer.steps_done()
    }

    pub fn conditions(&self) -> usize {
        self.mixture.weights.len()
    }

    /// Mode centers, flattened `[x0, y0, x1, y1, ...]`.
    pub fn centers(&self) -> Vec<f64> {
        self.mixture.centers.iter().flat_map(|c| *c).collect()
    }

    /// True mixture weights for a condition.
    pub fn weights(&self, condition: usize) -> Vec<f64> {
        self.mixture.weights[condition.min(self.conditions() - 1)].clone()
    }

    fn one_hot(&self, c: usize) -> cinn::Result<Tensor> {
        if c >= self.conditions() {
            return Err(cinn::Error::Config(format!("condition {c} out of range")));
        }
        Ok(one_hot(c, self.conditions()))
    }

    fn condition(&self, c: usize) -> Result<Tensor, JsError> {
        self.one_hot(c).map_err(js_err)
    }

    /// `n` model samples, flattened `[x0, y0, ...]`.
    pub fn sample(&self, condition: usize, n: usize, temperature: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        let y = self.condition(condition)?;
        let s = self
            .model
            .sample(&y, n, temperature, Seed(seed as u64))
            .map_err(js_err)?;
        Ok(s.into_data())
    }

    /// `n` draws from the true posterior, flattened.
    pub fn true_samples(&self, condition: usize, n: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.condition(condition)?;
        let (pts, _) = self
            .mixture
            .sample_posterior(condition, n, &mut Seed(seed as u64).stream("sample"));
        Ok(pts.into_data())
    }

    /// Fraction of `samples` (flattened points) nearest to each mode.
    pub fn mode_frequencies(&self, samples: &[f64]) -> Vec<f64> {
        let mut counts = vec![0.0; self.mixture.centers.len()];
        let n = (samples.len() / 2).max(1) as f64;
        for p in samples.chunks_exact(2) {
            counts[self.mixture.assign([p[0], p[1]])] += 1.0 / n;
        }
        counts
    }

    /// Decode the same `n` latent codes under two conditions. Returns
    /// `[xa, ya, xb, yb]` per code.
    pub fn transfer(&self, from: usize, to: usize, n: usize, temperature: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        let (ya, yb) = (self.condition(from)?, self.condition(to)?);
        let mut out = Vec::with_capacity(4 * n);
        for i in 0..n {
            let code = LatentCode::sample(2, temperature, Seed(seed as u64).derive(&format!("code-{i}")));
            let a = transfer(&self.model, &code, &ya).map_err(js_err)?;
            let b = transfer(&self.model, &code, &yb).map_err(js_err)?;
            out.extend_from_slice(a.data());
            out.extend_from_slice(b.data());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_view_is_lossless() {
        let v = HaarView::new(3, 2).unwrap();
        assert!(v.round_trip_error() < 1e-12);
        assert!((v.energy_ratio() - 1.0).abs() < 1e-12);
        assert_eq!(v.mosaic().len(), 4 * v.size() * v.size());
    }

    #[test]
    fn lab_trains_and_samples() {
        let mut lab = MixtureLab::new(2, 1).unwrap();
        let first = lab.train(1).unwrap();
        let later = lab.train(60).unwrap();
        assert!(later < first, "{first} -> {later}");
        let s = lab.sample(0, 50, 1.0, 4).unwrap();
        assert_eq!(s.len(), 100);
        let f = lab.mode_frequencies(&s);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let zero = lab.sample(1, 3, 0.0, 4).unwrap();
        assert_eq!(zero[0..2], zero[2..4]);
        assert_eq!(lab.transfer(0, 2, 5, 1.0, 9).unwrap().len(), 20);
        assert!(lab.one_hot(7).is_err());
    }
}
