//! Seed-deterministic toy tasks with known posteriors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{standard_normal, Rng, Seed};
use crate::training::Dataset;

/// Which task and how many samples to draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub task: ToyTask,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ToyTask {
    /// `X | Y = N(a·s(y), σ²)` with `y ~ N(0, I_k)` and `s(y) = Σy/√k`.
    AffineGaussian { a: f64, sigma: f64, y_dim: usize },
    /// 2-D Gaussian mixture whose weights depend on a one-hot condition.
    ConditionalMixture(Mixture),
    /// 16×16 shapes: luminance condition, two chroma channels as target.
    ToyColorization,
    /// 8×8 glyphs of the ten digits with a one-hot class condition.
    Digits,
}

impl ToyTask {
    pub fn affine_gaussian() -> Self {
        ToyTask::AffineGaussian {
            a: 0.8,
            sigma: 0.3,
            y_dim: 1,
        }
    }

    /// Per-sample shape of `x`.
    pub fn x_shape(&self) -> Vec<usize> {
        match self {
            ToyTask::AffineGaussian { .. } => vec![1],
            ToyTask::ConditionalMixture(_) => vec![2],
            ToyTask::ToyColorization => vec![2, COLOR_SIZE, COLOR_SIZE],
            ToyTask::Digits => vec![DIGIT_SIZE * DIGIT_SIZE],
        }
    }

    /// Per-sample shape of `y`.
    pub fn y_shape(&self) -> Vec<usize> {
        match self {
            ToyTask::AffineGaussian { y_dim, .. } => vec![*y_dim],
            ToyTask::ConditionalMixture(m) => vec![m.weights.len()],
            ToyTask::ToyColorization => vec![1, COLOR_SIZE, COLOR_SIZE],
            ToyTask::Digits => vec![10],
        }
    }

    /// Analytic `H(X|Y)` in nats per dimension where one exists.
    pub fn conditional_entropy_per_dim(&self) -> Option<f64> {
        match self {
            ToyTask::AffineGaussian { sigma, .. } => Some(gaussian_entropy(*sigma)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ToyTask::AffineGaussian { a, sigma, y_dim } => {
                if !(a.is_finite() && sigma.is_finite() && *sigma > 0.0 && *y_dim > 0) {
                    return Err(Error::Config("affine-gaussian needs finite a, σ > 0 and y_dim ≥ 1".into()));
                }
                Ok(())
            }
            ToyTask::ConditionalMixture(m) => m.validate(),
            _ => Ok(()),
        }
    }
}

/// `½ ln(2πeσ²)`, the differential entropy of a 1-D Gaussian.
pub fn gaussian_entropy(sigma: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln()
}

/// Isotropic 2-D Gaussian mixture; row `j` of `weights` is the mode
/// distribution under condition `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub centers: Vec<[f64; 2]>,
    pub weights: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl Mixture {
    /// Two modes, three conditions with first-mode weight 0.2, 0.5, 0.8.
    pub fn two_mode() -> Self {
        Self {
            centers: vec![[-1.5, 0.0], [1.5, 0.0]],
            weights: vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.8, 0.2]],
            sigma: 0.3,
        }
    }

    /// Eight modes on a ring of radius 2; uniform weights under the first
    /// condition, skewed (every mode ≥ 5%) under the second.
    pub fn eight_mode() -> Self {
        let centers = (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                [2.0 * a.cos(), 2.0 * a.sin()]
            })
            .collect();
        Self {
            centers,
            weights: vec![vec![0.125; 8], vec![0.3, 0.2, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05]],
            sigma: 0.15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.centers.len();
        if k == 0 || self.weights.is_empty() || !(self.sigma > 0.0) {
            return Err(Error::Config("mixture needs modes, conditions and σ > 0".into()));
        }
        for w in &self.weights {
            if w.len() != k || w.iter().any(|&p| p < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("mixture weights {w:?} are not a distribution over {k} modes")));
            }
        }
        Ok(())
    }

    fn draw_mode(&self, condition: usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let w = &self.weights[condition];
        let mut acc = 0.0;
        for (k, p) in w.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        w.len() - 1
    }

    /// Draw from the true posterior `p(x | y = condition)`: `[n, 2]` points
    /// and their mode labels.
    pub fn sample_posterior(&self, condition: usize, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(2 * n);
        let mut modes = Vec::with_capacity(n);
        for _ in 0..n {
            let k = self.draw_mode(condition, rng);
            modes.push(k);
            for c in self.centers[k] {
                data.push(c + self.sigma * standard_normal(rng));
            }
        }
        (Tensor::from_parts(vec![n, 2], data), modes)
    }

    /// Index of the nearest center.
    pub fn assign(&self, p: [f64; 2]) -> usize {
        let d = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        (0..self.centers.len())
            .min_by(|&a, &b| d(&self.centers[a]).total_cmp(&d(&self.centers[b])))
            .expect("at least one center")
    }
}

pub fn one_hot(k: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[1, n], |i| if i == k { 1.0 } else { 0.0 })
}

/// Map values in `[lo, hi]` onto the nearest of 256 evenly spaced levels.
pub fn quantize(v: f64, lo: f64, hi: f64) -> f64 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    lo + (t * 255.0).round() / 255.0 * (hi - lo)
}

pub const COLOR_SIZE: usize = 16;
pub const DIGIT_SIZE: usize = 8;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Chroma scale factors that map `B − L` and `R − L` onto `[−1, 1]`.
const CB_SCALE: f64 = 0.886;
const CR_SCALE: f64 = 0.701;

/// Saturated palette for the colorization shapes.
const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.7, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.6, 0.2, 0.8],
    [0.1, 0.8, 0.85],
];

/// RGB in `[0, 1]` to (luminance in `[0, 1]`, cb, cr in `[−1, 1]`).
pub fn rgb_to_lcc(rgb: [f64; 3]) -> [f64; 3] {
    let l = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
    [l, (rgb[2] - l) / CB_SCALE, (rgb[0] - l) / CR_SCALE]
}

pub fn lcc_to_rgb(lcc: [f64; 3]) -> [f64; 3] {
    let [l, cb, cr] = lcc;
    let r = l + CR_SCALE * cr;
    let b = l + CB_SCALE * cb;
    let g = (l - LUMA[0] * r - LUMA[2] * b) / LUMA[1];
    [r, g, b]
}

/// Recombine a `[1, h, w]` luminance and `[2, h, w]` chroma into a
/// `[3, h, w]` RGB image clamped to `[0, 1]`.
pub fn colorize(l: &Tensor, chroma: &Tensor) -> Result<Tensor> {
    let hw = l.len();
    if chroma.len() != 2 * hw {
        return Err(Error::shape("colorize", l.shape(), chroma.shape()));
    }
    let (h, w) = (l.shape()[l.rank() - 2], l.shape()[l.rank() - 1]);
    let mut out = vec![0.0; 3 * hw];
    for p in 0..hw {
        let rgb = lcc_to_rgb([l.data()[p], chroma.data()[p], chroma.data()[hw + p]]);
        for c in 0..3 {
            out[c * hw + p] = rgb[c].clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], out)
}

fn draw_color_image(rng: &mut Rng) -> [Vec<f64>; 3] {
    let n = COLOR_SIZE;
    let shade = |c: [f64; 3], k: f64| c.map(|v| v * k);
    let bg = shade(PALETTE[rng.random_range(0..PALETTE.len())], rng.random_range(0.25..0.6));
    let mut img = [vec![bg[0]; n * n], vec![bg[1]; n * n], vec![bg[2]; n * n]];
    for _ in 0..rng.random_range(1..=3) {
        let color = shade(PALETTE[rng.random_range(0..PALETTE.len())], rng.random_range(0.7..1.0));
        let cx = rng.random_range(2.0..14.0);
        let cy = rng.random_range(2.0..14.0);
        let r: f64 = rng.random_range(2.0..5.0);
        let rect = rng.random_bool(0.5);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if rect { dx.abs() < r && dy.abs() < 0.7 * r } else { dx * dx + dy * dy < r * r };
                if inside {
                    for c in 0..3 {
                        img[c][y * n + x] = color[c];
                    }
                }
            }
        }
    }
    img
}

/// 5×7 bitmaps of the digits 0–9, one string per row.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    [".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."],
];

/// One glyph in `[−1, 1]` with a random offset, slant, stroke weight and
/// intensity as the "style".
fn draw_digit(class: usize, rng: &mut Rng) -> Vec<f64> {
    let n = DIGIT_SIZE;
    let ox = rng.random_range(0..=2) as i64;
    let oy = rng.random_range(0..=1) as i64;
    let slant = rng.random_range(-1..=1) as i64;
    let bold = rng.random_bool(0.3);
    let ink = rng.random_range(0.6..1.0);
    let mut img = vec![0.0; n * n];
    for (r, row) in GLYPHS[class].iter().enumerate() {
        let shift = if r < 2 { slant } else if r > 4 { -slant } else { 0 };
        for (c, ch) in row.bytes().enumerate() {
            if ch != b'#' {
                continue;
            }
            let x = c as i64 + ox + shift;
            let y = r as i64 + oy;
            for dx in 0..=(bold as i64) {
                let xx = x + dx;
                if (0..n as i64).contains(&xx) && (0..n as i64).contains(&y) {
                    img[y as usize * n + xx as usize] = ink;
                }
            }
        }
    }
    img.iter().map(|&v| quantize(2.0 * v - 1.0, -1.0, 1.0)).collect()
}

/// Generate the dataset for a task.
pub fn generate(spec: &ToyTaskSpec) -> Result<Dataset> {
    spec.task.validate()?;
    if spec.samples == 0 {
        return Err(Error::Config("task needs at least one sample".into()));
    }
    let n = spec.samples;
    let mut rng = Seed(spec.seed).stream("task");
    let (xd, yd): (Vec<f64>, Vec<f64>) = match &spec.task {
        ToyTask::AffineGaussian { a, sigma, y_dim } => {
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n * y_dim);
            for _ in 0..n {
                let y: Vec<f64> = (0..*y_dim).map(|_| standard_normal(&mut rng)).collect();
                let s = y.iter().sum::<f64>() / (*y_dim as f64).sqrt();
                xs.push(a * s + sigma * standard_normal(&mut rng));
                ys.extend(y);
            }
            (xs, ys)
        }
        ToyTask::ConditionalMixture(m) => {
            let conds = m.weights.len();
            let mut xs = Vec::with_capacity(2 * n);
            let mut ys = Vec::with_capacity(conds * n);
            for _ in 0..n {
                let j = rng.random_range(0..conds);
                let (p, _) = m.sample_posterior(j, 1, &mut rng);
                xs.extend_from_slice(p.data());
                ys.extend((0..conds).map(|i| if i == j { 1.0 } else { 0.0 }));
            }
            (xs, ys)
        }
        ToyTask::ToyColorization => {
            let hw = COLOR_SIZE * COLOR_SIZE;
            let mut xs = Vec::with_capacity(2 * hw * n);
            let mut ys = Vec::with_capacity(hw * n);
            for _ in 0..n {
                let img = draw_color_image(&mut rng);
                let mut cb = Vec::with_capacity(hw);
                let mut cr = Vec::with_capacity(hw);
                for p in 0..hw {
                    let [l, b, r] = rgb_to_lcc([img[0][p], img[1][p], img[2][p]]);
                    ys.push(quantize(l, 0.0, 1.0));
                    cb.push(quantize(b, -1.0, 1.0));
                    cr.push(quantize(r, -1.0, 1.0));
                }
                xs.extend(cb);
                xs.extend(cr);
            }
            (xs, ys)
        }
        ToyTask::Digits => {
            let mut xs = Vec::with_capacity(DIGIT_SIZE * DIGIT_SIZE * n);
            let mut ys = Vec::with_capacity(10 * n);
            for _ in 0..n {
                let class = rng.random_range(0..10);
                xs.extend(draw_digit(class, &mut rng));
                ys.extend((0..10).map(|i| if i == class { 1.0 } else { 0.0 }));
            }
            (xs, ys)
        }
    };
    let mut xs = vec![n];
    xs.extend(spec.task.x_shape());
    let mut ys = vec![n];
    ys.extend(spec.task.y_shape());
    Dataset::new(Tensor::new(&xs, xd)?, Tensor::new(&ys, yd)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_of_sigma_point_three() {
        assert!((gaussian_entropy(0.3) - 0.214_965_728_878_736_7).abs() < 1e-12);
    }

    #[test]
    fn lcc_round_trip_and_range() {
        for rgb in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.3, 0.6, 0.9], [1.0, 1.0, 1.0]] {
            let lcc = rgb_to_lcc(rgb);
            assert!(lcc[1].abs() <= 1.0 + 1e-12 && lcc[2].abs() <= 1.0 + 1e-12);
            let back = lcc_to_rgb(lcc);
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        for task in [
            ToyTask::affine_gaussian(),
            ToyTask::ConditionalMixture(Mixture::eight_mode()),
            ToyTask::ToyColorization,
            ToyTask::Digits,
        ] {
            let spec = ToyTaskSpec { task, seed: 4, samples: 20 };
            let a = generate(&spec).unwrap();
            let b = generate(&spec).unwrap();
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
            let other = generate(&ToyTaskSpec { seed: 5, ..spec }).unwrap();
            assert_ne!(a.x, other.x);
        }
    }

    #[test]
    fn colorization_values_in_range() {
        let d = generate(&ToyTaskSpec {
            task: ToyTask::ToyColorization,
            seed: 0,
            samples: 10,
        })
        .unwrap();
        assert_eq!(d.x.shape(), &[10, 2, 16, 16]);
        assert!(d.x.data().iter().all(|v| v.abs() <= 1.0));
        assert!(d.y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mixture_frequencies_follow_weights() {
        let m = Mixture::two_mode();
        let (_, modes) = m.sample_posterior(0, 20_000, &mut Seed(1).stream("m"));
        let f = modes.iter().filter(|&&k| k == 0).count() as f64 / 20_000.0;
        assert!((f - 0.2).abs() < 0.01);
    }

    #[test]
    fn bad_weights_rejected() {
        let mut m = Mixture::two_mode();
        m.weights[0] = vec![0.5, 0.6];
        assert!(m.validate().is_err());
    }
}
