//! Maximum-likelihood training: dequantization, the learning-rate schedule,
//! the optimization loop with divergence detection, and checkpoints.

mod checkpoint;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode, encode, load, load_into, save, Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::graph::{apply_bn_updates, Graph, Mode};
use crate::model::{Cinn, ImageArch, VectorArch};
use crate::numerics::{AdamState, Tensor};
use crate::rng::{normal_tensor, Rng, Seed};
use crate::wavelet::Downsampling;

/// Default noise scale as a fraction of the data range: one 8-bit level.
pub const DEFAULT_NOISE_FRACTION: f64 = 1.0 / 256.0;

/// Step whose loss is the reference for the divergence rule.
pub const DIVERGENCE_REFERENCE_STEP: usize = 100;

/// Single-component switches for ablation runs. `true` everywhere is the
/// full configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Dequantization noise on the training inputs.
    pub noise: bool,
    /// Fixed channel permutations between coupling blocks.
    pub permutations: bool,
    /// Soft clamping of the scale outputs.
    pub clamping: bool,
    /// Haar downsampling; a plain reshape when off.
    pub wavelet: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            noise: true,
            permutations: true,
            clamping: true,
            wavelet: true,
        }
    }
}

impl Ablation {
    pub fn apply_image(&self, arch: &mut ImageArch) {
        arch.permute &= self.permutations;
        arch.clamp &= self.clamping;
        if !self.wavelet {
            arch.downsampling = Downsampling::Squeeze;
        }
    }

    pub fn apply_vector(&self, arch: &mut VectorArch) {
        arch.permute &= self.permutations;
        arch.clamp &= self.clamping;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Steps at which the learning rate drops by a factor of 10.
    pub milestones: Vec<usize>,
    pub weight_decay: f64,
    /// Dequantization noise std as a fraction of `data_range`.
    pub noise_fraction: f64,
    /// Width of the interval the data lives in.
    pub data_range: f64,
    pub ablation: Ablation,
    /// Keep the conditioning network at its initial parameters.
    pub freeze_conditioning: bool,
    /// Interval between in-memory snapshots used as the last-good state.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 1000,
            lr: 1e-3,
            milestones: Vec::new(),
            weight_decay: 1e-5,
            noise_fraction: DEFAULT_NOISE_FRACTION,
            data_range: 2.0,
            ablation: Ablation::default(),
            freeze_conditioning: false,
            snapshot_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.steps == 0 || self.snapshot_every == 0 {
            return bad("batch_size, steps and snapshot_every must be positive".into());
        }
        for (name, v) in [("lr", self.lr), ("data_range", self.data_range)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive (got {v})"));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("noise_fraction", self.noise_fraction)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative (got {v})"));
            }
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.iter().any(|&m| m == 0 || m >= self.steps) {
            return bad(format!(
                "milestones {:?} must lie in 1..{}",
                self.milestones, self.steps
            ));
        }
        Ok(())
    }

    /// Learning rate used for the update at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= step).count();
        self.lr / 10f64.powi(drops as i32)
    }

    /// Absolute dequantization noise std, zero when the noise is ablated.
    pub fn noise_std(&self) -> f64 {
        if self.ablation.noise {
            self.noise_fraction * self.data_range
        } else {
            0.0
        }
    }
}

/// Add i.i.d. `N(0, σ²)` noise to every element.
pub fn dequantize(x: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let noise = normal_tensor(x.shape(), sigma, rng);
    x.add(&noise).expect("noise has the input's shape")
}

/// Paired training examples; the leading axis indexes samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.batch() != y.batch() {
            return Err(Error::shape("dataset", x.shape(), y.shape()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_against(&self, model: &Cinn) -> Result<()> {
        if self.x.shape()[1..] != *model.input_shape() {
            return Err(Error::shape("dataset x", &self.x.shape()[1..], model.input_shape()));
        }
        if self.y.shape()[1..] != model.condition_shape()[..] {
            return Err(Error::shape("dataset y", &self.y.shape()[1..], &model.condition_shape()));
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub cml: f64,
    pub nll_nats_per_dim: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport {
    pub step: usize,
    pub reason: String,
    /// Step count of the state the model was rolled back to.
    pub restored_step: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub divergence: Option<DivergenceReport>,
    /// Optimizer state at the end of training (or at the restored state).
    pub optimizer: AdamState,
}

impl TrainReport {
    pub fn final_cml(&self) -> Option<f64> {
        self.records.last().map(|r| r.cml)
    }

    /// Turn a divergence into an error.
    pub fn into_result(self) -> Result<Self> {
        match &self.divergence {
            Some(d) => Err(Error::Divergence {
                step: d.step,
                reason: d.reason.clone(),
            }),
            None => Ok(self),
        }
    }
}

/// Where `train` writes its artifacts. Both are optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Final checkpoint, or the last-good one after a divergence.
    pub checkpoint: Option<PathBuf>,
    /// CSV metrics log.
    pub metrics: Option<PathBuf>,
}

struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self(None)) };
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,cml,nll_nats_per_dim,lr,wall_ms")?;
        Ok(Self(Some(w)))
    }

    fn push(&mut self, r: &StepRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{},{},{},{},{}", r.step, r.cml, r.nll_nats_per_dim, r.lr, r.wall_ms)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(mut w) = self.0 {
            w.flush()?;
        }
        Ok(())
    }
}

/// Draws mini-batches by reshuffling the index set every epoch.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        batch
    }
}

struct Snapshot {
    step: usize,
    params: crate::numerics::ParamStore,
    optimizer: AdamState,
}

/// Divergence rule: a non-finite loss, or a loss exceeding the reference
/// step's value by a factor of ten (measured as `ref + 9·|ref|`, which
/// keeps the rule meaningful for negative losses).
fn divergence_reason(step: usize, cml: f64, reference: Option<f64>) -> Option<String> {
    if !cml.is_finite() {
        return Some(format!("non-finite loss {cml}"));
    }
    match reference {
        Some(r) if step > DIVERGENCE_REFERENCE_STEP && cml > r + 9.0 * r.abs() => Some(format!(
            "loss {cml:.4} exceeds ten times the step-{DIVERGENCE_REFERENCE_STEP} loss {r:.4}"
        )),
        _ => None,
    }
}

/// Incremental optimizer loop: owns the batch order, noise stream and
/// Adam state so training can proceed a few steps at a time.
pub struct Trainer {
    config: TrainConfig,
    batcher: Batcher,
    noise_rng: Rng,
    adam: AdamState,
    step: usize,
}

impl Trainer {
    /// Validate the configuration against `model` and `data`. Freezes the
    /// conditioning network when the configuration asks for it.
    pub fn new(model: &mut Cinn, data: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        data.check_against(model)?;
        if config.freeze_conditioning {
            model.params_mut().freeze_prefix(crate::conditioning::PREFIX);
        }
        let seed = Seed(config.seed);
        Ok(Self {
            config: config.clone(),
            batcher: Batcher::new(data.len(), seed.stream("data")),
            noise_rng: seed.stream("noise"),
            adam: AdamState::new(config.lr, config.weight_decay),
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    /// One update on the next mini-batch. Returns `(cml, nll per dim)` of
    /// the batch before the update; both are NaN if the loss or gradient
    /// was non-finite (the parameters are then left untouched).
    pub fn step(&mut self, model: &mut Cinn, data: &Dataset) -> Result<(f64, f64)> {
        let idx = self.batcher.next(self.config.batch_size);
        let x = dequantize(&data.x.select_rows(&idx), self.config.noise_std(), &mut self.noise_rng);
        let y = data.y.select_rows(&idx);
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        match step_once(model, &mut self.adam, lr, &x, &y) {
            Ok(v) => Ok(v),
            Err(Error::NonFinite { .. } | Error::NonFiniteLoss { .. }) => Ok((f64::NAN, f64::NAN)),
            Err(e) => Err(e),
        }
    }
}

/// Train `model` in place on `data`.
///
/// Deterministic given `config.seed`: batches come from the `data` stream
/// and dequantization noise from the `noise` stream. On divergence the model
/// is rolled back to the last snapshot, which is also what gets written as
/// the checkpoint; the report carries the details.
pub fn train(model: &mut Cinn, data: &Dataset, config: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, data, config)?;
    let mut log = MetricsLog::open(outputs.metrics.as_deref())?;
    let start = Instant::now();

    let mut records = Vec::with_capacity(config.steps);
    let mut reference = None;
    let mut snapshot = Snapshot {
        step: 0,
        params: model.params().clone(),
        optimizer: trainer.adam.clone(),
    };
    let mut divergence = None;

    for step in 0..config.steps {
        if step % config.snapshot_every == 0 {
            snapshot = Snapshot {
                step,
                params: model.params().clone(),
                optimizer: trainer.adam.clone(),
            };
        }
        let (cml, nll) = trainer.step(model, data)?;
        if step + 1 == DIVERGENCE_REFERENCE_STEP {
            reference = Some(cml);
        }
        let record = StepRecord {
            step,
            cml,
            nll_nats_per_dim: nll,
            lr: config.lr_at(step),
            wall_ms: start.elapsed().as_millis(),
        };
        log.push(&record)?;
        records.push(record);
        if let Some(reason) = divergence_reason(step + 1, cml, reference) {
            divergence = Some(DivergenceReport {
                step,
                reason,
                restored_step: snapshot.step,
            });
            break;
        }
    }
    log.finish()?;

    let mut adam = trainer.adam;
    let final_step = match &divergence {
        Some(d) => {
            *model.params_mut() = snapshot.params;
            adam = snapshot.optimizer;
            d.restored_step
        }
        None => config.steps,
    };
    if let Some(path) = &outputs.checkpoint {
        save(path, model, Some(&adam), final_step as u64, Some(config))?;
    }
    Ok(TrainReport {
        records,
        divergence,
        optimizer: adam,
    })
}

/// One optimization step; returns the batch loss before the update.
fn step_once(model: &mut Cinn, adam: &mut AdamState, lr: f64, x: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    let mut g = Graph::new(model.params(), Mode::Train);
    let (loss, value) = model.loss_on(&mut g, x, y)?;
    let (tape, bn) = g.into_parts();
    let store = model.params_mut();
    tape.backward(loss, store)?;
    if store.iter().any(|(_, p)| p.trainable() && !p.grad().is_finite()) {
        store.zero_grads();
        return Err(Error::NonFinite { op: "gradient" });
    }
    apply_bn_updates(store, &bn);
    adam.lr = lr;
    adam.step(store)?;
    Ok((value.cml, value.nll_nats_per_dim))
}
