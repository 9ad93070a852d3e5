//! Assembly of invertible stages into the full map `z = f(x; c)`.
//!
//! Stages run in order on a feature tensor whose per-sample shape is either
//! a vector `[d]` or an image `[c, h, w]`. Split stages route half of the
//! channels straight to the latent output. The latent vector is the
//! concatenation of every split-off part (flattened, in encounter order)
//! followed by the flattened output of the last stage, so `dim(z) == dim(x)`.

use serde::{Deserialize, Serialize};

use crate::blocks::{ChannelPermutation, CouplingBlock, Direction, SubnetKind, SubnetSpec};
use crate::conditioning::{ConditioningSpec, FeaturePyramid};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;
use crate::wavelet::Downsampling;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageSpec {
    /// Conditional coupling block fed by pyramid level `level`.
    Coupling { level: usize, subnet: SubnetSpec },
    /// Fixed random channel permutation.
    Permute,
    /// 2×2 orthogonal downsampling.
    Downsample { kind: Downsampling },
    /// Route the trailing half of the channels to the latent output.
    Split,
    /// Image features to a vector.
    Flatten,
}

/// Full architecture description; stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Per-sample shape of `x`.
    pub input: Vec<usize>,
    pub conditioning: ConditioningSpec,
    pub stages: Vec<StageSpec>,
    /// `s = γ·tanh(r)` when set, raw `s = r` otherwise.
    pub clamp: bool,
}

impl ArchSpec {
    /// Name of the first point where `self` and `other` disagree.
    pub fn first_difference(&self, other: &ArchSpec) -> Option<String> {
        if self.input != other.input {
            return Some(format!("input shape ({:?} vs {:?})", self.input, other.input));
        }
        if self.conditioning != other.conditioning {
            return Some("conditioning network".into());
        }
        if self.clamp != other.clamp {
            return Some("clamping setting".into());
        }
        for (i, (a, b)) in self.stages.iter().zip(&other.stages).enumerate() {
            if a != b {
                return Some(format!("stage {i} ({a:?} vs {b:?})"));
            }
        }
        if self.stages.len() != other.stages.len() {
            let i = self.stages.len().min(other.stages.len());
            return Some(format!(
                "stage {i} (stage count {} vs {})",
                self.stages.len(),
                other.stages.len()
            ));
        }
        None
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Coupling { block: CouplingBlock, level: usize },
    Permute { perm: ChannelPermutation },
    Downsample { kind: Downsampling },
    Split { keep: usize, off_shape: Vec<usize> },
    Flatten { shape: Vec<usize> },
}

/// The invertible part of the model.
#[derive(Clone, Debug)]
pub struct FlowModel {
    input: Vec<usize>,
    stages: Vec<Stage>,
    /// Per-sample shapes of the split-off parts, in encounter order.
    splits: Vec<Vec<usize>>,
    output: Vec<usize>,
    perm_tables: Vec<(usize, ParamId)>,
}

/// Result of the forward map on a batch.
pub struct FlowOutput {
    /// Latent codes, `[n, dim]`.
    pub z: Var,
    /// Per-sample `log|det ∂f/∂x|`, `[n]`.
    pub logdet: Var,
}

pub const PREFIX: &str = "flow.";

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl FlowModel {
    pub fn new(store: &mut ParamStore, arch: &ArchSpec, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;

        if arch.input.is_empty() || arch.input.contains(&0) || !(arch.input.len() == 1 || arch.input.len() == 3) {
            return Err(Error::Config(format!("unsupported input shape {:?}", arch.input)));
        }
        let mut shape = arch.input.clone();
        let mut stages = Vec::with_capacity(arch.stages.len());
        let mut splits = Vec::new();
        let mut perm_tables = Vec::new();
        for (i, spec) in arch.stages.iter().enumerate() {
            let name = format!("flow.stage{i}");
            let stage = match spec {
                StageSpec::Coupling { level, subnet } => {
                    let cond = arch.conditioning.level_shape(*level).ok_or_else(|| {
                        Error::Config(format!("stage {i}: conditioning has no pyramid level {level}"))
                    })?;
                    let expected_kind = if shape.len() == 3 { SubnetKind::Conv } else { SubnetKind::Dense };
                    if subnet.kind != expected_kind {
                        return Err(Error::Config(format!(
                            "stage {i}: {:?} subnetwork on features of shape {shape:?}",
                            subnet.kind
                        )));
                    }
                    if cond.len() != shape.len() || cond[1..] != shape[1..] {
                        return Err(Error::Config(format!(
                            "stage {i}: condition level {level} has shape {cond:?}, incompatible with features {shape:?}"
                        )));
                    }
                    let block = CouplingBlock::new(store, &name, shape[0], cond[0], *subnet, arch.clamp, rng)?;
                    Stage::Coupling { block, level: *level }
                }
                StageSpec::Permute => {
                    let perm = ChannelPermutation::random(shape[0], rng.random());
                    let table = Tensor::from_vec(perm.indices().iter().map(|&v| v as f64).collect());
                    let id = store.add(format!("{name}.perm"), table, false)?;
                    perm_tables.push((i, id));
                    Stage::Permute { perm }
                }
                StageSpec::Downsample { kind } => {
                    if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                        return Err(Error::Config(format!("stage {i}: cannot downsample features of shape {shape:?}")));
                    }
                    shape = vec![shape[0] * 4, shape[1] / 2, shape[2] / 2];
                    Stage::Downsample { kind: *kind }
                }
                StageSpec::Split => {
                    if shape[0] < 2 {
                        return Err(Error::Config(format!("stage {i}: cannot split {} channels", shape[0])));
                    }
                    let keep = shape[0].div_ceil(2);
                    let mut off_shape = shape.clone();
                    off_shape[0] = shape[0] - keep;
                    splits.push(off_shape.clone());
                    shape[0] = keep;
                    Stage::Split { keep, off_shape }
                }
                StageSpec::Flatten => {
                    if shape.len() != 3 {
                        return Err(Error::Config(format!("stage {i}: features are already flat")));
                    }
                    let before = shape.clone();
                    shape = vec![numel(&shape)];
                    Stage::Flatten { shape: before }
                }
            };
            stages.push(stage);
        }
        let flow = Self {
            input: arch.input.clone(),
            stages,
            splits,
            output: shape,
            perm_tables,
        };
        let latent = flow.splits.iter().map(|s| numel(s)).sum::<usize>() + numel(&flow.output);
        if latent != numel(&flow.input) {
            return Err(Error::Config(format!(
                "latent dimension {latent} differs from input dimension {}",
                numel(&flow.input)
            )));
        }
        Ok(flow)
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    /// `dim(x) == dim(z)`.
    pub fn dim(&self) -> usize {
        numel(&self.input)
    }

    pub fn coupling_blocks(&self) -> impl Iterator<Item = &CouplingBlock> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Coupling { block, .. } => Some(block),
            _ => None,
        })
    }

    /// Re-read permutation tables after parameters were replaced.
    pub(crate) fn reload_permutations(&mut self, store: &ParamStore) -> Result<()> {
        for &(stage, id) in &self.perm_tables {
            let table = store.value(id);
            let idx: Vec<usize> = table
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::contract(format!("invalid permutation entry {v}")))
                    }
                })
                .collect::<Result<_>>()?;
            if let Stage::Permute { perm } = &mut self.stages[stage] {
                let seed = perm.seed();
                *perm = ChannelPermutation::from_indices(idx, seed)?;
            }
        }
        Ok(())
    }

    fn check_batch(&self, g: &Graph<'_>, x: Var, per_sample: &[usize], what: &'static str) -> Result<usize> {
        let s = g.value(x).shape();
        if s.len() != per_sample.len() + 1 || s[1..] != *per_sample {
            let mut want = vec![s.first().copied().unwrap_or(0)];
            want.extend_from_slice(per_sample);
            return Err(Error::shape(what, s, &want));
        }
        Ok(s[0])
    }

    fn condition(pyramid: &FeaturePyramid, level: usize) -> Result<Var> {
        pyramid
            .level(level)
            .ok_or_else(|| Error::contract(format!("feature pyramid has no level {level}")))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pyramid: &FeaturePyramid) -> Result<FlowOutput> {
        let n = self.check_batch(g, x, &self.input, "flow input")?;
        let mut h = x;
        let mut logdet: Option<Var> = None;
        let mut parts = Vec::with_capacity(self.splits.len() + 1);
        for stage in &self.stages {
            match stage {
                Stage::Coupling { block, level } => {
                    let c = Self::condition(pyramid, *level)?;
                    let out = block.forward(g, h, Some(c))?;
                    h = out.out;
                    logdet = Some(match logdet {
                        Some(acc) => g.tape.add(acc, out.logdet)?,
                        None => out.logdet,
                    });
                }
                Stage::Permute { perm } => h = perm.apply(g, h, Direction::Forward)?,
                Stage::Downsample { kind } => h = g.tape.resample(h, *kind, true)?,
                Stage::Split { keep, off_shape } => {
                    let off = g.tape.narrow(h, *keep, off_shape[0])?;
                    parts.push(g.tape.reshape(off, &[n, numel(off_shape)])?);
                    h = g.tape.narrow(h, 0, *keep)?;
                }
                Stage::Flatten { shape } => h = g.tape.reshape(h, &[n, numel(shape)])?,
            }
        }
        parts.push(g.tape.reshape(h, &[n, numel(&self.output)])?);
        let z = if parts.len() == 1 { parts[0] } else { g.tape.concat(&parts)? };
        let logdet = match logdet {
            Some(l) => l,
            None => g.constant(Tensor::zeros(&[n])),
        };
        Ok(FlowOutput { z, logdet })
    }

    /// `x = g(z; c)`; also returns the per-sample log-determinant of the
    /// inverse map.
    pub fn inverse(&self, g: &mut Graph<'_>, z: Var, pyramid: &FeaturePyramid) -> Result<(Var, Var)> {
        let n = self.check_batch(g, z, &[self.dim()], "latent")?;
        let mut offsets = Vec::with_capacity(self.splits.len());
        let mut offset = 0;
        for s in &self.splits {
            offsets.push(offset);
            offset += numel(s);
        }
        let tail = g.tape.narrow(z, offset, numel(&self.output))?;
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&self.output);
        let mut h = g.tape.reshape(tail, &out_shape)?;
        let mut split_idx = self.splits.len();
        let mut logdet: Option<Var> = None;
        for stage in self.stages.iter().rev() {
            match stage {
                Stage::Coupling { block, level } => {
                    let c = Self::condition(pyramid, *level)?;
                    let out = block.inverse(g, h, Some(c))?;
                    h = out.out;
                    logdet = Some(match logdet {
                        Some(acc) => g.tape.add(acc, out.logdet)?,
                        None => out.logdet,
                    });
                }
                Stage::Permute { perm } => h = perm.apply(g, h, Direction::Inverse)?,
                Stage::Downsample { kind } => h = g.tape.resample(h, *kind, false)?,
                Stage::Split { off_shape, .. } => {
                    split_idx -= 1;
                    let part = g.tape.narrow(z, offsets[split_idx], numel(off_shape))?;
                    let mut shape = vec![n];
                    shape.extend_from_slice(off_shape);
                    let part = g.tape.reshape(part, &shape)?;
                    h = g.tape.concat(&[h, part])?;
                }
                Stage::Flatten { shape } => {
                    let mut full = vec![n];
                    full.extend_from_slice(shape);
                    h = g.tape.reshape(h, &full)?;
                }
            }
        }
        let logdet = match logdet {
            Some(l) => l,
            None => g.constant(Tensor::zeros(&[n])),
        };
        Ok((h, logdet))
    }
}

/// Exact conditional log-density of a batch.
#[derive(Clone, Debug)]
pub struct DensityEval {
    /// `[n, dim]`
    pub z: Tensor,
    /// `[n]`
    pub logdet: Tensor,
    /// `log q(x | c) = log N(z; 0, I) + logdet`, `[n]`
    pub log_q: Tensor,
}

/// `log N(z; 0, I)` per row of `z`.
pub fn standard_normal_log_density(z: &Tensor) -> Tensor {
    let d = z.per_sample();
    let rows: Vec<f64> = z
        .data()
        .chunks(d)
        .map(|r| -0.5 * r.iter().map(|v| v * v).sum::<f64>() - 0.5 * d as f64 * LN_2PI)
        .collect();
    Tensor::from_parts(vec![z.batch()], rows)
}

/// Conditional maximum-likelihood loss of a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    /// Batch mean of `‖z‖²/2 − log|J|` (constants dropped).
    pub cml: f64,
    /// `(cml + (d/2)·ln 2π) / d`, the negative log-likelihood per dimension.
    pub nll_nats_per_dim: f64,
}

impl LossValue {
    pub fn from_cml(cml: f64, dim: usize) -> Self {
        let d = dim as f64;
        Self {
            cml,
            nll_nats_per_dim: (cml + 0.5 * d * LN_2PI) / d,
        }
    }
}

/// Per-sample loss terms `‖z_i‖²/2 − log|J_i|` on the tape, `[n]`.
pub fn per_sample_loss(g: &mut Graph<'_>, out: &FlowOutput) -> Result<Var> {
    let sq = g.tape.square(out.z)?;
    let energy = g.tape.sum_per_sample(sq)?;
    let half = g.tape.scale(energy, 0.5)?;
    g.tape.sub(half, out.logdet)
}
