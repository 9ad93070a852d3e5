use crate::blocks::{SubnetKind, SubnetSpec};
use crate::conditioning::{ConditioningNetwork, ConditioningSpec, FeaturePyramid};
use crate::error::{Error, Result};
use crate::flow::{
    per_sample_loss, standard_normal_log_density, ArchSpec, DensityEval, FlowModel, FlowOutput, LossValue, StageSpec,
};
use crate::graph::{Graph, Mode};
use crate::numerics::{ParamStore, Tensor, Var};
use crate::rng::{normal_tensor, Rng, Seed};
use crate::wavelet::Downsampling;

/// A conditional INN: the invertible flow, its conditioning network, and
/// the parameters of both in one store.
#[derive(Clone, Debug)]
pub struct Cinn {
    arch: ArchSpec,
    params: ParamStore,
    cond: ConditioningNetwork,
    flow: FlowModel,
}

/// Largest batch evaluated in one graph by the batched helpers.
const EVAL_CHUNK: usize = 256;

impl Cinn {
    pub fn new(arch: ArchSpec, seed: Seed) -> Result<Self> {
        let mut rng = seed.stream("init");
        let mut params = ParamStore::new();
        let cond = ConditioningNetwork::new(&mut params, arch.conditioning.clone(), &mut rng)?;
        let flow = FlowModel::new(&mut params, &arch, &mut rng)?;
        Ok(Self {
            arch,
            params,
            cond,
            flow,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn conditioning(&self) -> &ConditioningNetwork {
        &self.cond
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.flow.input_shape()
    }

    pub fn condition_shape(&self) -> Vec<usize> {
        self.arch.conditioning.input_shape()
    }

    /// Overwrite every parameter value from named tensors, e.g. a
    /// checkpoint. The set of names and every shape must match exactly.
    pub(crate) fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Architecture {
                stage: format!("parameter count ({} vs {})", values.len(), self.params.len()),
            });
        }
        for (name, value) in values {
            let id = self.params.id(&name).ok_or_else(|| Error::Architecture {
                stage: format!("unknown parameter {name}"),
            })?;
            if self.params.value(id).shape() != value.shape() {
                return Err(Error::Architecture {
                    stage: format!("parameter {name} shape {:?}", value.shape()),
                });
            }
            self.params.set_value(id, value)?;
        }
        self.flow.reload_permutations(&self.params)
    }

    /// Flow forward pass on a graph bound to this model's store.
    pub fn forward_on(&self, g: &mut Graph<'_>, x: &Tensor, y: &Tensor) -> Result<(FlowOutput, FeaturePyramid)> {
        if x.batch() != y.batch() {
            return Err(Error::shape("batch", x.shape(), y.shape()));
        }
        let pyramid = self.cond.pyramid(g, y)?;
        let xv = g.constant(x.clone());
        let out = self.flow.forward(g, xv, &pyramid)?;
        Ok((out, pyramid))
    }

    /// Loss node for a batch (mean over samples) and its value.
    pub fn loss_on(&self, g: &mut Graph<'_>, x: &Tensor, y: &Tensor) -> Result<(Var, LossValue)> {
        if x.batch() == 0 {
            return Err(Error::contract("empty batch"));
        }
        let attempt = (|| {
            let (out, _) = self.forward_on(g, x, y)?;
            let per = per_sample_loss(g, &out)?;
            if let Some(i) = g.value(per).data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { index: i });
            }
            g.tape.mean(per)
        })();
        match attempt {
            Ok(loss) => {
                let value = LossValue::from_cml(g.value(loss).item(), self.dim());
                Ok((loss, value))
            }
            Err(Error::NonFinite { op }) => Err(self.locate_non_finite(x, y).unwrap_or(Error::NonFinite { op })),
            Err(e) => Err(e),
        }
    }

    /// Find the first sample whose loss cannot be evaluated on its own.
    fn locate_non_finite(&self, x: &Tensor, y: &Tensor) -> Option<Error> {
        (0..x.batch()).find_map(|i| {
            let mut g = Graph::new(&self.params, Mode::Eval);
            let ok = self
                .forward_on(&mut g, &x.sample(i), &y.sample(i))
                .and_then(|(out, _)| per_sample_loss(&mut g, &out))
                .map(|per| g.value(per).is_finite())
                .unwrap_or(false);
            (!ok).then_some(Error::NonFiniteLoss { index: i })
        })
    }

    /// Latent codes, log-determinants and log-densities (eval mode).
    pub fn density(&self, x: &Tensor, y: &Tensor) -> Result<DensityEval> {
        let mut zs = Vec::new();
        let mut lds = Vec::new();
        for start in (0..x.batch()).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(x.batch() - start);
            let mut g = Graph::new(&self.params, Mode::Eval);
            let (out, _) = self.forward_on(&mut g, &x.rows(start, len), &y.rows(start, len))?;
            zs.push(g.value(out.z).clone());
            lds.extend_from_slice(g.value(out.logdet).data());
        }
        let z = Tensor::stack_rows(&zs)?;
        let logdet = Tensor::from_vec(lds);
        let log_q = standard_normal_log_density(&z).add(&logdet)?;
        Ok(DensityEval { z, logdet, log_q })
    }

    /// Loss over a whole dataset in eval mode.
    pub fn evaluate(&self, x: &Tensor, y: &Tensor) -> Result<LossValue> {
        let d = self.density(x, y)?;
        let cml = (0..x.batch())
            .map(|i| {
                let z = &d.z.data()[i * self.dim()..(i + 1) * self.dim()];
                0.5 * z.iter().map(|v| v * v).sum::<f64>() - d.logdet.data()[i]
            })
            .sum::<f64>()
            / x.batch() as f64;
        if !cml.is_finite() {
            return Err(Error::NonFinite { op: "evaluate" });
        }
        Ok(LossValue::from_cml(cml, self.dim()))
    }

    /// `x = g(z; φ(y))` in eval mode; `z` is `[n, dim]`.
    pub fn inverse(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        if z.batch() != y.batch() {
            return Err(Error::shape("batch", z.shape(), y.shape()));
        }
        let mut xs = Vec::new();
        for start in (0..z.batch()).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(z.batch() - start);
            let mut g = Graph::new(&self.params, Mode::Eval);
            let pyramid = self.cond.pyramid(&mut g, &y.rows(start, len))?;
            let zv = g.constant(z.rows(start, len));
            let (x, _) = self.flow.inverse(&mut g, zv, &pyramid)?;
            xs.push(g.value(x).clone());
        }
        Tensor::stack_rows(&xs)
    }

    /// `n` samples for one condition (`y` has a leading axis of 1), drawn as
    /// `z ~ N(0, temperature²·I)`. Returns `[n, ...input shape]`.
    pub fn sample(&self, y: &Tensor, n: usize, temperature: f64, seed: Seed) -> Result<Tensor> {
        if n == 0 || temperature < 0.0 || !temperature.is_finite() {
            return Err(Error::contract(format!(
                "sampling needs n ≥ 1 and a finite temperature ≥ 0 (got n={n}, T={temperature})"
            )));
        }
        if y.batch() != 1 {
            return Err(Error::contract("sample takes a single condition"));
        }
        let ys = Tensor::stack(&vec![y.clone(); n])?;
        let z = normal_tensor(&[n, self.dim()], temperature, &mut seed.stream("sample"));
        self.inverse(&z, &ys)
    }

    /// Perturb every trainable parameter with `N(0, scale²)` noise and draw
    /// random positive running statistics. Used to test on non-trivial maps.
    pub fn randomize(&mut self, scale: f64, rng: &mut Rng) {
        use rand::Rng as _;
        let ids: Vec<_> = self.params.iter().map(|(id, p)| (id, p.trainable(), p.name().to_owned())).collect();
        for (id, trainable, name) in ids {
            let t = self.params.value_mut(id);
            if trainable {
                for v in t.data_mut() {
                    *v += scale * crate::rng::standard_normal(rng);
                }
            } else if name.ends_with("running_var") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
            } else if name.ends_with("running_mean") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
    }
}

/// Options for a flow on vector data.
#[derive(Clone, Debug)]
pub struct VectorArch {
    pub dim: usize,
    pub conditioning: ConditioningSpec,
    pub blocks: usize,
    pub hidden: usize,
    pub batch_norm: bool,
    pub permute: bool,
    pub clamp: bool,
}

impl VectorArch {
    pub fn build(&self) -> ArchSpec {
        let subnet = SubnetSpec {
            kind: SubnetKind::Dense,
            hidden: self.hidden,
            batch_norm: self.batch_norm,
        };
        let mut stages = Vec::new();
        for _ in 0..self.blocks {
            stages.push(StageSpec::Coupling { level: 0, subnet });
            if self.permute {
                stages.push(StageSpec::Permute);
            }
        }
        ArchSpec {
            input: vec![self.dim],
            conditioning: self.conditioning.clone(),
            stages,
            clamp: self.clamp,
        }
    }
}

/// Options for a multi-resolution image flow: convolutional couplings per
/// resolution level, a downsample and split between levels, then a flatten
/// and fully connected couplings on what remains.
#[derive(Clone, Debug)]
pub struct ImageArch {
    /// `[channels, h, w]` of `x`.
    pub input: [usize; 3],
    /// `[channels, h, w]` of the condition image.
    pub condition: [usize; 3],
    /// Coupling blocks per convolutional level; its length is the number of
    /// levels, with a downsample and split between consecutive levels.
    pub conv_blocks: Vec<usize>,
    pub dense_blocks: usize,
    pub conv_hidden: usize,
    pub dense_hidden: usize,
    pub cond_width: usize,
    pub batch_norm: bool,
    pub permute: bool,
    pub clamp: bool,
    pub downsampling: Downsampling,
    pub split: bool,
}

impl ImageArch {
    pub fn build(&self) -> ArchSpec {
        let conv = SubnetSpec {
            kind: SubnetKind::Conv,
            hidden: self.conv_hidden,
            batch_norm: self.batch_norm,
        };
        let dense = SubnetSpec {
            kind: SubnetKind::Dense,
            hidden: self.dense_hidden,
            batch_norm: self.batch_norm,
        };
        let mut stages = Vec::new();
        let levels = self.conv_blocks.len();
        for (level, &blocks) in self.conv_blocks.iter().enumerate() {
            if level > 0 {
                stages.push(StageSpec::Downsample { kind: self.downsampling });
                if self.split {
                    stages.push(StageSpec::Split);
                }
            }
            for _ in 0..blocks {
                stages.push(StageSpec::Coupling { level, subnet: conv });
                if self.permute {
                    stages.push(StageSpec::Permute);
                }
            }
        }
        let dense_width = (self.dense_blocks > 0).then_some(self.cond_width);
        if self.dense_blocks > 0 {
            stages.push(StageSpec::Flatten);
            for _ in 0..self.dense_blocks {
                stages.push(StageSpec::Coupling { level: levels, subnet: dense });
                if self.permute {
                    stages.push(StageSpec::Permute);
                }
            }
        }
        ArchSpec {
            input: self.input.to_vec(),
            conditioning: ConditioningSpec::Conv {
                input: self.condition,
                widths: vec![self.cond_width; levels],
                dense_width,
                batch_norm: self.batch_norm,
            },
            stages,
            clamp: self.clamp,
        }
    }
}
