use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{ParamId, ParamStore, Tensor, Var};
use crate::rng::{normal_tensor, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubnetKind {
    /// Fully connected layers on `[n, features]`.
    Dense,
    /// 3×3 same-padding convolutions on `[n, channels, h, w]`.
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub kind: SubnetKind,
    pub hidden: usize,
    pub batch_norm: bool,
}

#[derive(Clone, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    mean: ParamId,
    var: ParamId,
}

/// Three-layer network: two hidden layers with ReLU (and optional
/// normalization before each ReLU), then a zero-initialized output layer.
#[derive(Clone, Debug)]
pub struct Subnetwork {
    spec: SubnetSpec,
    in_channels: usize,
    out_channels: usize,
    layers: [Layer; 3],
    norms: Option<[Norm; 2]>,
}

impl Subnetwork {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: SubnetSpec,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || spec.hidden == 0 {
            return Err(Error::Config(format!(
                "{prefix}: subnetwork needs nonzero widths (in {in_channels}, hidden {}, out {out_channels})",
                spec.hidden
            )));
        }
        let widths = [
            (in_channels, spec.hidden),
            (spec.hidden, spec.hidden),
            (spec.hidden, out_channels),
        ];
        let mut layers = Vec::with_capacity(3);
        for (i, &(fan_in, fan_out)) in widths.iter().enumerate() {
            let last = i == 2;
            let (shape, receptive) = match spec.kind {
                SubnetKind::Dense => (vec![fan_in, fan_out], fan_in),
                SubnetKind::Conv => (vec![fan_out, fan_in, 3, 3], fan_in * 9),
            };
            let w = if last {
                Tensor::zeros(&shape)
            } else {
                normal_tensor(&shape, (2.0 / receptive as f64).sqrt(), rng)
            };
            layers.push(Layer {
                weight: store.add(format!("{prefix}.l{i}.weight"), w, true)?,
                bias: store.add(format!("{prefix}.l{i}.bias"), Tensor::zeros(&[fan_out]), true)?,
            });
        }
        let norms = if spec.batch_norm {
            let mut make = |i: usize| -> Result<Norm> {
                Ok(Norm {
                    mean: store.add(format!("{prefix}.bn{i}.running_mean"), Tensor::zeros(&[spec.hidden]), false)?,
                    var: store.add(format!("{prefix}.bn{i}.running_var"), Tensor::ones(&[spec.hidden]), false)?,
                })
            };
            Some([make(0)?, make(1)?])
        } else {
            None
        };
        let layers: [Layer; 3] = layers.try_into().expect("three layers");
        Ok(Self {
            spec,
            in_channels,
            out_channels,
            layers,
            norms,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Parameter ids of the output layer (weight, bias).
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.layers[2].weight, self.layers[2].bias)
    }

    fn affine(&self, g: &mut Graph<'_>, x: Var, layer: &Layer) -> Result<Var> {
        let w = g.param(layer.weight);
        let b = g.param(layer.bias);
        let y = match self.spec.kind {
            SubnetKind::Dense => g.tape.matmul(x, w)?,
            SubnetKind::Conv => g.tape.conv2d(x, w, 1, 1)?,
        };
        g.tape.add_bias(y, b)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let got = g.value(x).shape().get(1).copied().unwrap_or(0);
        if got != self.in_channels {
            return Err(Error::shape("subnetwork", g.value(x).shape(), &[self.in_channels]));
        }
        let mut h = x;
        for i in 0..2 {
            h = self.affine(g, h, &self.layers[i])?;
            if let Some(norms) = &self.norms {
                h = g.normalize(h, norms[i].mean, norms[i].var)?;
            }
            h = g.tape.relu(h)?;
        }
        self.affine(g, h, &self.layers[2])
    }
}
