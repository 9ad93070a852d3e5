//! Feed-forward conditioning network.
//!
//! Maps a raw condition `y` to a feature pyramid `c = {c⁽ᵏ⁾}`, one tensor per
//! resolution level of the flow, highest resolution first. The network is
//! never inverted, so it is unconstrained; it is trained jointly with the
//! flow through the same likelihood loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::numerics::{ParamId, ParamStore, Tensor, Var};
use crate::rng::{normal_tensor, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConditioningSpec {
    /// The condition vector itself at every level, e.g. a one-hot class label.
    Identity { width: usize },
    /// Two-hidden-layer MLP on a condition vector; the same features feed
    /// every level.
    Mlp { input: usize, hidden: usize, width: usize },
    /// Convolutional backbone on a `c×h×w` condition image. Level `k` has
    /// `widths[k]` channels at resolution `h/2ᵏ × w/2ᵏ`; an optional final
    /// dense level of `dense_width` features follows for flattened stages.
    Conv {
        input: [usize; 3],
        widths: Vec<usize>,
        dense_width: Option<usize>,
        batch_norm: bool,
    },
}

impl ConditioningSpec {
    /// Per-sample shape of the condition this network accepts.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ConditioningSpec::Identity { width } => vec![*width],
            ConditioningSpec::Mlp { input, .. } => vec![*input],
            ConditioningSpec::Conv { input, .. } => input.to_vec(),
        }
    }

    /// Per-sample shape of pyramid level `k`, if the network exports it.
    pub fn level_shape(&self, k: usize) -> Option<Vec<usize>> {
        match self {
            ConditioningSpec::Identity { width } | ConditioningSpec::Mlp { width, .. } => Some(vec![*width]),
            ConditioningSpec::Conv {
                input,
                widths,
                dense_width,
                ..
            } => {
                if k < widths.len() {
                    Some(vec![widths[k], input[1] >> k, input[2] >> k])
                } else if k == widths.len() {
                    dense_width.map(|d| vec![d])
                } else {
                    None
                }
            }
        }
    }

    pub fn num_levels(&self) -> Option<usize> {
        match self {
            ConditioningSpec::Conv { widths, dense_width, .. } => {
                Some(widths.len() + dense_width.is_some() as usize)
            }
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ConditioningSpec::Identity { width } if *width == 0 => {
                Err(Error::Config("identity conditioning needs a positive width".into()))
            }
            ConditioningSpec::Mlp { input, hidden, width } if *input == 0 || *hidden == 0 || *width == 0 => {
                Err(Error::Config("mlp conditioning needs positive widths".into()))
            }
            ConditioningSpec::Conv { input, widths, .. } => {
                if widths.is_empty() || widths.contains(&0) || input.contains(&0) {
                    return Err(Error::Config("conv conditioning needs at least one positive level width".into()));
                }
                let factor = 1usize << (widths.len() - 1);
                if input[1] % factor != 0 || input[2] % factor != 0 {
                    return Err(Error::Config(format!(
                        "condition {}×{} does not halve cleanly over {} levels",
                        input[1],
                        input[2],
                        widths.len()
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Init scale of output layers relative to He initialization. Small, so the
/// pyramid starts near zero, but not zero: an all-zero pyramid feeding a
/// subnetwork that sees nothing else would have no gradient at all.
pub const OUTPUT_GAIN: f64 = 0.01;

fn gain(output: bool) -> f64 {
    if output {
        OUTPUT_GAIN
    } else {
        1.0
    }
}

#[derive(Clone, Debug)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

impl Affine {
    fn dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, output: bool, rng: &mut Rng) -> Result<Self> {
        let w = normal_tensor(&[fan_in, fan_out], gain(output) * (2.0 / fan_in as f64).sqrt(), rng);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true)?,
        })
    }

    fn conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, output: bool, rng: &mut Rng) -> Result<Self> {
        let shape = [cout, cin, 3, 3];
        let w = normal_tensor(&shape, gain(output) * (2.0 / (9 * cin) as f64).sqrt(), rng);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w, true)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?,
        })
    }

    fn apply_dense(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.matmul(x, w)?;
        g.tape.add_bias(y, b)
    }

    fn apply_conv(&self, g: &mut Graph<'_>, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.conv2d(x, w, stride, 1)?;
        g.tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
struct ConvStage {
    trunk: Affine,
    norm: Option<(ParamId, ParamId)>,
    tap: Affine,
}

#[derive(Clone, Debug)]
enum Backbone {
    Identity,
    Mlp([Affine; 3]),
    Conv {
        stages: Vec<ConvStage>,
        dense: Option<[Affine; 2]>,
    },
}

/// Conditioning network `φ`.
#[derive(Clone, Debug)]
pub struct ConditioningNetwork {
    spec: ConditioningSpec,
    backbone: Backbone,
}

/// Per-level condition features for one batch, highest resolution first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<Var>,
    shared: bool,
}

impl FeaturePyramid {
    /// Condition for level `k`. Vector conditioning serves one tensor to
    /// every level.
    pub fn level(&self, k: usize) -> Option<Var> {
        if self.shared {
            self.levels.first().copied()
        } else {
            self.levels.get(k).copied()
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub const PREFIX: &str = "cond.";

impl ConditioningNetwork {
    pub fn new(store: &mut ParamStore, spec: ConditioningSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let backbone = match &spec {
            ConditioningSpec::Identity { .. } => Backbone::Identity,
            ConditioningSpec::Mlp { input, hidden, width } => Backbone::Mlp([
                Affine::dense(store, "cond.mlp.l0", *input, *hidden, false, rng)?,
                Affine::dense(store, "cond.mlp.l1", *hidden, *hidden, false, rng)?,
                Affine::dense(store, "cond.mlp.l2", *hidden, *width, true, rng)?,
            ]),
            ConditioningSpec::Conv {
                input,
                widths,
                dense_width,
                batch_norm,
            } => {
                let mut stages = Vec::with_capacity(widths.len());
                let mut cin = input[0];
                for (k, &w) in widths.iter().enumerate() {
                    let trunk = Affine::conv(store, &format!("cond.stage{k}.trunk"), cin, w, false, rng)?;
                    let norm = if *batch_norm && k > 0 {
                        Some((
                            store.add(format!("cond.stage{k}.bn.running_mean"), Tensor::zeros(&[w]), false)?,
                            store.add(format!("cond.stage{k}.bn.running_var"), Tensor::ones(&[w]), false)?,
                        ))
                    } else {
                        None
                    };
                    let tap = Affine::conv(store, &format!("cond.stage{k}.tap"), w, w, true, rng)?;
                    stages.push(ConvStage { trunk, norm, tap });
                    cin = w;
                }
                let dense = match dense_width {
                    Some(d) => {
                        let last = widths.len() - 1;
                        let flat = widths[last] * (input[1] >> last) * (input[2] >> last);
                        Some([
                            Affine::dense(store, "cond.dense.l0", flat, *d, false, rng)?,
                            Affine::dense(store, "cond.dense.l1", *d, *d, true, rng)?,
                        ])
                    }
                    None => None,
                };
                Backbone::Conv { stages, dense }
            }
        };
        Ok(Self { spec, backbone })
    }

    pub fn spec(&self) -> &ConditioningSpec {
        &self.spec
    }

    fn check_input(&self, y: &Tensor) -> Result<()> {
        let expected = self.spec.input_shape();
        if y.rank() != expected.len() + 1 || y.shape()[1..] != expected[..] {
            let mut want = vec![y.shape()[0]];
            want.extend(expected);
            return Err(Error::shape("condition", y.shape(), &want));
        }
        Ok(())
    }

    /// Build the pyramid on a graph so gradients reach the network.
    pub fn pyramid(&self, g: &mut Graph<'_>, y: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(y)?;
        let input = g.constant(y.clone());
        match &self.backbone {
            Backbone::Identity => Ok(FeaturePyramid {
                levels: vec![input],
                shared: true,
            }),
            Backbone::Mlp(layers) => {
                let mut h = input;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.apply_dense(g, h)?;
                    if i < 2 {
                        h = g.tape.relu(h)?;
                    }
                }
                Ok(FeaturePyramid {
                    levels: vec![h],
                    shared: true,
                })
            }
            Backbone::Conv { stages, dense } => {
                let mut levels = Vec::new();
                let mut h = input;
                for (k, stage) in stages.iter().enumerate() {
                    h = stage.trunk.apply_conv(g, h, if k == 0 { 1 } else { 2 })?;
                    if let Some((m, v)) = stage.norm {
                        h = g.normalize(h, m, v)?;
                    }
                    h = g.tape.relu(h)?;
                    levels.push(stage.tap.apply_conv(g, h, 1)?);
                }
                if let Some([l0, l1]) = dense {
                    let n = g.value(h).shape()[0];
                    let flat_len = g.value(h).per_sample();
                    let flat = g.tape.reshape(h, &[n, flat_len])?;
                    let d = l0.apply_dense(g, flat)?;
                    let d = g.tape.relu(d)?;
                    levels.push(l1.apply_dense(g, d)?);
                }
                Ok(FeaturePyramid { levels, shared: false })
            }
        }
    }

    /// Evaluate the pyramid outside of training, one tensor per level.
    pub fn build_pyramid(&self, store: &ParamStore, y: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(store, Mode::Eval);
        let p = self.pyramid(&mut g, y)?;
        Ok(p.levels.iter().map(|&v| g.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;

    #[test]
    fn conv_pyramid_shapes() {
        let mut store = ParamStore::new();
        let spec = ConditioningSpec::Conv {
            input: [1, 16, 16],
            widths: vec![4, 6, 8],
            dense_width: Some(5),
            batch_norm: true,
        };
        let net = ConditioningNetwork::new(&mut store, spec, &mut Seed(1).stream("init")).unwrap();
        let y = Tensor::ones(&[2, 1, 16, 16]);
        let levels = net.build_pyramid(&store, &y).unwrap();
        let shapes: Vec<_> = levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![2, 4, 16, 16], vec![2, 6, 8, 8], vec![2, 8, 4, 4], vec![2, 5]]
        );
        // near-zero taps at init
        assert!(levels.iter().all(|t| t.data().iter().all(|&v| v.abs() < 0.1)));
        assert!(levels.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn identity_replicates_one_hot() {
        let mut store = ParamStore::new();
        let net = ConditioningNetwork::new(&mut store, ConditioningSpec::Identity { width: 10 }, &mut Seed(1).stream("init")).unwrap();
        let mut y = Tensor::zeros(&[1, 10]);
        y.data_mut()[3] = 1.0;
        let levels = net.build_pyramid(&store, &y).unwrap();
        assert_eq!(levels, vec![y]);
        assert_eq!(net.spec().level_shape(5), Some(vec![10]));
        assert!(store.is_empty());
    }

    #[test]
    fn rejects_wrong_condition_shape() {
        let mut store = ParamStore::new();
        let spec = ConditioningSpec::Mlp { input: 3, hidden: 8, width: 4 };
        let net = ConditioningNetwork::new(&mut store, spec, &mut Seed(1).stream("init")).unwrap();
        assert!(matches!(
            net.build_pyramid(&store, &Tensor::zeros(&[2, 4])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rejects_non_halving_condition() {
        let mut store = ParamStore::new();
        let spec = ConditioningSpec::Conv {
            input: [1, 6, 6],
            widths: vec![2, 2, 2],
            dense_width: None,
            batch_norm: false,
        };
        assert!(ConditioningNetwork::new(&mut store, spec, &mut Seed(1).stream("init")).is_err());
    }
}
