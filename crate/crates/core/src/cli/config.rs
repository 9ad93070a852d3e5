//! Run configuration files: `key = value` lines grouped under `[section]`
//! headers, `#` comments. Every key must be known to its section.
//!
//! ```text
//! [task]      kind, samples, seed, a, sigma, y_dim, modes
//! [data]      x, y                      (tensor files; replaces [task])
//! [model]     seed, blocks, hidden, batch_norm, conditioning, cond_hidden,
//!             cond_width, conv_blocks, dense_blocks, conv_hidden,
//!             dense_hidden, split
//! [train]     batch_size, steps, lr, milestones, weight_decay,
//!             noise_fraction, data_range, noise, permutations, clamping,
//!             wavelet, freeze_conditioning, snapshot_every, seed, metrics
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::conditioning::ConditioningSpec;
use crate::error::{Error, Result};
use crate::flow::ArchSpec;
use crate::model::{ImageArch, VectorArch};
use crate::training::{Ablation, TrainConfig};
use crate::wavelet::Downsampling;

use super::tasks::{Mixture, ToyTask, ToyTaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditioningKind {
    /// The condition vector is used as-is at every level.
    Identity,
    Mlp,
}

/// Architecture knobs; which ones apply depends on the data rank.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub blocks: usize,
    pub hidden: usize,
    pub batch_norm: Option<bool>,
    pub conditioning: ConditioningKind,
    pub cond_hidden: usize,
    pub cond_width: usize,
    pub conv_blocks: Vec<usize>,
    pub dense_blocks: usize,
    pub conv_hidden: usize,
    pub dense_hidden: usize,
    pub split: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            blocks: 8,
            hidden: 64,
            batch_norm: None,
            conditioning: ConditioningKind::Mlp,
            cond_hidden: 32,
            cond_width: 8,
            conv_blocks: vec![2, 2, 2],
            dense_blocks: 2,
            conv_hidden: 16,
            dense_hidden: 128,
            split: true,
        }
    }
}

impl ModelConfig {
    /// Architecture for per-sample shapes `x` and `y`; architectural
    /// ablation switches are applied here.
    pub fn arch(&self, x: &[usize], y: &[usize], ablation: &Ablation) -> Result<ArchSpec> {
        match (x, y) {
            ([dim], [cond]) => {
                let conditioning = match self.conditioning {
                    ConditioningKind::Identity => ConditioningSpec::Identity { width: *cond },
                    ConditioningKind::Mlp => ConditioningSpec::Mlp {
                        input: *cond,
                        hidden: self.cond_hidden,
                        width: self.cond_width,
                    },
                };
                let mut a = VectorArch {
                    dim: *dim,
                    conditioning,
                    blocks: self.blocks,
                    hidden: self.hidden,
                    batch_norm: self.batch_norm.unwrap_or(false),
                    permute: *dim > 1,
                    clamp: true,
                };
                ablation.apply_vector(&mut a);
                Ok(a.build())
            }
            (&[c, h, w], &[cc, ch, cw]) => {
                let mut a = ImageArch {
                    input: [c, h, w],
                    condition: [cc, ch, cw],
                    conv_blocks: self.conv_blocks.clone(),
                    dense_blocks: self.dense_blocks,
                    conv_hidden: self.conv_hidden,
                    dense_hidden: self.dense_hidden,
                    cond_width: self.cond_width,
                    batch_norm: self.batch_norm.unwrap_or(true),
                    permute: true,
                    clamp: true,
                    downsampling: Downsampling::Haar,
                    split: self.split,
                };
                ablation.apply_image(&mut a);
                Ok(a.build())
            }
            _ => Err(Error::Config(format!(
                "no architecture for x of shape {x:?} with condition of shape {y:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Task(ToyTaskSpec),
    Files { x: PathBuf, y: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: Option<PathBuf>,
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

/// Parsed `section → key → value` table that tracks which keys were read.
struct Table {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_owned();
                if !["task", "data", "model", "train"].contains(&name.as_str()) {
                    return Err(Error::Config(format!("line {line_no}: unknown section [{name}]")));
                }
                if sections.contains_key(&name) {
                    return Err(Error::Config(format!("line {line_no}: section [{name}] repeated")));
                }
                sections.insert(name.clone(), BTreeMap::new());
                current = Some(name);
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`")));
            };
            let Some(section) = &current else {
                return Err(Error::Config(format!("line {line_no}: key outside of any section")));
            };
            let key = k.trim().to_owned();
            let map = sections.get_mut(section).expect("section inserted");
            if map.contains_key(&key) {
                return Err(Error::Config(format!("line {line_no}: key `{key}` repeated")));
            }
            map.insert(
                key,
                Entry {
                    line: line_no,
                    value: v.trim().to_owned(),
                    used: false,
                },
            );
        }
        Ok(Self { sections })
    }

    fn has(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<(usize, String)> {
        let e = self.sections.get_mut(section)?.get_mut(key)?;
        e.used = true;
        Some((e.line, e.value.clone()))
    }

    fn get<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!("line {line}: cannot parse `{v}` for [{section}] {key}"))
            }),
        }
    }

    fn set<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(section, key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list(&mut self, section: &str, key: &str) -> Result<Option<Vec<usize>>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((_, v)) if v.is_empty() => Ok(Some(Vec::new())),
            Some((line, v)) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("line {line}: bad list entry `{p}` for [{section}] {key}")))
                })
                .collect::<Result<_>>()
                .map(Some),
        }
    }

    fn finish(self) -> Result<()> {
        for (section, keys) in &self.sections {
            if let Some((k, e)) = keys.iter().find(|(_, e)| !e.used) {
                return Err(Error::Config(format!("line {}: unknown key `{k}` in [{section}]", e.line)));
            }
        }
        Ok(())
    }
}

fn parse_task(t: &mut Table) -> Result<ToyTaskSpec> {
    let kind: String = t
        .get("task", "kind")?
        .ok_or_else(|| Error::Config("[task] needs a `kind`".into()))?;
    let task = match task_preset(&kind)? {
        ToyTask::AffineGaussian { mut a, mut sigma, mut y_dim } => {
            t.set("task", "a", &mut a)?;
            t.set("task", "sigma", &mut sigma)?;
            t.set("task", "y_dim", &mut y_dim)?;
            ToyTask::AffineGaussian { a, sigma, y_dim }
        }
        ToyTask::ConditionalMixture(m) => match t.get::<usize>("task", "modes")? {
            None => ToyTask::ConditionalMixture(m),
            Some(2) => ToyTask::ConditionalMixture(Mixture::two_mode()),
            Some(8) => ToyTask::ConditionalMixture(Mixture::eight_mode()),
            Some(m) => return Err(Error::Config(format!("mixture presets have 2 or 8 modes, not {m}"))),
        },
        other => other,
    };
    let spec = ToyTaskSpec {
        task,
        seed: t.get("task", "seed")?.unwrap_or(0),
        samples: t.get("task", "samples")?.unwrap_or(2000),
    };
    spec.task.validate()?;
    Ok(spec)
}

/// Toy task by name: `affine-gaussian`, `conditional-mixture` (2 modes),
/// `conditional-mixture-8`, `toy-colorization` or `digits`.
pub fn task_preset(name: &str) -> Result<ToyTask> {
    Ok(match name {
        "affine-gaussian" => ToyTask::affine_gaussian(),
        "conditional-mixture" | "conditional-mixture-2" => ToyTask::ConditionalMixture(Mixture::two_mode()),
        "conditional-mixture-8" => ToyTask::ConditionalMixture(Mixture::eight_mode()),
        "toy-colorization" => ToyTask::ToyColorization,
        "digits" => ToyTask::Digits,
        other => return Err(Error::Config(format!("unknown task kind `{other}`"))),
    })
}

/// Parse a run configuration.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut t = Table::parse(text)?;
    let data = match (t.has("task"), t.has("data")) {
        (true, false) => DataSource::Task(parse_task(&mut t)?),
        (false, true) => DataSource::Files {
            x: t.get::<String>("data", "x")?
                .ok_or_else(|| Error::Config("[data] needs `x`".into()))?
                .into(),
            y: t.get::<String>("data", "y")?
                .ok_or_else(|| Error::Config("[data] needs `y`".into()))?
                .into(),
        },
        _ => return Err(Error::Config("exactly one of [task] or [data] is required".into())),
    };

    let mut model = ModelConfig::default();
    t.set("model", "seed", &mut model.seed)?;
    t.set("model", "blocks", &mut model.blocks)?;
    t.set("model", "hidden", &mut model.hidden)?;
    model.batch_norm = t.get("model", "batch_norm")?;
    if let Some(kind) = t.get::<String>("model", "conditioning")? {
        model.conditioning = match kind.as_str() {
            "identity" => ConditioningKind::Identity,
            "mlp" => ConditioningKind::Mlp,
            other => return Err(Error::Config(format!("unknown conditioning `{other}`"))),
        };
    }
    t.set("model", "cond_hidden", &mut model.cond_hidden)?;
    t.set("model", "cond_width", &mut model.cond_width)?;
    if let Some(l) = t.list("model", "conv_blocks")? {
        model.conv_blocks = l;
    }
    t.set("model", "dense_blocks", &mut model.dense_blocks)?;
    t.set("model", "conv_hidden", &mut model.conv_hidden)?;
    t.set("model", "dense_hidden", &mut model.dense_hidden)?;
    t.set("model", "split", &mut model.split)?;

    let mut train = TrainConfig::default();
    let s = "train";
    t.set(s, "batch_size", &mut train.batch_size)?;
    t.set(s, "steps", &mut train.steps)?;
    t.set(s, "lr", &mut train.lr)?;
    if let Some(l) = t.list(s, "milestones")? {
        train.milestones = l;
    }
    t.set(s, "weight_decay", &mut train.weight_decay)?;
    t.set(s, "noise_fraction", &mut train.noise_fraction)?;
    t.set(s, "data_range", &mut train.data_range)?;
    t.set(s, "noise", &mut train.ablation.noise)?;
    t.set(s, "permutations", &mut train.ablation.permutations)?;
    t.set(s, "clamping", &mut train.ablation.clamping)?;
    t.set(s, "wavelet", &mut train.ablation.wavelet)?;
    t.set(s, "freeze_conditioning", &mut train.freeze_conditioning)?;
    t.set(s, "snapshot_every", &mut train.snapshot_every)?;
    t.set(s, "seed", &mut train.seed)?;
    let metrics = t.get::<String>(s, "metrics")?.map(PathBuf::from);
    t.finish()?;
    train.validate()?;
    Ok(RunConfig {
        data,
        model,
        train,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "
        # affine toy run
        [task]
        kind = affine-gaussian
        samples = 500
        sigma = 0.3

        [model]
        blocks = 2
        conditioning = mlp

        [train]
        steps = 300
        milestones = 100, 200
        clamping = false
    ";

    #[test]
    fn parses_sections_and_defaults() {
        let c = parse_run_config(EXAMPLE).unwrap();
        assert_eq!(c.train.milestones, vec![100, 200]);
        assert!(!c.train.ablation.clamping && c.train.ablation.noise);
        assert_eq!(c.model.blocks, 2);
        match c.data {
            DataSource::Task(t) => assert_eq!(t.samples, 500),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = format!("{EXAMPLE}\nlearning_rate = 0.1\n");
        let err = parse_run_config(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_values_are_errors() {
        for text in [
            "[task]\nkind = nope\n",
            "[task]\nkind = digits\n[train]\nlr = fast\n",
            "[task]\nkind = digits\n[train]\nsteps = 10\nmilestones = 5, 3\n",
            "[task]\nkind = digits\n[bogus]\n",
            "kind = digits\n",
            "[model]\nblocks = 2\n",
        ] {
            assert!(matches!(parse_run_config(text), Err(Error::Config(_))), "{text}");
        }
    }
}
