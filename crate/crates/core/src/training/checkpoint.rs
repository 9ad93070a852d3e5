//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "CINN" | u32 version | u32 len | header JSON (arch, step, config)
//! u32 count | count × record
//! record = u32 len | UTF-8 name | u32 rank | rank × u32 dim | f64 payload
//! ```
//!
//! Optimizer state is stored as extra records named `adam.*`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::flow::ArchSpec;
use crate::model::Cinn;
use crate::numerics::{AdamState, Tensor};
use crate::rng::Seed;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CINN";
const ADAM_PREFIX: &str = "adam.";

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    step: u64,
    config: Option<TrainConfig>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: ArchSpec,
    pub step: u64,
    pub config: Option<TrainConfig>,
    /// Model parameters in file order.
    pub params: Vec<(String, Tensor)>,
    /// `adam.*` records, if any.
    optimizer: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Rebuild the model the checkpoint was written from.
    pub fn model(&self) -> Result<Cinn> {
        let mut model = Cinn::new(self.arch.clone(), Seed(0))?;
        model.load_values(self.params.clone())?;
        Ok(model)
    }

    /// Optimizer state aligned with `model`'s parameter slots.
    pub fn optimizer(&self, model: &Cinn) -> Result<Option<AdamState>> {
        if self.optimizer.is_empty() {
            return Ok(None);
        }
        let find = |name: &str| self.optimizer.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let hyper = find("adam.hyper").ok_or_else(|| Error::contract("checkpoint lacks adam.hyper"))?;
        let h = hyper.data();
        if h.len() != 6 {
            return Err(Error::contract("adam.hyper must hold 6 values"));
        }
        let mut adam = AdamState::new(h[0], h[4]);
        adam.beta1 = h[1];
        adam.beta2 = h[2];
        adam.eps = h[3];
        let moments = model
            .params()
            .iter()
            .map(|(_, p)| {
                match (find(&format!("adam.m.{}", p.name())), find(&format!("adam.v.{}", p.name()))) {
                    (Some(m), Some(v)) => Some((m.clone(), v.clone())),
                    _ => None,
                }
            })
            .collect();
        adam.restore(h[5] as u64, moments);
        Ok(Some(adam))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_len(buf: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| Error::contract(format!("length {n} exceeds u32")))?;
    put_u32(buf, v);
    Ok(())
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_len(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_len(buf, t.rank())?;
    for &d in t.shape() {
        put_len(buf, d)?;
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialize a model (and optionally optimizer state) to bytes.
pub fn encode(model: &Cinn, optimizer: Option<&AdamState>, step: u64, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch().clone(),
        step,
        config: config.cloned(),
    })
    .map_err(|e| Error::contract(format!("header encoding: {e}")))?;
    let mut records: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|(_, p)| (p.name().to_owned(), p.value().clone()))
        .collect();
    if let Some(adam) = optimizer {
        records.push((
            "adam.hyper".into(),
            Tensor::from_vec(vec![
                adam.lr,
                adam.beta1,
                adam.beta2,
                adam.eps,
                adam.weight_decay,
                adam.steps() as f64,
            ]),
        ));
        for (id, p) in model.params().iter() {
            if let Some((m, v)) = adam.moments(id.index()) {
                records.push((format!("adam.m.{}", p.name()), m.clone()));
                records.push((format!("adam.v.{}", p.name()), v.clone()));
            }
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_len(&mut buf, header.len())?;
    buf.extend_from_slice(&header);
    put_len(&mut buf, records.len())?;
    for (name, t) in &records {
        put_record(&mut buf, name, t)?;
    }
    Ok(buf)
}

/// Write a checkpoint; the file is replaced atomically via a rename.
pub fn save(
    path: &Path,
    model: &Cinn,
    optimizer: Option<&AdamState>,
    step: u64,
    config: Option<&TrainConfig>,
) -> Result<()> {
    let bytes = encode(model, optimizer, step, config)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
}

/// Parse checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a checkpoint");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = r.len("header length")?;
    let header_at = r.pos;
    let header_bytes = r.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Parse {
        offset: header_at as u64,
        message: format!("header: {e}"),
    })?;
    let count = r.len("record count")?;
    let mut params = Vec::new();
    let mut optimizer = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.len("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Parse {
                offset: name_at as u64,
                message: "record name is not UTF-8".into(),
            })?
            .to_owned();
        if !seen.insert(name.clone()) {
            r.pos = name_at;
            return r.fail(format!("duplicate record {name}"));
        }
        let rank = r.len("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(numel) = numel.filter(|&n| n > 0 && rank > 0) else {
            return r.fail(format!("record {name} has invalid shape {shape:?}"));
        };
        let Some(nbytes) = numel.checked_mul(8) else {
            return r.fail(format!("record {name} is too large"));
        };
        let payload = r.take(nbytes, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)?;
        if name.starts_with(ADAM_PREFIX) {
            optimizer.push((name, t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last record");
    }
    Ok(Checkpoint {
        version,
        arch: header.arch,
        step: header.step,
        config: header.config,
        params,
        optimizer,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Load parameters into an existing model whose architecture must match.
pub fn load_into(path: &Path, model: &mut Cinn) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if let Some(stage) = model.arch().first_difference(&ckpt.arch) {
        return Err(Error::Architecture { stage });
    }
    model.load_values(ckpt.params.clone())?;
    Ok(ckpt)
}
