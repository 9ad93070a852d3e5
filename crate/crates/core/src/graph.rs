use crate::error::Result;
use crate::numerics::{BatchStats, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running statistics updated.
    Train,
    /// Stored running statistics; the pass is a fixed function of its input.
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running-statistics update recorded during a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// One forward pass: a tape bound to a parameter store and a mode.
pub struct Graph<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    pub mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Channel normalization per the current mode.
    pub fn normalize(&mut self, x: Var, mean: ParamId, var: ParamId) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, BN_EPS)?;
                self.bn_updates.push(BnUpdate { mean, var, stats });
                Ok(y)
            }
            Mode::Eval => {
                let m = self.store.value(mean);
                let v = self.store.value(var);
                let shift = Tensor::from_fn(m.shape(), |c| -m.data()[c]);
                let inv = Tensor::from_fn(v.shape(), |c| 1.0 / (v.data()[c] + BN_EPS).sqrt());
                let shift = self.tape.constant(shift);
                let inv = self.tape.constant(inv);
                let centered = self.tape.add_bias(x, shift)?;
                self.tape.mul_channel(centered, inv)
            }
        }
    }

    pub fn into_parts(self) -> (Tape, Vec<BnUpdate>) {
        (self.tape, self.bn_updates)
    }
}

/// Fold recorded batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = store.value_mut(u.mean);
        for (r, b) in m.data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let v = store.value_mut(u.var);
        for (r, b) in v.data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}
