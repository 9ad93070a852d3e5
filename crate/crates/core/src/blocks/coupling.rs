use crate::blocks::subnet::{SubnetSpec, Subnetwork};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// Initial value of the per-channel scale bound `γ`.
pub const GAMMA_INIT: f64 = 0.1;

/// Conditional affine coupling block.
///
/// The input channels are split into `[u1, u2]` and transformed as
///
/// ```text
/// v1 = u1 ⊙ exp(s1(u2, c)) + t1(u2, c)
/// v2 = u2 ⊙ exp(s2(v1, c)) + t2(v1, c)
/// ```
///
/// where each `(s_j, t_j)` pair comes from one subnetwork and, with clamping,
/// `s_j = γ_j · tanh(r_j)` for the raw subnetwork output `r_j`. The
/// subnetworks only ever run forward; inversion solves the two affine maps
/// in reverse order. `log|det J|` is the sum of all `s` entries.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    len1: usize,
    len2: usize,
    cond_channels: usize,
    clamp: bool,
    net1: Subnetwork,
    net2: Option<Subnetwork>,
    gamma1: ParamId,
    gamma2: Option<ParamId>,
}

/// Output of one coupling pass.
pub struct CouplingOutput {
    pub out: Var,
    /// Per-sample `log|det|`, shape `[n]`.
    pub logdet: Var,
}

impl CouplingBlock {
    /// Block over `channels` features (split ceil/floor) conditioned on
    /// `cond_channels` condition features.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        subnet: SubnetSpec,
        clamp: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let len1 = channels.div_ceil(2);
        let len2 = channels - len1;
        if channels == 0 || (len2 == 0 && cond_channels == 0) {
            return Err(Error::Config(format!(
                "{prefix}: coupling over {channels} channels with {cond_channels} condition channels has nothing to condition on"
            )));
        }
        let net1 = Subnetwork::new(store, &format!("{prefix}.net1"), subnet, len2 + cond_channels, 2 * len1, rng)?;
        let gamma1 = store.add(format!("{prefix}.gamma1"), Tensor::full(&[len1], GAMMA_INIT), true)?;
        let (net2, gamma2) = if len2 > 0 {
            (
                Some(Subnetwork::new(store, &format!("{prefix}.net2"), subnet, len1 + cond_channels, 2 * len2, rng)?),
                Some(store.add(format!("{prefix}.gamma2"), Tensor::full(&[len2], GAMMA_INIT), true)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            len1,
            len2,
            cond_channels,
            clamp,
            net1,
            net2,
            gamma1,
            gamma2,
        })
    }

    pub fn split(&self) -> (usize, usize) {
        (self.len1, self.len2)
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    pub fn clamped(&self) -> bool {
        self.clamp
    }

    pub fn subnetworks(&self) -> impl Iterator<Item = &Subnetwork> {
        std::iter::once(&self.net1).chain(self.net2.as_ref())
    }

    pub fn gammas(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.gamma1).chain(self.gamma2)
    }

    fn check_shapes(&self, g: &Graph<'_>, x: Var, c: Option<Var>) -> Result<()> {
        let xs = g.value(x).shape();
        if xs.len() < 2 || xs[1] != self.len1 + self.len2 {
            return Err(Error::shape("coupling input", xs, &[self.len1 + self.len2]));
        }
        match c {
            None if self.cond_channels == 0 => Ok(()),
            None => Err(Error::contract("coupling block expects a condition")),
            Some(c) => {
                let cs = g.value(c).shape();
                let ok = cs.len() == xs.len()
                    && cs[0] == xs[0]
                    && cs[1] == self.cond_channels
                    && cs[2..] == xs[2..];
                if ok {
                    Ok(())
                } else {
                    Err(Error::shape("coupling condition", cs, xs))
                }
            }
        }
    }

    /// Concatenate the available parts along the feature axis.
    fn join(g: &mut Graph<'_>, half: Option<Var>, c: Option<Var>) -> Result<Var> {
        match (half, c) {
            (Some(h), Some(c)) => g.tape.concat(&[h, c]),
            (Some(h), None) => Ok(h),
            (None, Some(c)) => Ok(c),
            (None, None) => unreachable!("rejected at construction"),
        }
    }

    /// Run a subnetwork and return `(s, t)`.
    fn scale_shift(
        &self,
        g: &mut Graph<'_>,
        net: &Subnetwork,
        gamma: ParamId,
        len: usize,
        input: Var,
    ) -> Result<(Var, Var)> {
        let h = net.forward(g, input)?;
        let r = g.tape.narrow(h, 0, len)?;
        let t = g.tape.narrow(h, len, len)?;
        let s = if self.clamp {
            let squashed = g.tape.tanh(r)?;
            let gm = g.param(gamma);
            g.tape.mul_channel(squashed, gm)?
        } else {
            r
        };
        Ok((s, t))
    }

    fn affine(g: &mut Graph<'_>, x: Var, s: Var, t: Var) -> Result<Var> {
        let e = g.tape.exp(s)?;
        let scaled = g.tape.mul(x, e)?;
        g.tape.add(scaled, t)
    }

    fn affine_inv(g: &mut Graph<'_>, y: Var, s: Var, t: Var) -> Result<Var> {
        let neg = g.tape.scale(s, -1.0)?;
        let e = g.tape.exp(neg)?;
        let shifted = g.tape.sub(y, t)?;
        g.tape.mul(shifted, e)
    }

    fn halves(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Option<Var>)> {
        let a = g.tape.narrow(x, 0, self.len1)?;
        let b = if self.len2 > 0 {
            Some(g.tape.narrow(x, self.len1, self.len2)?)
        } else {
            None
        };
        Ok((a, b))
    }

    fn merge(g: &mut Graph<'_>, a: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => g.tape.concat(&[a, b]),
            None => Ok(a),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, u: Var, c: Option<Var>) -> Result<CouplingOutput> {
        self.check_shapes(g, u, c)?;
        let (u1, u2) = self.halves(g, u)?;
        let in1 = Self::join(g, u2, c)?;
        let (s1, t1) = self.scale_shift(g, &self.net1, self.gamma1, self.len1, in1)?;
        let v1 = Self::affine(g, u1, s1, t1)?;
        let mut logdet = g.tape.sum_per_sample(s1)?;
        let v2 = match (&self.net2, u2) {
            (Some(net2), Some(u2)) => {
                let in2 = Self::join(g, Some(v1), c)?;
                let gamma2 = self.gamma2.expect("second half has a gamma");
                let (s2, t2) = self.scale_shift(g, net2, gamma2, self.len2, in2)?;
                let ld2 = g.tape.sum_per_sample(s2)?;
                logdet = g.tape.add(logdet, ld2)?;
                Some(Self::affine(g, u2, s2, t2)?)
            }
            _ => None,
        };
        let out = Self::merge(g, v1, v2)?;
        Ok(CouplingOutput { out, logdet })
    }

    /// Inverse pass; the returned `logdet` is that of the inverse map.
    pub fn inverse(&self, g: &mut Graph<'_>, v: Var, c: Option<Var>) -> Result<CouplingOutput> {
        self.check_shapes(g, v, c)?;
        let (v1, v2) = self.halves(g, v)?;
        let mut neg_logdet = None;
        let u2 = match (&self.net2, v2) {
            (Some(net2), Some(v2)) => {
                let in2 = Self::join(g, Some(v1), c)?;
                let gamma2 = self.gamma2.expect("second half has a gamma");
                let (s2, t2) = self.scale_shift(g, net2, gamma2, self.len2, in2)?;
                neg_logdet = Some(g.tape.sum_per_sample(s2)?);
                Some(Self::affine_inv(g, v2, s2, t2)?)
            }
            _ => None,
        };
        let in1 = Self::join(g, u2, c)?;
        let (s1, t1) = self.scale_shift(g, &self.net1, self.gamma1, self.len1, in1)?;
        let u1 = Self::affine_inv(g, v1, s1, t1)?;
        let ld1 = g.tape.sum_per_sample(s1)?;
        let total = match neg_logdet {
            Some(ld2) => g.tape.add(ld1, ld2)?,
            None => ld1,
        };
        let logdet = g.tape.scale(total, -1.0)?;
        let out = Self::merge(g, u1, u2)?;
        Ok(CouplingOutput { out, logdet })
    }
}
