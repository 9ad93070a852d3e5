use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::Var;
use crate::rng::Seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Fixed channel permutation: output channel `j` is input channel `perm[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPermutation {
    perm: Vec<usize>,
    inverse: Vec<usize>,
    seed: u64,
}

impl ChannelPermutation {
    pub fn from_indices(perm: Vec<usize>, seed: u64) -> Result<Self> {
        let n = perm.len();
        let mut inverse = vec![usize::MAX; n];
        for (j, &i) in perm.iter().enumerate() {
            if i >= n || inverse[i] != usize::MAX {
                return Err(Error::contract(format!("{perm:?} is not a permutation")));
            }
            inverse[i] = j;
        }
        if n == 0 {
            return Err(Error::contract("empty permutation"));
        }
        Ok(Self { perm, inverse, seed })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_indices((0..n).collect(), 0).expect("identity is a permutation")
    }

    pub fn random(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut Seed(seed).stream("permutation"));
        Self::from_indices(perm, seed).expect("shuffle is a permutation")
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Reorder channels; contributes nothing to the log-determinant.
    pub fn apply(&self, g: &mut Graph<'_>, x: Var, direction: Direction) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() < 2 || shape[1] != self.perm.len() {
            return Err(Error::shape("permute", shape, &[self.perm.len()]));
        }
        let index = match direction {
            Direction::Forward => &self.perm,
            Direction::Inverse => &self.inverse,
        };
        g.tape.gather_channels(x, index)
    }
}
