//! Invertible building blocks: conditional coupling blocks, their
//! subnetworks, and fixed channel permutations.

mod coupling;
mod permutation;
mod subnet;

pub use coupling::{CouplingBlock, CouplingOutput, GAMMA_INIT};
pub use permutation::{ChannelPermutation, Direction};
pub use subnet::{SubnetKind, SubnetSpec, Subnetwork};
