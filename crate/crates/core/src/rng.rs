//! Keyed random streams.
//!
//! A stream is a pure function of `(seed, node, t, purpose)`. The node-wise engine and
//! the matrix oracle both derive their randomness from here, which is what lets them
//! consume identical gradients and compressor draws without sharing any state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Gradient = 1,
    Compress = 2,
    Data = 3,
    Partition = 4,
    Probe = 5,
    Calibrate = 6,
}

/// Stream for one `(seed, node, t, purpose)` key.
pub fn keyed(seed: u64, node: usize, t: usize, purpose: Purpose) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(node as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(t as u64).to_le_bytes());
    key[24..32].copy_from_slice(&(purpose as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stream that is not tied to a node or iteration.
pub fn seeded(seed: u64, purpose: Purpose) -> Stream {
    keyed(seed, usize::MAX, usize::MAX, purpose)
}
