//! Counter-addressed Gaussian streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 keystream
//! selected by `(seed, domain, stream)`; the n-th normal of a stream sits at
//! a fixed keystream offset, so any entry can be regenerated without touching
//! its predecessors and results do not depend on traversal order or on how
//! work is split across threads.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Disjoint key families. Noise, driver, bridge and initial-condition draws
/// never share a keystream even when the user passes the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamDomain {
    Noise = 0x6e6f_6973_6500_0001,
    Driver = 0x6472_6976_6572_0002,
    Bridge = 0x6272_6964_6765_0003,
    Initial = 0x696e_6974_0000_0004,
    Bootstrap = 0x626f_6f74_0000_0005,
    Ensemble = 0x656e_7365_6d00_0006,
    Branch = 0x6272_616e_6368_0007,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, domain: StreamDomain) -> [u8; 32] {
    let mut state = seed ^ (domain as u64);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Derive a child seed, e.g. the noise seed of ensemble member `index`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut state = seed ^ (StreamDomain::Ensemble as u64) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    splitmix64(&mut state)
}

/// A Gaussian stream. Each normal consumes exactly two 64-bit words, so
/// normal number `i` starts at keystream word `4 * i`.
#[derive(Clone, Debug)]
pub struct CounterNormals {
    rng: ChaCha8Rng,
}

impl CounterNormals {
    pub fn new(seed: u64, domain: StreamDomain, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(derive_key(seed, domain));
        rng.set_stream(stream);
        Self { rng }
    }

    /// Position the stream so the next call returns normal number `index`.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(4 * index as u128);
    }

    /// Single addressable draw.
    pub fn at(seed: u64, domain: StreamDomain, stream: u64, index: u64) -> f64 {
        let mut s = Self::new(seed, domain, stream);
        s.seek(index);
        s.next_normal()
    }

    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = (b >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normals(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_normal();
        }
    }

    /// Uniform index in `0..n`. Consumes one normal slot.
    pub fn next_index(&mut self, n: usize) -> usize {
        let a = self.rng.next_u64();
        let _ = self.rng.next_u64();
        ((a as u128 * n as u128) >> 64) as usize
    }
}
