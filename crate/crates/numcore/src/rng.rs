//! Counter-addressed random streams.
//!
//! Every consumer (parameter init, data sampling, task generation, ...)
//! derives its own stream from `(seed, purpose)` so that adding or
//! reordering consumers never shifts anyone else's draws.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn for_purpose(seed: u64, purpose: &str) -> Self {
        Self::new(seed, stream_id(purpose))
    }
}

/// FNV-1a of the purpose label.
pub fn stream_id(purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// xoshiro256** generator positioned at the start of one stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: RngState,
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn new(state: RngState) -> Self {
        // seed_from_u64 expands through splitmix64 internally.
        let inner = Xoshiro256StarStar::seed_from_u64(splitmix64(state.seed) ^ state.stream);
        Self { state, inner }
    }

    pub fn for_purpose(seed: u64, purpose: &str) -> Self {
        Self::new(RngState::for_purpose(seed, purpose))
    }

    pub fn state(&self) -> RngState {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec<T: Scalar>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n).map(|_| T::of(self.normal() * std)).collect()
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
