//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream name, counter)`: a stream
//! is keyed by hashing the seed and name, and sub-streams (one per sample,
//! per iteration, ...) are derived by mixing in an index. Nothing depends on
//! the order in which streams are created, so parallel consumers see the
//! same numbers as sequential ones.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(seed: u64, name: &str) -> Self {
        StreamKey(mix64(mix64(seed) ^ hash_name(name)))
    }

    /// Child key for index `i` (sample number, iteration, ...).
    pub fn child(self, i: u64) -> Self {
        StreamKey(mix64(self.0 ^ mix64(i.wrapping_add(0x51_7CC1_B727_220A))))
    }

    pub fn named(self, name: &str) -> Self {
        StreamKey(mix64(self.0 ^ hash_name(name)))
    }

    pub fn rng(self) -> Stream {
        let mut seed = [0u8; 32];
        let mut s = self.0;
        for chunk in seed.chunks_mut(8) {
            s = mix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Stream(ChaCha8Rng::from_seed(seed))
    }
}

/// A deterministic random stream.
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, name: &str) -> Self {
        StreamKey::new(seed, name).rng()
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
