//! Deterministic random streams.
//!
//! Every stream is ChaCha8 keyed by a 64-bit seed (expanded with the
//! PCG32-based `seed_from_u64` of `rand_core`) and positioned on an explicit
//! 64-bit stream id. ChaCha is a counter-mode generator, so a `(seed, stream)`
//! pair yields the same sequence on every platform. Gaussian samples come from
//! the ziggurat sampler of `rand_distr::StandardNormal`.

use rand::{Rng as _, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner }
    }

    /// Stream keyed by `seed` and a list of integer coordinates, e.g. a grid
    /// cell `(i, j)`.
    pub fn derived(seed: u64, coords: &[u64]) -> Self {
        let mut h = Sha256::new();
        for c in coords {
            h.update(c.to_le_bytes());
        }
        let digest = h.finalize();
        let stream = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Rng::with_stream(seed, stream)
    }

    /// Stream keyed by `seed` and a string label.
    pub fn for_label(seed: u64, domain: &str, label: &str) -> Self {
        Rng::with_stream(seed, hash_label(domain, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize, sigma: f64) -> Vec<f32> {
        (0..n).map(|_| (self.normal() * sigma) as f32).collect()
    }
}

/// Stable 64-bit hash of `(domain, label)`: the first 8 bytes of
/// SHA-256(domain ‖ 0x00 ‖ label), little-endian.
pub fn hash_label(domain: &str, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
