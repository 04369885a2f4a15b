//! Seeded random streams.
//!
//! All randomness flows from one master seed. Each consumer asks for a stream
//! by name, so adding a new consumer never perturbs the draws other consumers
//! see.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Derives independent, reproducible RNG streams from a master seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedSplitter {
    master: u64,
}

impl SeedSplitter {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// RNG for the named stream. The same (seed, name) pair always yields the
    /// same stream.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.master ^ splitmix64(fnv1a(name))))
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in s.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Draw from N(0, std^2) in f64.
pub fn sample_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    Normal::new(0.0, std)
        .expect("std must be finite")
        .sample(rng)
}
