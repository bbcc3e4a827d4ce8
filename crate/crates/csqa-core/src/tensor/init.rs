//! Deterministic parameter initialization and seed-stream derivation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a; used to fold names and tags into seed streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent deterministic stream for (seed, tags...). Every random
/// decision in the crate draws from a stream derived this way, so a run is a
/// pure function of its master seed.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed ^ 0x5ca1ab1e0ddba11);
    for t in tags {
        s = splitmix64(s ^ *t);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// How a parameter is (re)initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) — conv and linear weights.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
    Const(f64),
}

pub fn init_values(init: Init, numel: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::FanInUniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect()
        }
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
        Init::Const(v) => vec![v; numel],
    }
}
