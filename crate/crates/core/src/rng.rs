//! Explicitly seeded, counter-based random streams.
//!
//! Every stochastic operation takes a [`Rng`] obtained from [`stream`] or
//! [`substream`]. Both are ChaCha8 generators keyed by `(seed, label)`;
//! substreams select the ChaCha stream id, so parallel workers can draw
//! independent sequences without sharing state.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

fn key(seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

/// The stream named `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    ChaCha8Rng::from_seed(key(seed, label))
}

/// The `index`-th independent substream of the stream named `label`.
pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::from_seed(key(seed, label));
    rng.set_stream(index);
    rng
}

/// A seed for a derived stage, independent of other labels.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let k = key(seed, label);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniform integer in `0..n`.
pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Index drawn proportionally to non-negative `weights`. Returns `None` when
/// every weight is zero.
pub fn categorical(rng: &mut Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = uniform(rng) * total;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last_positive = Some(i);
        if target < w {
            return Some(i);
        }
        target -= w;
    }
    last_positive
}
