//! Fixtures shared by the benchmarks.

use dcasr_core::data::ItemId;

/// `n` sessions of length `len` cycling through `n_items` items.
pub fn cyclic_sessions(n: usize, len: usize, n_items: usize) -> Vec<Vec<ItemId>> {
    (0..n)
        .map(|s| (0..len).map(|t| (s * 7 + t * 3) % n_items).collect())
        .collect()
}
