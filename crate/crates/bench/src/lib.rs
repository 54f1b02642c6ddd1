//! Deterministic fixtures shared by the criterion benches.

use kpft_core::layers::{FastWeights, PhmFactors};
use kpft_core::linalg::{Tensor2, Tensor3};

/// Smooth pseudo-random fill; cheap and reproducible without an RNG.
pub fn filled(rows: usize, cols: usize, salt: f64) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |i, j| ((i * cols + j) as f64 * 0.618 + salt).sin())
}

/// PHM factors for a `k -> d` projection, low-rank when `rank` is given.
pub fn factors(k: usize, d: usize, n: usize, rank: Option<usize>) -> PhmFactors {
    let fast = match rank {
        Some(r) => FastWeights::LowRank {
            s: filled(k, r, 1.0),
            t: filled(n * r, d / n, 2.0),
        },
        None => FastWeights::Full(filled(k, d / n, 3.0)),
    };
    PhmFactors::new(n, filled(n * n, n, 4.0), fast, filled(1, d, 5.0)).expect("valid fixture")
}

pub fn activations(batch: usize, seq: usize, k: usize) -> Tensor3 {
    Tensor3::from_stacked(batch, filled(batch * seq, k, 6.0)).expect("valid fixture")
}
