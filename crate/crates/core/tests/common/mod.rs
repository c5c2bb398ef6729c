//! Shared test utilities: the central finite-difference oracle used to
//! verify every reverse-mode gradient, independent of the tape.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of a scalar function at `x`.
pub fn finite_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// Worst-case discrepancy between analytic and numeric gradients,
/// normalized by max(1, |analytic|, |numeric|) so near-zero entries are
/// judged on absolute error.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Deterministic uniform values in [lo, hi).
pub fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform values in [lo, hi) excluding a margin around zero, for inputs
/// feeding ReLU-like kinks.
pub fn uniform_vec_away_from_zero(rng: &mut ChaCha8Rng, len: usize, hi: f64, margin: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let mag = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
