//! Counter-based pseudo-random streams.
//!
//! A stream is a `(key, counter)` pair. Each draw hashes the key together with
//! the incremented counter, so a stream can be re-created from its key alone and
//! any number of streams can be used in parallel without sharing state.
//! Substreams get fresh keys by hashing a label (or an index) into the parent key.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 / Stafford variant 13 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes, finalized with `mix64`.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    key: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: mix64(seed ^ GOLDEN_GAMMA),
            counter: 0,
        }
    }

    /// The root seed this stream was (transitively) derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of 64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream named by `label`. Does not advance `self`.
    pub fn substream(&self, label: &str) -> RngState {
        RngState {
            seed: self.seed,
            key: mix64(self.key ^ hash_label(label)),
            counter: 0,
        }
    }

    /// Independent stream keyed by an integer index (step, example, repeat, ...).
    pub fn indexed(&self, index: u64) -> RngState {
        RngState {
            seed: self.seed,
            key: mix64(self.key.rotate_left(17) ^ mix64(index.wrapping_add(GOLDEN_GAMMA))),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let z = mix64(self.key ^ self.counter.wrapping_mul(GOLDEN_GAMMA));
        mix64(z.wrapping_add(self.key.rotate_left(32)))
    }

    /// Uniform draw from `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> Result<i64> {
        if lo > hi {
            return Err(Error::invalid(format!("empty integer range [{lo}, {hi}]")));
        }
        let span = (hi as i128 - lo as i128 + 1) as u128;
        if span > u64::MAX as u128 {
            return Ok(self.next_u64() as i64);
        }
        let span = span as u64;
        // reject the top 2^64 mod span values so every residue is equally likely
        let rem = (u64::MAX % span + 1) % span;
        let zone = u64::MAX - rem;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return Ok((lo as i128 + (x % span) as i128) as i64);
            }
        }
    }

    /// Uniform index in `[0, n)`. `n` must be positive.
    pub fn uniform_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "uniform_index over an empty range");
        self.uniform_int(0, n as i64 - 1).expect("non-empty range") as usize
    }

    /// Draws index `i` with probability `weights[i]`.
    ///
    /// The weights must be non-negative and sum to one within `1e-9`.
    pub fn sample_categorical(&mut self, weights: &[f64]) -> Result<usize> {
        validate_probabilities(weights)?;
        Ok(sample_cumulative(self.uniform_f64(), weights))
    }
}

pub(crate) fn validate_probabilities(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid(format!(
            "weight {i} is negative or non-finite ({})",
            weights[i]
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "weights sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Cumulative-sum scan: first index whose running total strictly exceeds `u`.
/// Falls back to the last positive weight when rounding leaves `u` past the end.
#[inline]
pub(crate) fn sample_cumulative(u: f64, weights: &[f64]) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within_five_sigma(count: usize, n: usize, p: f64) -> bool {
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - mean).abs() <= 5.0 * sigma
    }

    #[test]
    fn degenerate_range() {
        let mut rng = RngState::new(1);
        for _ in 0..10 {
            assert_eq!(rng.uniform_int(5, 5).unwrap(), 5);
        }
    }

    #[test]
    fn inverted_range_rejected() {
        assert!(RngState::new(1).uniform_int(3, 2).is_err());
    }

    #[test]
    fn uniform_int_frequencies() {
        let mut rng = RngState::new(2024);
        let n = 1_000_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[rng.uniform_int(0, 9).unwrap() as usize] += 1;
        }
        for (v, &c) in counts.iter().enumerate() {
            assert!(within_five_sigma(c, n, 0.1), "value {v} drawn {c} times");
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngState::new(77);
        let mut b = RngState::new(77);
        for _ in 0..100 {
            assert_eq!(
                a.uniform_int(-3, 1000).unwrap(),
                b.uniform_int(-3, 1000).unwrap()
            );
        }
        assert_eq!(a, b);
    }

    #[test]
    fn point_mass_categorical() {
        let mut rng = RngState::new(9);
        let mut w = vec![0.0; 6];
        w[3] = 1.0;
        for _ in 0..100 {
            assert_eq!(rng.sample_categorical(&w).unwrap(), 3);
        }
    }

    #[test]
    fn uniform_categorical_frequencies() {
        let mut rng = RngState::new(31);
        let w = vec![0.01; 100];
        let n = 1_000_000;
        let mut counts = vec![0usize; 100];
        for _ in 0..n {
            counts[rng.sample_categorical(&w).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| within_five_sigma(c, n, 0.01)));
    }

    #[test]
    fn clustered_row_concentrates_on_cluster() {
        // one row of the 10x10-cluster transition matrix for an item in cluster 2
        let w: Vec<f64> = (0..100)
            .map(|j| if j / 10 == 2 { 0.07 } else { 0.3 / 90.0 })
            .collect();
        let mut rng = RngState::new(12);
        let n = 200_000;
        let inside = (0..n)
            .filter(|_| rng.sample_categorical(&w).unwrap() / 10 == 2)
            .count();
        assert!(within_five_sigma(inside, n, 0.7));
    }

    #[test]
    fn bad_weights_rejected() {
        let mut rng = RngState::new(0);
        assert!(rng.sample_categorical(&[0.5, -0.1, 0.6]).is_err());
        assert!(rng.sample_categorical(&[0.5, 0.4]).is_err());
        assert!(rng.sample_categorical(&[]).is_err());
    }

    #[test]
    fn labelled_substreams_differ() {
        for seed in [0u64, 1, 42, u64::MAX] {
            let root = RngState::new(seed);
            let labels = [
                "simulation",
                "initialization",
                "dropout",
                "batching",
                "evaluation",
            ];
            let streams: Vec<Vec<u64>> = labels
                .iter()
                .map(|l| {
                    let mut s = root.substream(l);
                    (0..64).map(|_| s.next_u64()).collect()
                })
                .collect();
            for i in 0..streams.len() {
                for j in i + 1..streams.len() {
                    assert_ne!(streams[i], streams[j]);
                }
            }
        }
    }

    #[test]
    fn substream_does_not_advance_parent() {
        let root = RngState::new(5);
        let _ = root.substream("x");
        assert_eq!(root.counter(), 0);
        assert_eq!(root.indexed(3), root.indexed(3));
        assert_ne!(root.indexed(3).key(), root.indexed(4).key());
    }
}
