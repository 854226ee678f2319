//! Recency dropout: training inputs lose their most recent `N` items.
//!
//! `N` is drawn per example from a [`DropoutSampler`]. The prediction target is
//! never touched and evaluation inputs never pass through this module.

use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::simulator::{ItemId, Trajectory};

/// Dropout never shortens an input below this many items.
pub const MIN_KEEP: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutSampler {
    /// `N = n` almost surely. `Fixed(0)` is the no-dropout baseline.
    Fixed(usize),
    /// Discrete uniform on `[low, high]` or `[low, high)` depending on
    /// `upper_inclusive`.
    Uniform {
        low: usize,
        high: usize,
        upper_inclusive: bool,
    },
}

impl Default for DropoutSampler {
    fn default() -> Self {
        DropoutSampler::Fixed(0)
    }
}

impl DropoutSampler {
    pub fn uniform_inclusive(low: usize, high: usize) -> Self {
        DropoutSampler::Uniform {
            low,
            high,
            upper_inclusive: true,
        }
    }

    pub fn uniform_half_open(low: usize, high: usize) -> Self {
        DropoutSampler::Uniform {
            low,
            high,
            upper_inclusive: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DropoutSampler::Fixed(_) => Ok(()),
            DropoutSampler::Uniform {
                low,
                high,
                upper_inclusive,
            } => {
                if low > high || (!upper_inclusive && low == high) {
                    let close = if upper_inclusive { ']' } else { ')' };
                    Err(Error::invalid(format!(
                        "empty dropout range [{low}, {high}{close}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Smallest and largest attainable count, both inclusive.
    fn support(&self) -> (usize, usize) {
        match *self {
            DropoutSampler::Fixed(n) => (n, n),
            DropoutSampler::Uniform {
                low,
                high,
                upper_inclusive,
            } => (low, if upper_inclusive { high } else { high - 1 }),
        }
    }

    /// `(n, P(N = n))` for every `n` in the support.
    pub fn pmf(&self) -> Vec<(usize, f64)> {
        let (lo, hi) = self.support();
        let w = 1.0 / (hi - lo + 1) as f64;
        (lo..=hi).map(|n| (n, w)).collect()
    }

    pub fn mean(&self) -> f64 {
        let (lo, hi) = self.support();
        (lo + hi) as f64 / 2.0
    }

    pub fn variance(&self) -> f64 {
        let (lo, hi) = self.support();
        let width = (hi - lo + 1) as f64;
        (width * width - 1.0) / 12.0
    }

    pub fn sample(&self, rng: &mut RngState) -> usize {
        let (lo, hi) = self.support();
        match self {
            DropoutSampler::Fixed(n) => *n,
            DropoutSampler::Uniform { .. } => {
                rng.uniform_int(lo as i64, hi as i64)
                    .expect("validated sampler has a non-empty range") as usize
            }
        }
    }
}

/// Draws the dropout count for one example.
pub fn sample_dropout_count(sampler: &DropoutSampler, rng: &mut RngState) -> Result<usize> {
    sampler.validate()?;
    Ok(sampler.sample(rng))
}

/// Removes the last `min(n, len - MIN_KEEP)` items.
pub fn apply_recency_dropout(history: &Trajectory, n: usize) -> Result<Trajectory> {
    if history.is_empty() {
        return Err(Error::invalid("cannot apply dropout to an empty history"));
    }
    let keep = history.len().saturating_sub(n).max(MIN_KEEP);
    Ok(history.prefix(keep))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedExample {
    pub input: Trajectory,
    pub target: ItemId,
    pub dropped_count: usize,
}

/// Splits a full sequence into (all-but-last, last) and truncates the input
/// with a freshly sampled dropout count.
pub fn make_training_example(
    full_sequence: &Trajectory,
    sampler: &DropoutSampler,
    rng: &mut RngState,
) -> Result<AugmentedExample> {
    if full_sequence.len() < 2 {
        return Err(Error::invalid(
            "a training sequence needs at least two items (input and target)",
        ));
    }
    let n = sample_dropout_count(sampler, rng)?;
    let history = full_sequence.prefix(full_sequence.len() - 1);
    let input = apply_recency_dropout(&history, n)?;
    Ok(AugmentedExample {
        dropped_count: history.len() - input.len(),
        input,
        target: full_sequence.last(),
    })
}
