//! Clustered Markov-chain user trajectories.
//!
//! Items `0..K*m` are split into `K` contiguous clusters of `m` items. From any
//! item the next item stays in the same cluster with total probability
//! `p_same` (spread uniformly over the cluster, the item itself included) and
//! otherwise moves uniformly to one of the items of the other clusters.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::augmentation::DropoutSampler;
use crate::error::{Error, Result};
use crate::numerics::{dot, sample_cumulative, Matrix, RngState};

pub type ItemId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub num_clusters: usize,
    pub items_per_cluster: usize,
}

impl ClusterLayout {
    pub fn new(num_clusters: usize, items_per_cluster: usize) -> Result<Self> {
        if num_clusters == 0 || items_per_cluster == 0 {
            return Err(Error::invalid(format!(
                "cluster layout needs positive sizes, got {num_clusters} clusters of {items_per_cluster}"
            )));
        }
        Ok(Self {
            num_clusters,
            items_per_cluster,
        })
    }

    pub fn total_items(&self) -> usize {
        self.num_clusters * self.items_per_cluster
    }

    #[inline]
    pub fn cluster_of(&self, item: ItemId) -> usize {
        item / self.items_per_cluster
    }

    pub fn items_in(&self, cluster: usize) -> std::ops::Range<ItemId> {
        cluster * self.items_per_cluster..(cluster + 1) * self.items_per_cluster
    }
}

impl Default for ClusterLayout {
    fn default() -> Self {
        Self {
            num_clusters: 10,
            items_per_cluster: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub layout: ClusterLayout,
    /// Total probability of the next item being in the current cluster.
    pub p_same: f64,
}

impl Default for TransitionSpec {
    fn default() -> Self {
        Self {
            layout: ClusterLayout::default(),
            p_same: 0.7,
        }
    }
}

impl TransitionSpec {
    pub fn validate(&self) -> Result<()> {
        ClusterLayout::new(self.layout.num_clusters, self.layout.items_per_cluster)?;
        if !(self.p_same > 0.0 && self.p_same <= 1.0) {
            return Err(Error::invalid(format!(
                "p_same must lie in (0, 1], got {}",
                self.p_same
            )));
        }
        if self.layout.num_clusters < 2 && self.p_same < 1.0 {
            return Err(Error::invalid(
                "a single cluster leaves no room for cross-cluster mass; use p_same = 1",
            ));
        }
        Ok(())
    }

    /// Probability of one specific item in the current cluster.
    pub fn same_cluster_entry(&self) -> f64 {
        self.p_same / self.layout.items_per_cluster as f64
    }

    /// Probability of one specific item in another cluster.
    pub fn cross_cluster_entry(&self) -> f64 {
        if self.layout.num_clusters < 2 {
            return 0.0;
        }
        (1.0 - self.p_same)
            / ((self.layout.num_clusters - 1) * self.layout.items_per_cluster) as f64
    }
}

/// Builds the row-stochastic item-to-item transition matrix.
pub fn build_transition_matrix(spec: &TransitionSpec) -> Result<Matrix> {
    spec.validate()?;
    let layout = spec.layout;
    let n = layout.total_items();
    let same = spec.same_cluster_entry();
    let cross = spec.cross_cluster_entry();
    Ok(Matrix::from_fn(n, n, |i, j| {
        if layout.cluster_of(i) == layout.cluster_of(j) {
            same
        } else {
            cross
        }
    }))
}

/// One user's ordered interaction sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    items: Vec<ItemId>,
}

impl Trajectory {
    pub fn new(items: Vec<ItemId>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("trajectory must contain at least one item"));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn last(&self) -> ItemId {
        *self.items.last().expect("trajectories are non-empty")
    }

    /// The first `len` items. `len` must be in `1..=self.len()`.
    pub fn prefix(&self, len: usize) -> Trajectory {
        assert!(len >= 1 && len <= self.items.len());
        Trajectory {
            items: self.items[..len].to_vec(),
        }
    }

    pub fn into_items(self) -> Vec<ItemId> {
        self.items
    }
}

fn check_row_stochastic(p: &Matrix) -> Result<()> {
    if !p.is_square() {
        return Err(Error::invalid(format!(
            "transition matrix must be square, got {}x{}",
            p.rows(),
            p.cols()
        )));
    }
    for i in 0..p.rows() {
        let row = p.row(i);
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!("row {i} has a negative entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Stationary distribution by power iteration from the uniform vector.
///
/// Iterates `πᵀ ← πᵀ P` for at most 10⁴ steps and succeeds once the residual
/// `max |πᵀP − πᵀ|` is at most `1e-13` (and in any case requires `1e-10`).
pub fn stationary_distribution(p: &Matrix) -> Result<Vec<f64>> {
    const MAX_ITERATIONS: usize = 10_000;
    check_row_stochastic(p)?;
    let n = p.rows();
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_ITERATIONS {
        next.iter_mut().for_each(|v| *v = 0.0);
        for (i, &w) in pi.iter().enumerate() {
            for (nj, &pij) in next.iter_mut().zip(p.row(i)) {
                *nj += w * pij;
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        residual = pi
            .iter()
            .zip(&next)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut pi, &mut next);
        if residual <= 1e-13 {
            return Ok(pi);
        }
    }
    if residual <= 1e-10 {
        return Ok(pi);
    }
    Err(Error::StationaryNonConvergence {
        iterations: MAX_ITERATIONS,
        residual,
        last_iterate: pi,
    })
}

/// A validated transition matrix together with its stationary distribution.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    transitions: Matrix,
    stationary: Vec<f64>,
}

impl MarkovChain {
    pub fn new(transitions: Matrix) -> Result<Self> {
        let stationary = stationary_distribution(&transitions)?;
        Ok(Self {
            transitions,
            stationary,
        })
    }

    pub fn from_spec(spec: &TransitionSpec) -> Result<Self> {
        Self::new(build_transition_matrix(spec)?)
    }

    pub fn transitions(&self) -> &Matrix {
        &self.transitions
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn num_items(&self) -> usize {
        self.transitions.rows()
    }

    /// Draws a trajectory whose first item follows the stationary distribution.
    pub fn sample_trajectory(&self, length: usize, rng: &mut RngState) -> Result<Trajectory> {
        if length == 0 {
            return Err(Error::invalid("trajectory length must be at least 1"));
        }
        let mut items = Vec::with_capacity(length);
        let mut current = sample_cumulative(rng.uniform_f64(), &self.stationary);
        items.push(current);
        for _ in 1..length {
            current = sample_cumulative(rng.uniform_f64(), self.transitions.row(current));
            items.push(current);
        }
        Ok(Trajectory { items })
    }

    /// `count` trajectories, the `i`-th drawn from `rng.indexed(i)`.
    pub fn sample_batch(
        &self,
        count: usize,
        length: usize,
        rng: &RngState,
    ) -> Result<Vec<Trajectory>> {
        (0..count)
            .map(|i| self.sample_trajectory(length, &mut rng.indexed(i as u64)))
            .collect()
    }
}

/// Samples one trajectory from an arbitrary row-stochastic matrix.
pub fn sample_trajectory(p: &Matrix, length: usize, rng: &mut RngState) -> Result<Trajectory> {
    MarkovChain::new(p.clone())?.sample_trajectory(length, rng)
}

/// Probability that two items `k` steps apart share a cluster.
///
/// `p_1 = p_same`, `p_k = p_{k-1} p_1 + q_{k-1} q_1 / (K - 1)` with `q = 1 - p`.
pub fn cluster_agreement_probability(spec: &TransitionSpec, k: usize) -> Result<f64> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::invalid("lag k must be at least 1"));
    }
    let p1 = spec.p_same;
    let q1 = 1.0 - p1;
    let others = (spec.layout.num_clusters.max(2) - 1) as f64;
    let mut pk = p1;
    for _ in 1..k {
        pk = pk * p1 + (1.0 - pk) * q1 / others;
    }
    Ok(pk)
}

/// `E[q_{N+1}]` under the sampler's distribution of the dropout count `N`:
/// the chance that the target and the last remaining input item disagree on cluster.
pub fn expected_cluster_divergence(sampler: &DropoutSampler, spec: &TransitionSpec) -> Result<f64> {
    sampler.validate()?;
    sampler
        .pmf()
        .into_iter()
        .map(|(n, w)| Ok(w * (1.0 - cluster_agreement_probability(spec, n + 1)?)))
        .sum()
}

/// Writes trajectories as `sequence_id,position,item_id,cluster_id` CSV.
pub fn write_trajectories_csv<W: Write>(
    mut out: W,
    trajectories: &[Trajectory],
    layout: &ClusterLayout,
) -> std::io::Result<()> {
    writeln!(out, "sequence_id,position,item_id,cluster_id")?;
    for (s, t) in trajectories.iter().enumerate() {
        for (pos, &item) in t.items().iter().enumerate() {
            writeln!(out, "{s},{pos},{item},{}", layout.cluster_of(item))?;
        }
    }
    Ok(())
}

/// Residual `max_j |(πᵀP)_j − π_j|`.
pub fn stationarity_residual(p: &Matrix, pi: &[f64]) -> f64 {
    (0..p.cols())
        .map(|j| {
            let col: Vec<f64> = (0..p.rows()).map(|i| p[(i, j)]).collect();
            (dot(pi, &col) - pi[j]).abs()
        })
        .fold(0.0, f64::max)
}
