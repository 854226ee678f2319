//! Evaluation metrics over a batch of full (untruncated) sequences.
//!
//! Each sequence is split into an input (all but the last item) and a target
//! (the last item). The model's predictive distribution for the input is
//! scored by truncated reciprocal rank (mAP@k with one relevant item),
//! entropy in nats and `KL(stationary ‖ predictive)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seqmodel::{ModelParams, PredictiveDistribution, PROB_FLOOR};
use crate::simulator::{ClusterLayout, ItemId, Trajectory};

/// Full sequences paired with the model's prediction for each input.
#[derive(Clone, Debug)]
pub struct EvalBatch {
    sequences: Vec<Trajectory>,
    distributions: Vec<PredictiveDistribution>,
}

impl EvalBatch {
    /// Runs the model on every sequence's input. Sequences are processed in
    /// parallel; the output order matches the input order.
    pub fn evaluate(params: &ModelParams, sequences: Vec<Trajectory>) -> Result<Self> {
        if let Some(short) = sequences.iter().find(|s| s.len() < 2) {
            return Err(Error::invalid(format!(
                "evaluation sequences need at least two items, got {}",
                short.len()
            )));
        }
        let prepared = params.prepare();
        let distributions = sequences
            .par_iter()
            .map(|s| prepared.predict(&s.prefix(s.len() - 1)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sequences,
            distributions,
        })
    }

    /// Pairs precomputed distributions with their sequences.
    pub fn from_parts(
        sequences: Vec<Trajectory>,
        distributions: Vec<PredictiveDistribution>,
    ) -> Result<Self> {
        if sequences.len() != distributions.len() {
            return Err(Error::invalid(format!(
                "{} sequences but {} distributions",
                sequences.len(),
                distributions.len()
            )));
        }
        let vocab = distributions.first().map_or(0, |d| d.len());
        for (s, d) in sequences.iter().zip(&distributions) {
            if s.len() < 2 {
                return Err(Error::invalid(
                    "evaluation sequences need at least two items",
                ));
            }
            if d.len() != vocab || s.items().iter().any(|&a| a >= vocab) {
                return Err(Error::invalid(
                    "distributions must share one vocabulary covering every item",
                ));
            }
        }
        Ok(Self {
            sequences,
            distributions,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequences(&self) -> &[Trajectory] {
        &self.sequences
    }

    pub fn distributions(&self) -> &[PredictiveDistribution] {
        &self.distributions
    }

    pub fn input(&self, i: usize) -> &[ItemId] {
        let items = self.sequences[i].items();
        &items[..items.len() - 1]
    }

    pub fn target(&self, i: usize) -> ItemId {
        self.sequences[i].last()
    }

    pub fn vocab_size(&self) -> usize {
        self.distributions.first().map_or(0, |d| d.len())
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::invalid("evaluation batch is empty"))
        } else {
            Ok(())
        }
    }
}

/// 1-based rank of `target` when items are sorted by descending probability,
/// equal probabilities ordered by ascending id.
pub fn rank_of(dist: &PredictiveDistribution, target: ItemId) -> usize {
    let p = dist.probs();
    let pt = p[target];
    1 + p
        .iter()
        .enumerate()
        .filter(|&(a, &pa)| pa > pt || (pa == pt && a < target))
        .count()
}

/// Mean over the batch of `1/rank` when the target ranks within the top `k`, else 0.
pub fn map_at_k(batch: &EvalBatch, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("mAP@k needs k ≥ 1"));
    }
    batch.require_nonempty()?;
    let total: f64 = (0..batch.len())
        .map(|i| {
            let r = rank_of(&batch.distributions[i], batch.target(i));
            if r <= k {
                1.0 / r as f64
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean predictive entropy in nats.
pub fn predictive_entropy(batch: &EvalBatch) -> Result<f64> {
    batch.require_nonempty()?;
    let total: f64 = batch.distributions.iter().map(|d| d.entropy()).sum();
    Ok(total / batch.len() as f64)
}

/// `Σ_a u(a) ln(u(a) / max(p(a), 1e-12))`.
pub fn kl_divergence(reference: &[f64], predictive: &[f64]) -> f64 {
    reference
        .iter()
        .zip(predictive)
        .filter(|&(&u, _)| u > 0.0)
        .map(|(&u, &p)| u * (u / p.max(PROB_FLOOR)).ln())
        .sum()
}

/// Mean over the batch of `KL(stationary ‖ predictive)`.
pub fn kl_from_stationary(batch: &EvalBatch, stationary: &[f64]) -> Result<f64> {
    batch.require_nonempty()?;
    if stationary.len() != batch.vocab_size() {
        return Err(Error::invalid(format!(
            "stationary distribution has {} entries, vocabulary has {}",
            stationary.len(),
            batch.vocab_size()
        )));
    }
    if stationary.iter().any(|&u| u.is_nan() || u <= 0.0) {
        return Err(Error::invalid(
            "stationary distribution must be strictly positive",
        ));
    }
    let total: f64 = batch
        .distributions
        .iter()
        .map(|d| kl_divergence(stationary, d.probs()))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Predictive mass on the cluster containing `item`.
pub fn cluster_mass(dist: &PredictiveDistribution, layout: &ClusterLayout, item: ItemId) -> f64 {
    dist.probs()[layout.items_in(layout.cluster_of(item))]
        .iter()
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub ks: Vec<usize>,
    pub d: Vec<f64>,
}

/// `d(k)`: mean predictive mass on the cluster of the input item `k` steps
/// before the end of the input (`k = 1` is the most recent item).
pub fn bias_curve(batch: &EvalBatch, layout: &ClusterLayout, ks: &[usize]) -> Result<BiasCurve> {
    batch.require_nonempty()?;
    if layout.total_items() != batch.vocab_size() {
        return Err(Error::invalid(format!(
            "cluster layout covers {} items, vocabulary has {}",
            layout.total_items(),
            batch.vocab_size()
        )));
    }
    let shortest = (0..batch.len())
        .map(|i| batch.input(i).len())
        .min()
        .unwrap_or(0);
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > shortest) {
        return Err(Error::invalid(format!(
            "lag {bad} is outside 1..={shortest} (shortest input length)"
        )));
    }
    let d = ks
        .iter()
        .map(|&k| {
            let total: f64 = (0..batch.len())
                .map(|i| {
                    let input = batch.input(i);
                    cluster_mass(&batch.distributions[i], layout, input[input.len() - k])
                })
                .sum();
            total / batch.len() as f64
        })
        .collect();
    Ok(BiasCurve { ks: ks.to_vec(), d })
}

impl BiasCurve {
    /// `max d(k) − min d(k)`; smaller means flatter.
    pub fn range(&self) -> f64 {
        let max = self.d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.d.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// `n × vocab` matrix of the first `n` predictive distributions.
pub fn heatmap(batch: &EvalBatch, n: usize) -> Result<Matrix> {
    if n == 0 || n > batch.len() {
        return Err(Error::invalid(format!(
            "heatmap needs 1..={} rows, got {n}",
            batch.len()
        )));
    }
    let rows: Vec<Vec<f64>> = batch.distributions[..n]
        .iter()
        .map(|d| d.probs().to_vec())
        .collect();
    Matrix::from_rows(&rows)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map1: f64,
    pub map10: f64,
    pub entropy: f64,
    pub kl: f64,
}

impl MetricReport {
    pub fn compute(batch: &EvalBatch, stationary: &[f64]) -> Result<Self> {
        Ok(Self {
            map1: map_at_k(batch, 1)?,
            map10: map_at_k(batch, 10)?,
            entropy: predictive_entropy(batch)?,
            kl: kl_from_stationary(batch, stationary)?,
        })
    }

    fn values(&self) -> [f64; 4] {
        [self.map1, self.map10, self.entropy, self.kl]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            map1: v[0],
            map10: v[1],
            entropy: v[2],
            kl: v[3],
        }
    }
}

/// Mean and standard error of the mean of each metric over repeated runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: MetricReport,
    pub stderr: MetricReport,
}

impl MetricSummary {
    pub fn from_reports(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::invalid("cannot summarize zero reports"));
        }
        let mut mean = [0.0; 4];
        let mut se = [0.0; 4];
        for j in 0..4 {
            let xs: Vec<f64> = reports.iter().map(|r| r.values()[j]).collect();
            let (m, s) = mean_and_stderr(&xs);
            mean[j] = m;
            se[j] = s;
        }
        Ok(Self {
            count: reports.len(),
            mean: MetricReport::from_values(mean),
            stderr: MetricReport::from_values(se),
        })
    }
}

/// Arithmetic mean and `s/√n` with the unbiased sample deviation (0 for `n = 1`).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One row of the metric CSV. `stderr` is present only on aggregate rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub expected_dropout: f64,
    /// A seed, or `aggregate`.
    pub seed: String,
    pub report: MetricReport,
    pub stderr: Option<MetricReport>,
}

pub const METRIC_CSV_HEADER: &str =
    "variant,expected_dropout,seed,map1,map10,entropy,kl,map1_se,map10_se,entropy_se,kl_se";

pub fn write_metric_csv<W: Write>(mut out: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "{METRIC_CSV_HEADER}")?;
    for r in rows {
        let m = r.report;
        write!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant, r.expected_dropout, r.seed, m.map1, m.map10, m.entropy, m.kl
        )?;
        match r.stderr {
            Some(s) => writeln!(out, ",{},{},{},{}", s.map1, s.map10, s.entropy, s.kl)?,
            None => writeln!(out, ",,,,")?,
        }
    }
    Ok(())
}

/// `k,d_k,model_tag` rows for each tagged curve, in the given order.
pub fn write_bias_curve_csv<W: Write>(
    mut out: W,
    curves: &[(&str, &BiasCurve)],
) -> std::io::Result<()> {
    writeln!(out, "k,d_k,model_tag")?;
    for (tag, c) in curves {
        for (k, d) in c.ks.iter().zip(&c.d) {
            writeln!(out, "{k},{d},{tag}")?;
        }
    }
    Ok(())
}

/// Wide heatmap: `row,last_item,p_0,…,p_{V−1}`.
pub fn write_heatmap_csv<W: Write>(
    mut out: W,
    heat: &Matrix,
    last_items: &[ItemId],
) -> std::io::Result<()> {
    write!(out, "row,last_item")?;
    for a in 0..heat.cols() {
        write!(out, ",p_{a}")?;
    }
    writeln!(out)?;
    for (i, last) in last_items.iter().enumerate().take(heat.rows()) {
        write!(out, "{i},{last}")?;
        for v in heat.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
