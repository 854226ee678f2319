//! Spectra of chained recurrent Jacobians and the dropout sweep driver.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::DropoutSampler;
use crate::error::{Error, Result};
use crate::metrics::{mean_and_stderr, write_metric_csv, MetricReport, MetricRow, MetricSummary};
use crate::numerics::{eigenvalues, Matrix, RngState};
use crate::seqmodel::{step_jacobian, ForwardTrace, ModelParams};
use crate::simulator::Trajectory;
use crate::training::{train, TrainConfig};

/// A product of step Jacobians kept as `exp(log_scale) · matrix` so long
/// chains neither underflow nor overflow.
#[derive(Clone, Debug)]
pub struct ScaledProduct {
    pub matrix: Matrix,
    pub log_scale: f64,
}

impl ScaledProduct {
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Matrix::identity(n),
            log_scale: 0.0,
        }
    }

    /// `self ← self · rhs`, then renormalizes by the largest entry.
    pub fn mul_right(&mut self, rhs: &Matrix) -> Result<()> {
        let mut m = self.matrix.matmul(rhs)?;
        let s = m.max_abs();
        if s > 0.0 && s.is_finite() {
            m.scale(1.0 / s);
            self.log_scale += s.ln();
        }
        self.matrix = m;
        Ok(())
    }

    /// Eigenvalue moduli of the represented product, largest first.
    pub fn moduli(&self) -> Result<Vec<f64>> {
        let spectrum = eigenvalues(&self.matrix)?;
        let factor = self.log_scale.exp();
        Ok(spectrum.moduli().into_iter().map(|m| m * factor).collect())
    }
}

fn check_lag(k: usize, len: usize) -> Result<()> {
    if k == 0 || k >= len {
        return Err(Error::invalid(format!(
            "lag {k} is outside 1..{len} for a sequence of length {len}"
        )));
    }
    Ok(())
}

/// Eigenvalue moduli of `∂h_T/∂h_{T−k} = J_{T−1} ⋯ J_{T−k}` over a full
/// forward pass of `sequence` (`T` = its length), largest first.
pub fn chained_jacobian_moduli(
    params: &ModelParams,
    sequence: &Trajectory,
    k: usize,
) -> Result<Vec<f64>> {
    check_lag(k, sequence.len())?;
    let (trace, _) = params.prepare().forward(sequence)?;
    let mut product = ScaledProduct::identity(params.config.hidden_dim);
    for i in (trace.len() - k..trace.len()).rev() {
        product.mul_right(&step_jacobian(params, &trace, i)?)?;
    }
    product.moduli()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCurve {
    pub ks: Vec<usize>,
    /// Mean over sequences of the mean eigenvalue modulus.
    pub mean_modulus: Vec<f64>,
    /// Standard error of `mean_modulus` over sequences.
    pub stderr: Vec<f64>,
    /// Mean over sequences of the largest eigenvalue modulus.
    pub max_modulus: Vec<f64>,
}

/// `(mean modulus, max modulus)` for each requested lag, reusing one
/// growing product per sequence.
fn sequence_spectrum(
    params: &ModelParams,
    trace: &ForwardTrace,
    sorted_ks: &[usize],
) -> Result<Vec<(f64, f64)>> {
    let len = trace.len();
    let mut product = ScaledProduct::identity(params.config.hidden_dim);
    let mut out = Vec::with_capacity(sorted_ks.len());
    let mut done = 0;
    for &k in sorted_ks {
        while done < k {
            product.mul_right(&step_jacobian(params, trace, len - 1 - done)?)?;
            done += 1;
        }
        let moduli = product.moduli()?;
        let mean = moduli.iter().sum::<f64>() / moduli.len() as f64;
        out.push((mean, moduli[0]));
    }
    Ok(out)
}

/// For each `k`, the average over `sequences` of the mean eigenvalue modulus
/// of `∂h_T/∂h_{T−k}`. Sequences are processed in parallel.
pub fn spectrum_curve(
    params: &ModelParams,
    sequences: &[Trajectory],
    ks: &[usize],
) -> Result<SpectrumCurve> {
    if sequences.is_empty() || ks.is_empty() {
        return Err(Error::invalid(
            "spectrum curve needs at least one sequence and one lag",
        ));
    }
    let shortest = sequences.iter().map(|s| s.len()).min().unwrap_or(0);
    for &k in ks {
        check_lag(k, shortest)?;
    }
    let mut order: Vec<usize> = (0..ks.len()).collect();
    order.sort_by_key(|&i| ks[i]);
    let sorted: Vec<usize> = order.iter().map(|&i| ks[i]).collect();
    let prepared = params.prepare();
    let per_sequence = sequences
        .par_iter()
        .map(|s| {
            let (trace, _) = prepared.forward(s)?;
            sequence_spectrum(params, &trace, &sorted)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut curve = SpectrumCurve {
        ks: ks.to_vec(),
        mean_modulus: vec![0.0; ks.len()],
        stderr: vec![0.0; ks.len()],
        max_modulus: vec![0.0; ks.len()],
    };
    for (pos, &slot) in order.iter().enumerate() {
        let means: Vec<f64> = per_sequence.iter().map(|v| v[pos].0).collect();
        let maxes: Vec<f64> = per_sequence.iter().map(|v| v[pos].1).collect();
        let (m, se) = mean_and_stderr(&means);
        curve.mean_modulus[slot] = m;
        curve.stderr[slot] = se;
        curve.max_modulus[slot] = maxes.iter().sum::<f64>() / maxes.len() as f64;
    }
    Ok(curve)
}

/// `k,mean_modulus,stderr,model_tag,max_modulus` rows for each tagged curve.
pub fn write_spectrum_csv<W: Write>(
    mut out: W,
    curves: &[(&str, &SpectrumCurve)],
) -> std::io::Result<()> {
    writeln!(out, "k,mean_modulus,stderr,model_tag,max_modulus")?;
    for (tag, c) in curves {
        for i in 0..c.ks.len() {
            writeln!(
                out,
                "{},{},{},{tag},{}",
                c.ks[i], c.mean_modulus[i], c.stderr[i], c.max_modulus[i]
            )?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// No dropout.
    Baseline,
    /// `N = E[N]` on every example.
    Fixed,
    /// `N ~ U{0, …, 2 E[N]}`.
    Random,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fixed => "fixed",
            Variant::Random => "random",
        }
    }
}

/// One sweep configuration: a dropout variant at a given expected count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub variant: Variant,
    pub expected_dropout: usize,
}

impl SweepCell {
    pub fn baseline() -> Self {
        Self {
            variant: Variant::Baseline,
            expected_dropout: 0,
        }
    }

    pub fn new(variant: Variant, expected_dropout: usize) -> Result<Self> {
        if variant == Variant::Baseline && expected_dropout != 0 {
            return Err(Error::invalid("the baseline cell has no dropout"));
        }
        Ok(Self {
            variant,
            expected_dropout,
        })
    }

    pub fn sampler(&self) -> DropoutSampler {
        match self.variant {
            Variant::Baseline => DropoutSampler::Fixed(0),
            Variant::Fixed => DropoutSampler::Fixed(self.expected_dropout),
            Variant::Random => DropoutSampler::uniform_inclusive(0, 2 * self.expected_dropout),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub base: TrainConfig,
    pub cells: Vec<SweepCell>,
    pub repeats: usize,
}

impl SweepPlan {
    /// One shared baseline plus fixed and random cells at every `E[N]` in
    /// `1..=max_expected`.
    pub fn grid(base: TrainConfig, max_expected: usize, repeats: usize) -> Self {
        let mut cells = vec![SweepCell::baseline()];
        for variant in [Variant::Fixed, Variant::Random] {
            cells.extend((1..=max_expected).map(|e| SweepCell {
                variant,
                expected_dropout: e,
            }));
        }
        Self {
            base,
            cells,
            repeats,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.repeats == 0 {
            return Err(Error::invalid(
                "a sweep needs at least one cell and one repeat",
            ));
        }
        for c in &self.cells {
            SweepCell::new(c.variant, c.expected_dropout)?;
        }
        self.base.validate()
    }

    /// Seed of repeat `r`. Every cell trains repeat `r` from the same seed, so
    /// cells see identical initializations, training sequences and
    /// evaluation batches and differ only in their dropout.
    pub fn run_seed(&self, repeat: usize) -> u64 {
        RngState::new(self.base.seed)
            .substream("sweep")
            .indexed(repeat as u64)
            .next_u64()
    }

    pub fn config_for(&self, cell: &SweepCell, repeat: usize) -> TrainConfig {
        TrainConfig {
            seed: self.run_seed(repeat),
            sampler: cell.sampler(),
            eval_every: None,
            ..self.base.clone()
        }
    }
}

/// Outcome of one (cell, repeat) training run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub cell: usize,
    pub repeat: usize,
    pub seed: u64,
    /// Final metrics, or the diagnostic of a failed run.
    pub outcome: std::result::Result<MetricReport, String>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub records: Vec<RunRecord>,
    /// Per-cell mean and standard error over successful repeats.
    pub summaries: Vec<Option<MetricSummary>>,
}

impl SweepResult {
    fn from_records(plan: &SweepPlan, records: Vec<RunRecord>) -> Result<Self> {
        let summaries = (0..plan.cells.len())
            .map(|c| {
                let ok: Vec<MetricReport> = records
                    .iter()
                    .filter(|r| r.cell == c)
                    .filter_map(|r| r.outcome.as_ref().ok().copied())
                    .collect();
                if ok.is_empty() {
                    Ok(None)
                } else {
                    MetricSummary::from_reports(&ok).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cells: plan.cells.clone(),
            records,
            summaries,
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(|r| r.outcome.is_err())
    }

    pub fn summary(&self, variant: Variant, expected_dropout: usize) -> Option<&MetricSummary> {
        let cell = SweepCell {
            variant,
            expected_dropout,
        };
        self.cells
            .iter()
            .position(|c| *c == cell)
            .and_then(|i| self.summaries[i].as_ref())
    }

    /// Per-run rows of each cell followed by that cell's aggregate row.
    /// Failed runs have no row; see [`SweepResult::failures`].
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for (c, cell) in self.cells.iter().enumerate() {
            let tag = |seed: String, report, stderr| MetricRow {
                variant: cell.variant.as_str().to_string(),
                expected_dropout: cell.expected_dropout as f64,
                seed,
                report,
                stderr,
            };
            for r in self.records.iter().filter(|r| r.cell == c) {
                if let Ok(report) = r.outcome {
                    rows.push(tag(r.seed.to_string(), report, None));
                }
            }
            if let Some(s) = self.summaries[c] {
                rows.push(tag("aggregate".to_string(), s.mean, Some(s.stderr)));
            }
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_metric_csv(out, &self.metric_rows())
    }
}

/// Trains every (cell, repeat) pair and keeps the trained models.
/// `models[cell][repeat]` is `None` for failed runs.
pub fn run_sweep_detailed(
    plan: &SweepPlan,
) -> Result<(SweepResult, Vec<Vec<Option<ModelParams>>>)> {
    plan.validate()?;
    let jobs: Vec<(usize, usize)> = (0..plan.cells.len())
        .flat_map(|c| (0..plan.repeats).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<(RunRecord, Option<ModelParams>)> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let config = plan.config_for(&plan.cells[c], r);
            let (outcome, model) = match train(&config) {
                Ok((params, log)) => {
                    let report = log
                        .final_report()
                        .expect("training always evaluates after its last step");
                    (Ok(report), Some(params))
                }
                Err(e) => (Err(e.to_string()), None),
            };
            let record = RunRecord {
                cell: c,
                repeat: r,
                seed: config.seed,
                outcome,
            };
            (record, model)
        })
        .collect();
    let mut models = vec![vec![None; plan.repeats]; plan.cells.len()];
    let mut records = Vec::with_capacity(outcomes.len());
    for (record, model) in outcomes {
        models[record.cell][record.repeat] = model;
        records.push(record);
    }
    Ok((SweepResult::from_records(plan, records)?, models))
}

pub fn run_sweep(plan: &SweepPlan) -> Result<SweepResult> {
    Ok(run_sweep_detailed(plan)?.0)
}
