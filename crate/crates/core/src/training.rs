//! Training loop: fresh simulated sequences every step, recency dropout on
//! the inputs, mean next-item cross-entropy, Adam with global-norm clipping.
//!
//! Every random draw comes from a labelled substream of the run seed, so a
//! run is a pure function of its [`TrainConfig`]. Per-example work inside a
//! step runs in parallel over fixed-size chunks whose gradients are then
//! summed in chunk order, which keeps results independent of thread count.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{make_training_example, AugmentedExample, DropoutSampler};
use crate::error::{Error, Result};
use crate::metrics::{EvalBatch, MetricReport};
use crate::numerics::RngState;
use crate::seqmodel::{
    backward, loss_nll, GradientAccumulator, Gradients, ModelConfig, ModelParams,
};
use crate::simulator::{MarkovChain, Trajectory, TransitionSpec};

/// Examples per gradient chunk. Fixed so the reduction order never depends
/// on how many threads are available.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub optimizer: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub sampler: DropoutSampler,
    pub model: ModelConfig,
    pub transitions: TransitionSpec,
    /// Evaluate every this many steps (and after the last step); `None` only
    /// evaluates after the last step.
    pub eval_every: Option<usize>,
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 128,
            sequence_length: 100,
            optimizer: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 0,
            sampler: DropoutSampler::Fixed(0),
            model: ModelConfig::default(),
            transitions: TransitionSpec::default(),
            eval_every: Some(100),
            eval_size: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_size == 0 {
            return Err(Error::invalid(
                "steps, batch_size and eval_size must be at least 1",
            ));
        }
        if self.sequence_length < 2 {
            return Err(Error::invalid("sequence_length must be at least 2"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        let o = &self.optimizer;
        let ok = o.learning_rate >= 0.0
            && o.learning_rate.is_finite()
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.epsilon > 0.0;
        if !ok {
            return Err(Error::invalid(format!("invalid optimizer settings {o:?}")));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        self.sampler.validate()?;
        self.model.validate()?;
        self.transitions.validate()?;
        let items = self.transitions.layout.total_items();
        if items != self.model.vocab_size {
            return Err(Error::invalid(format!(
                "model vocabulary ({}) must equal the simulated item count ({items})",
                self.model.vocab_size
            )));
        }
        Ok(())
    }

    fn root_rng(&self) -> RngState {
        RngState::new(self.seed)
    }

    /// The run's held-out evaluation sequences.
    pub fn evaluation_sequences(&self, chain: &MarkovChain) -> Result<Vec<Trajectory>> {
        chain.sample_batch(
            self.eval_size,
            self.sequence_length,
            &self.root_rng().substream("evaluation"),
        )
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: ModelParams,
    pub second: ModelParams,
    pub steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, model: ModelConfig) -> Result<Self> {
        Ok(Self {
            config,
            first: ModelParams::zeros(model)?,
            second: ModelParams::zeros(model)?,
            steps: 0,
        })
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
            .zip(grads.tensors());
        for ((((_, p), (_, m)), (_, v)), g) in tensors {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Training examples for one step: fresh trajectories, each with its own
/// dropout draw.
pub fn make_batch(
    chain: &MarkovChain,
    config: &TrainConfig,
    step: usize,
) -> Result<Vec<AugmentedExample>> {
    let root = config.root_rng();
    let sequences = chain.sample_batch(
        config.batch_size,
        config.sequence_length,
        &root.substream("simulation").indexed(step as u64),
    )?;
    let dropout = root.substream("dropout").indexed(step as u64);
    sequences
        .iter()
        .enumerate()
        .map(|(i, s)| make_training_example(s, &config.sampler, &mut dropout.indexed(i as u64)))
        .collect()
}

/// Metrics measured after a given step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss at each step, before that step's update.
    pub losses: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub optimizer_steps: u64,
}

impl TrainLog {
    pub fn final_report(&self) -> Option<MetricReport> {
        self.snapshots.last().map(|s| s.report)
    }

    /// `step,loss,map1,map10,entropy,kl`; metric cells are empty on steps
    /// without a snapshot.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss,map1,map10,entropy,kl")?;
        let mut snaps = self.snapshots.iter().peekable();
        for (step, loss) in self.losses.iter().enumerate() {
            write!(out, "{step},{loss}")?;
            match snaps.next_if(|s| s.step == step) {
                Some(s) => {
                    let r = s.report;
                    writeln!(out, ",{},{},{},{}", r.map1, r.map10, r.entropy, r.kl)?
                }
                None => writeln!(out, ",,,,")?,
            }
        }
        Ok(())
    }
}

/// Mean loss and gradients of one batch.
fn batch_gradients(params: &ModelParams, batch: &[AugmentedExample]) -> Result<(f64, Gradients)> {
    let prepared = params.prepare();
    let chunks = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = GradientAccumulator::new(params.config)?;
            let mut loss = 0.0;
            for ex in chunk {
                let (trace, dist) = prepared.forward(&ex.input)?;
                loss += acc.accumulate(params, &trace, &dist, ex.target, None)?;
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = chunks.into_iter();
    let (mut loss, mut acc) = iter.next().expect("batch is non-empty");
    for (l, a) in iter {
        loss += l;
        acc.merge(&a);
    }
    let n = batch.len() as f64;
    Ok((loss / n, acc.finish(params, 1.0 / n)))
}

fn evaluate(
    params: &ModelParams,
    chain: &MarkovChain,
    eval: &[Trajectory],
) -> Result<MetricReport> {
    let batch = EvalBatch::evaluate(params, eval.to_vec())?;
    MetricReport::compute(&batch, chain.stationary())
}

/// Trains a fresh model and returns it with its log.
pub fn train(config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let chain = MarkovChain::from_spec(&config.transitions)?;
    let mut params = ModelParams::init(config.model, &mut config.root_rng().substream("init"))?;
    let mut adam = AdamState::new(config.optimizer, config.model)?;
    let eval = config.evaluation_sequences(&chain)?;
    let mut log = TrainLog::default();
    for step in 0..config.steps {
        let batch = make_batch(&chain, config, step)?;
        let (loss, mut grads) = batch_gradients(&params, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss,
                parameter_norms: params.tensor_norms(),
            });
        }
        log.losses.push(loss);
        if let Some(limit) = config.clip_norm {
            let norm = grads.global_norm();
            if norm > limit {
                grads.scale(limit / norm);
            }
        }
        adam.update(&mut params, &grads);
        let last = step + 1 == config.steps;
        let due = config.eval_every.is_some_and(|e| (step + 1) % e == 0);
        if last || due {
            log.snapshots.push(Snapshot {
                step,
                report: evaluate(&params, &chain, &eval)?,
            });
        }
    }
    log.optimizer_steps = adam.steps;
    Ok((params, log))
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences (step `1e-3`) over every parameter, for one training
/// example drawn from the configured pipeline. Entry-wise relative error is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check(config: &TrainConfig) -> Result<f64> {
    const EPS: f64 = 1e-3;
    config.validate()?;
    let m = config.model;
    if m.vocab_size > 20
        || m.embed_dim > 8
        || m.hidden_dim > 8
        || m.head_dims.iter().any(|&d| d > 8)
    {
        return Err(Error::invalid(
            "gradient check is meant for small models (vocab ≤ 20, dims ≤ 8)",
        ));
    }
    let chain = MarkovChain::from_spec(&config.transitions)?;
    let params = ModelParams::init(m, &mut config.root_rng().substream("init"))?;
    let example = make_batch(&chain, config, 0)?.swap_remove(0);
    let prepared = params.prepare();
    let (trace, _) = prepared.forward(&example.input)?;
    let analytic = backward(&params, &trace, example.target)?;

    let loss = |p: &ModelParams| -> Result<f64> {
        let (_, dist) = p.prepare().forward(&example.input)?;
        Ok(loss_nll(&dist, example.target))
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (ti, view) in analytic.tensors().iter().enumerate() {
        for idx in 0..view.data.len() {
            let orig = probe.tensors_mut()[ti].1[idx];
            probe.tensors_mut()[ti].1[idx] = orig + EPS;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].1[idx] = orig - EPS;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].1[idx] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = view.data[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::ClusterLayout;

    fn tiny(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            sequence_length: 20,
            model: ModelConfig {
                vocab_size: 20,
                embed_dim: 8,
                hidden_dim: 8,
                head_dims: [8, 8],
                temperature: 1.0,
            },
            transitions: TransitionSpec {
                layout: ClusterLayout::new(4, 5).unwrap(),
                p_same: 0.7,
            },
            eval_every: Some(5),
            eval_size: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batch_shapes_and_determinism() {
        let cfg = TrainConfig::default();
        let chain = MarkovChain::from_spec(&cfg.transitions).unwrap();
        let b = make_batch(&chain, &cfg, 3).unwrap();
        assert_eq!(b.len(), 128);
        assert!(b
            .iter()
            .all(|e| e.input.len() == 99 && e.dropped_count == 0));
        assert_eq!(b, make_batch(&chain, &cfg, 3).unwrap());
        assert_ne!(b, make_batch(&chain, &cfg, 4).unwrap());
    }

    #[test]
    fn dropout_does_not_change_the_trajectories() {
        let base = TrainConfig::default();
        let drop = TrainConfig {
            sampler: DropoutSampler::uniform_inclusive(0, 10),
            ..base.clone()
        };
        let chain = MarkovChain::from_spec(&base.transitions).unwrap();
        let a = make_batch(&chain, &base, 0).unwrap();
        let b = make_batch(&chain, &drop, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target, y.target);
            assert_eq!(&x.input.items()[..y.input.len()], y.input.items());
        }
        assert!(b.iter().any(|e| e.dropped_count > 0));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::zeros(cfg).unwrap();
        let mut g = ModelParams::zeros(cfg).unwrap();
        g.gate_bias[0] = 3.0;
        g.gate_bias[1] = -0.5;
        let mut adam = AdamState::new(AdamConfig::default(), cfg).unwrap();
        adam.update(&mut p, &g);
        // bias-corrected first step is lr · g / (|g| + ε)
        assert!((p.gate_bias[0] + 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p.gate_bias[1] - 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert_eq!(p.gate_bias[2], 0.0);
        assert_eq!(adam.steps, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny(1);
        cfg.optimizer.learning_rate = 0.0;
        let (p, log) = train(&cfg).unwrap();
        let init =
            ModelParams::init(cfg.model, &mut RngState::new(cfg.seed).substream("init")).unwrap();
        assert_eq!(p, init);
        assert_eq!(log.losses.len(), 1);
        assert_eq!(log.optimizer_steps, 1);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = tiny(30);
        let (p1, l1) = train(&cfg).unwrap();
        let (p2, l2) = train(&cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
        assert_eq!(l1.optimizer_steps, 30);
        let steps: Vec<usize> = l1.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![4, 9, 14, 19, 24, 29]);
        assert!((l1.losses[0] - 20f64.ln()).abs() < 0.2);
        let tail: f64 = l1.losses[20..].iter().sum::<f64>() / 10.0;
        assert!(tail < l1.losses[0]);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let cfg = tiny(3);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let a = one.install(|| train(&cfg).unwrap());
        let b = four.install(|| train(&cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn log_csv_has_one_row_per_step() {
        let (_, log) = train(&tiny(6)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "step,loss,map1,map10,entropy,kl");
        assert!(lines[1].ends_with(",,,,"));
        assert!(!lines[5].ends_with(",,,,"));
        assert!(!lines[6].ends_with(",,,,"));
    }

    #[test]
    fn gradient_check_on_small_model() {
        let mut cfg = tiny(1);
        cfg.sequence_length = 13;
        let err = gradient_check(&cfg).unwrap();
        assert!(err <= 1e-4, "max relative error {err:e}");
        assert_eq!(err, gradient_check(&cfg).unwrap());
        cfg.optimizer.learning_rate = 0.5;
        assert_eq!(err, gradient_check(&cfg).unwrap());
        assert!(gradient_check(&TrainConfig::default()).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(train(&c).is_err());
        let c = TrainConfig {
            sequence_length: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.model.vocab_size = 50;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            clip_norm: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn exploding_run_reports_step_and_norms() {
        let mut cfg = tiny(50);
        cfg.optimizer.learning_rate = 1e300;
        cfg.clip_norm = None;
        match train(&cfg) {
            Err(Error::NonFiniteLoss {
                step,
                parameter_norms,
                ..
            }) => {
                assert!(step >= 1);
                assert_eq!(parameter_norms.len(), 10);
            }
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }
}
