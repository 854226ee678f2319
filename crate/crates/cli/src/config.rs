//! Flat `key = value` run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then an optional
//! file, then command-line overrides. Keys use dotted section prefixes such
//! as `model.hidden_dim`; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use recency_lab::analysis::SweepPlan;
use recency_lab::augmentation::DropoutSampler;
use recency_lab::simulator::ClusterLayout;
use recency_lab::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{location}: expected `key = value`, got `{line}`")]
    Syntax { location: String, line: String },
    #[error("cannot read configuration file {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Invalid(#[from] recency_lab::Error),
}

/// How the dropout count is drawn during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutKind {
    None,
    Fixed,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dropout_kind: DropoutKind,
    pub dropout_n: usize,
    pub dropout_low: usize,
    pub dropout_high: usize,
    pub dropout_upper_inclusive: bool,
    pub heatmap_rows: usize,
    pub bias_ks: Vec<usize>,
    pub jacobian_ks: Vec<usize>,
    pub jacobian_sequences: usize,
    pub sweep_max_expected: usize,
    pub sweep_repeats: usize,
    pub simulate_count: usize,
    pub simulate_length: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dropout_kind: DropoutKind::None,
            dropout_n: 0,
            dropout_low: 0,
            dropout_high: 5,
            dropout_upper_inclusive: false,
            heatmap_rows: 10,
            bias_ks: (1..=99).collect(),
            jacobian_ks: vec![1, 2, 5, 10, 20, 50, 99],
            jacobian_sequences: 100,
            sweep_max_expected: 5,
            sweep_repeats: 10,
            simulate_count: 1000,
            simulate_length: 100,
        }
    }
}

/// Every key with a one-line description, in listing order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for every random stream"),
    ("train.steps", "optimizer steps"),
    ("train.batch_size", "sequences per step"),
    (
        "train.sequence_length",
        "items per simulated sequence (input plus target)",
    ),
    ("train.clip_norm", "global gradient-norm ceiling, or `none`"),
    (
        "train.eval_every",
        "steps between evaluation snapshots, or `none`",
    ),
    ("optimizer.learning_rate", "Adam step size"),
    ("optimizer.beta1", "Adam first-moment decay"),
    ("optimizer.beta2", "Adam second-moment decay"),
    ("optimizer.epsilon", "Adam denominator offset"),
    ("model.embed_dim", "input embedding width"),
    ("model.hidden_dim", "GRU state width"),
    ("model.head_dim1", "first ReLU layer width"),
    (
        "model.head_dim2",
        "second ReLU layer width (output embedding width)",
    ),
    ("model.temperature", "softmax temperature"),
    ("simulator.num_clusters", "number of item clusters"),
    ("simulator.items_per_cluster", "items in each cluster"),
    (
        "simulator.p_same",
        "probability that a transition stays in its cluster",
    ),
    ("dropout.kind", "`none`, `fixed` or `uniform`"),
    ("dropout.n", "count removed by the fixed sampler"),
    (
        "dropout.low",
        "lower bound of the uniform sampler (inclusive)",
    ),
    ("dropout.high", "upper bound of the uniform sampler"),
    (
        "dropout.upper_inclusive",
        "whether `dropout.high` itself can be drawn",
    ),
    ("eval.size", "sequences in the evaluation batch"),
    ("eval.heatmap_rows", "rows of the heatmap written by `eval`"),
    (
        "bias_curve.ks",
        "lags for `bias-curve`: list `1,2,5` or range `1-99`",
    ),
    ("jacobian.ks", "lags for `jacobian`: list or range"),
    (
        "jacobian.sequences",
        "evaluation sequences averaged by `jacobian`",
    ),
    (
        "sweep.max_expected",
        "sweep grid covers E[N] = 0..=max_expected",
    ),
    ("sweep.repeats", "training runs per sweep cell"),
    ("simulate.count", "trajectories written by `simulate`"),
    (
        "simulate.length",
        "items per trajectory written by `simulate`",
    ),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: e.to_string(),
        })
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if value.trim() == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// `1,2,5` or `1-99` or a mix such as `1-5,10,20`.
pub fn parse_ks(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    let bad = |reason: &str| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    };
    let mut ks = Vec::new();
    for part in value.split(',').map(str::trim) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (parse(key, a)?, parse(key, b)?);
                if a > b {
                    return Err(bad("descending range"));
                }
                ks.extend(a..=b);
            }
            None => ks.push(parse(key, part)?),
        }
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(bad("lags must be at least 1"));
    }
    Ok(ks)
}

fn format_ks(ks: &[usize]) -> String {
    let contiguous = ks.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous && ks.len() > 2 {
        format!("{}-{}", ks[0], ks[ks.len() - 1])
    } else {
        ks.iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn optional<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.sequence_length" => t.sequence_length = parse(key, value)?,
            "train.clip_norm" => t.clip_norm = parse_optional(key, value)?,
            "train.eval_every" => t.eval_every = parse_optional(key, value)?,
            "optimizer.learning_rate" => t.optimizer.learning_rate = parse(key, value)?,
            "optimizer.beta1" => t.optimizer.beta1 = parse(key, value)?,
            "optimizer.beta2" => t.optimizer.beta2 = parse(key, value)?,
            "optimizer.epsilon" => t.optimizer.epsilon = parse(key, value)?,
            "model.embed_dim" => t.model.embed_dim = parse(key, value)?,
            "model.hidden_dim" => t.model.hidden_dim = parse(key, value)?,
            "model.head_dim1" => t.model.head_dims[0] = parse(key, value)?,
            "model.head_dim2" => t.model.head_dims[1] = parse(key, value)?,
            "model.temperature" => t.model.temperature = parse(key, value)?,
            "simulator.num_clusters" => t.transitions.layout.num_clusters = parse(key, value)?,
            "simulator.items_per_cluster" => {
                t.transitions.layout.items_per_cluster = parse(key, value)?
            }
            "simulator.p_same" => t.transitions.p_same = parse(key, value)?,
            "dropout.kind" => {
                self.dropout_kind = match value.trim() {
                    "none" => DropoutKind::None,
                    "fixed" => DropoutKind::Fixed,
                    "uniform" => DropoutKind::Uniform,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: other.to_string(),
                            reason: "expected none, fixed or uniform".to_string(),
                        })
                    }
                }
            }
            "dropout.n" => self.dropout_n = parse(key, value)?,
            "dropout.low" => self.dropout_low = parse(key, value)?,
            "dropout.high" => self.dropout_high = parse(key, value)?,
            "dropout.upper_inclusive" => self.dropout_upper_inclusive = parse(key, value)?,
            "eval.size" => t.eval_size = parse(key, value)?,
            "eval.heatmap_rows" => self.heatmap_rows = parse(key, value)?,
            "bias_curve.ks" => self.bias_ks = parse_ks(key, value)?,
            "jacobian.ks" => self.jacobian_ks = parse_ks(key, value)?,
            "jacobian.sequences" => self.jacobian_sequences = parse(key, value)?,
            "sweep.max_expected" => self.sweep_max_expected = parse(key, value)?,
            "sweep.repeats" => self.sweep_repeats = parse(key, value)?,
            "simulate.count" => self.simulate_count = parse(key, value)?,
            "simulate.length" => self.simulate_length = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        self.sync();
        Ok(())
    }

    /// Keeps derived fields (vocabulary size, sampler) in step with the keys.
    fn sync(&mut self) {
        let layout = self.train.transitions.layout;
        self.train.model.vocab_size = layout.num_clusters * layout.items_per_cluster;
        self.train.sampler = self.sampler();
    }

    pub fn sampler(&self) -> DropoutSampler {
        match self.dropout_kind {
            DropoutKind::None => DropoutSampler::Fixed(0),
            DropoutKind::Fixed => DropoutSampler::Fixed(self.dropout_n),
            DropoutKind::Uniform => DropoutSampler::Uniform {
                low: self.dropout_low,
                high: self.dropout_high,
                upper_inclusive: self.dropout_upper_inclusive,
            },
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "train.steps" => t.steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.sequence_length" => t.sequence_length.to_string(),
            "train.clip_norm" => optional(t.clip_norm),
            "train.eval_every" => optional(t.eval_every),
            "optimizer.learning_rate" => t.optimizer.learning_rate.to_string(),
            "optimizer.beta1" => t.optimizer.beta1.to_string(),
            "optimizer.beta2" => t.optimizer.beta2.to_string(),
            "optimizer.epsilon" => t.optimizer.epsilon.to_string(),
            "model.embed_dim" => t.model.embed_dim.to_string(),
            "model.hidden_dim" => t.model.hidden_dim.to_string(),
            "model.head_dim1" => t.model.head_dims[0].to_string(),
            "model.head_dim2" => t.model.head_dims[1].to_string(),
            "model.temperature" => t.model.temperature.to_string(),
            "simulator.num_clusters" => t.transitions.layout.num_clusters.to_string(),
            "simulator.items_per_cluster" => t.transitions.layout.items_per_cluster.to_string(),
            "simulator.p_same" => t.transitions.p_same.to_string(),
            "dropout.kind" => match self.dropout_kind {
                DropoutKind::None => "none",
                DropoutKind::Fixed => "fixed",
                DropoutKind::Uniform => "uniform",
            }
            .to_string(),
            "dropout.n" => self.dropout_n.to_string(),
            "dropout.low" => self.dropout_low.to_string(),
            "dropout.high" => self.dropout_high.to_string(),
            "dropout.upper_inclusive" => self.dropout_upper_inclusive.to_string(),
            "eval.size" => t.eval_size.to_string(),
            "eval.heatmap_rows" => self.heatmap_rows.to_string(),
            "bias_curve.ks" => format_ks(&self.bias_ks),
            "jacobian.ks" => format_ks(&self.jacobian_ks),
            "jacobian.sequences" => self.jacobian_sequences.to_string(),
            "sweep.max_expected" => self.sweep_max_expected.to_string(),
            "sweep.repeats" => self.sweep_repeats.to_string(),
            "simulate.count" => self.simulate_count.to_string(),
            "simulate.length" => self.simulate_length.to_string(),
            _ => return None,
        })
    }

    /// Every key with its resolved value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _)| {
                (
                    k.to_string(),
                    self.get(k).expect("listed keys are readable"),
                )
            })
            .collect()
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                location: format!("{origin}:{}", n + 1),
                line: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax {
                location: "--set".to_string(),
                line: assignment.to_string(),
            })?;
        self.set(key.trim(), value.trim())
    }

    /// The configuration in file form, one documented key per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).unwrap()));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        ClusterLayout::new(
            self.train.transitions.layout.num_clusters,
            self.train.transitions.layout.items_per_cluster,
        )?;
        self.train.validate()?;
        let positive = [
            ("eval.heatmap_rows", self.heatmap_rows),
            ("jacobian.sequences", self.jacobian_sequences),
            ("sweep.repeats", self.sweep_repeats),
            ("simulate.length", self.simulate_length),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::BadValue {
                key: key.to_string(),
                value: "0".to_string(),
                reason: "must be at least 1".to_string(),
            });
        }
        Ok(())
    }

    pub fn sweep_plan(&self) -> SweepPlan {
        SweepPlan::grid(
            self.train.clone(),
            self.sweep_max_expected,
            self.sweep_repeats,
        )
    }
}
