//! Subcommand bodies. Each writes its artifacts into the output directory
//! and records them in the manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use recency_lab::analysis::{run_sweep, spectrum_curve, write_spectrum_csv, SpectrumCurve};
use recency_lab::augmentation::DropoutSampler;
use recency_lab::metrics::{
    bias_curve, heatmap, write_bias_curve_csv, write_heatmap_csv, write_metric_csv, EvalBatch,
    MetricReport, MetricRow,
};
use recency_lab::numerics::RngState;
use recency_lab::seqmodel::{load_checkpoint, save_checkpoint, ModelParams};
use recency_lab::simulator::{write_trajectories_csv, MarkovChain, Trajectory};
use recency_lab::training::train;

use crate::config::RunConfig;
use crate::manifest::Manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Core(#[from] recency_lab::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("spectrum at k = {k} failed: {source}")]
    Spectrum {
        k: usize,
        #[source]
        source: recency_lab::Error,
    },
    #[error("{failed} of {total} sweep runs failed")]
    SweepFailures { failed: usize, total: usize },
    #[error("checkpoint {path} was trained with a different configuration: {reason}")]
    CheckpointMismatch { path: PathBuf, reason: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::CheckpointMismatch { .. } => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(recency_lab::Error::Io { .. }) => 4,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Spectrum { source, .. } if !source.is_numerical() => 2,
            CliError::Spectrum { .. } | CliError::SweepFailures { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Streams a CSV through `fill` into `dir/name` and records it.
fn emit<F>(dir: &Path, name: &str, manifest: &mut Manifest, fill: F) -> Result<PathBuf, CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let path = dir.join(name);
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);
    fill(&mut out)
        .and_then(|_| out.flush())
        .map_err(io_err(&path))?;
    manifest.add_output(&path).map_err(io_err(&path))?;
    Ok(path)
}

/// The tag written next to curves from a checkpoint: its file stem.
pub fn model_tag(checkpoint: &Path) -> String {
    checkpoint
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_model(config: &RunConfig, path: &Path) -> Result<ModelParams, CliError> {
    let params = load_checkpoint(path)?;
    let items = config.train.transitions.layout.total_items();
    if params.config.vocab_size != items {
        return Err(CliError::CheckpointMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "vocabulary {} but the simulator has {items} items",
                params.config.vocab_size
            ),
        });
    }
    Ok(params)
}

fn evaluation_batch(
    config: &RunConfig,
    params: &ModelParams,
) -> Result<(MarkovChain, EvalBatch), CliError> {
    let chain = MarkovChain::from_spec(&config.train.transitions)?;
    let sequences = config.train.evaluation_sequences(&chain)?;
    let batch = EvalBatch::evaluate(params, sequences)?;
    Ok((chain, batch))
}

pub fn simulate(config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let chain = MarkovChain::from_spec(&config.train.transitions)?;
    let rng = RngState::new(config.train.seed).substream("simulate");
    let trajectories = chain.sample_batch(config.simulate_count, config.simulate_length, &rng)?;
    let layout = config.train.transitions.layout;
    emit(out, "trajectories.csv", manifest, |w| {
        write_trajectories_csv(w, &trajectories, &layout)
    })?;
    Ok(())
}

pub fn train_model(
    config: &RunConfig,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let (params, log) = train(&config.train)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &params)?;
    manifest.add_output(&ckpt).map_err(io_err(&ckpt))?;
    emit(out, "train_log.csv", manifest, |w| log.write_csv(w))?;
    Ok(())
}

fn variant_label(sampler: &DropoutSampler) -> &'static str {
    match sampler {
        DropoutSampler::Fixed(0) => "baseline",
        DropoutSampler::Fixed(_) => "fixed",
        DropoutSampler::Uniform { .. } => "random",
    }
}

pub fn eval(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let params = load_model(config, checkpoint)?;
    let (chain, batch) = evaluation_batch(config, &params)?;
    let report = MetricReport::compute(&batch, chain.stationary())?;
    let row = MetricRow {
        variant: variant_label(&config.train.sampler).to_string(),
        expected_dropout: config.train.sampler.mean(),
        seed: config.train.seed.to_string(),
        report,
        stderr: None,
    };
    emit(out, "metrics.csv", manifest, |w| {
        write_metric_csv(w, &[row])
    })?;
    let rows = config.heatmap_rows.min(batch.len());
    let heat = heatmap(&batch, rows)?;
    let last: Vec<usize> = (0..rows)
        .map(|i| {
            *batch
                .input(i)
                .last()
                .expect("evaluation inputs are non-empty")
        })
        .collect();
    emit(out, "heatmap.csv", manifest, |w| {
        write_heatmap_csv(w, &heat, &last)
    })?;
    Ok(())
}

pub fn sweep(config: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    let plan = config.sweep_plan();
    plan.validate()?;
    for r in 0..plan.repeats {
        manifest
            .seeds
            .insert(format!("repeat_{r}"), plan.run_seed(r));
    }
    let result = run_sweep(&plan)?;
    emit(out, "sweep.csv", manifest, |w| result.write_csv(w))?;
    let failed: Vec<String> = result
        .failures()
        .map(|r| {
            let cell = result.cells[r.cell];
            format!(
                "{} E[N]={} repeat {} (seed {}): {}",
                cell.variant.as_str(),
                cell.expected_dropout,
                r.repeat,
                r.seed,
                r.outcome.as_ref().err().map_or("", String::as_str)
            )
        })
        .collect();
    if !failed.is_empty() {
        let failures = failed.len();
        manifest.details.extend(failed);
        return Err(CliError::SweepFailures {
            failed: failures,
            total: result.records.len(),
        });
    }
    Ok(())
}

/// The spectrum curve, or the first lag whose eigenvalues failed.
fn spectrum_or_failing_lag(
    params: &ModelParams,
    sequences: &[Trajectory],
    ks: &[usize],
) -> Result<SpectrumCurve, CliError> {
    spectrum_curve(params, sequences, ks).map_err(|whole| {
        let failing = ks.iter().find_map(|&k| {
            spectrum_curve(params, sequences, &[k])
                .err()
                .map(|e| (k, e))
        });
        match failing {
            Some((k, source)) => CliError::Spectrum { k, source },
            None => CliError::Core(whole),
        }
    })
}

pub fn jacobian(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let params = load_model(config, checkpoint)?;
    let chain = MarkovChain::from_spec(&config.train.transitions)?;
    let mut sequences = config.train.evaluation_sequences(&chain)?;
    sequences.truncate(config.jacobian_sequences);
    let curve = spectrum_or_failing_lag(&params, &sequences, &config.jacobian_ks)?;
    let tag = model_tag(checkpoint);
    emit(out, "spectrum.csv", manifest, |w| {
        write_spectrum_csv(w, &[(&tag, &curve)])
    })?;
    Ok(())
}

pub fn bias(
    config: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let params = load_model(config, checkpoint)?;
    let (_, batch) = evaluation_batch(config, &params)?;
    let curve = bias_curve(&batch, &config.train.transitions.layout, &config.bias_ks)?;
    let tag = model_tag(checkpoint);
    emit(out, "bias_curve.csv", manifest, |w| {
        write_bias_curve_csv(w, &[(&tag, &curve)])
    })?;
    Ok(())
}
