//! Configured end-to-end runs: data loading, the headline experiment and the
//! discriminator ablation grid.

mod ablation;
mod config;
mod metrics;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use ablation::{
    ablation_grid, run_ablation, AblationSummary, AblationTask, CellResult, ABLATION_FILE,
};
pub use config::{ExperimentConfig, ExtractorKind, DATA_DIR_ENV, DEFAULT_DATA_DIR};
pub use metrics::{
    read_accuracies, write_atomic, MetricsRow, MetricsWriter, METRICS_FILE, METRICS_HEADER,
    SUMMARY_FILE, TIMING_FILE, TRANSCRIPT_FILE,
};

use crate::datasets::{load_idx, partition, LabeledSample};
use crate::error::{Error, Result};
use crate::federation::wire::TranscriptWriter;
use crate::federation::Federation;
use crate::seed;
use metrics::SummaryText;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";

/// Loads the MNIST training pair from `dir`. All shards, including the
/// target's held-out test split, are drawn from it disjointly.
pub fn load_mnist(dir: &Path) -> Result<Vec<LabeledSample>> {
    load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    /// Representative's shard loss before and after each initialisation epoch.
    pub init_losses: Vec<f64>,
    /// Target accuracy after initialisation, before any round.
    pub initial_accuracy: f64,
    pub rows: Vec<MetricsRow>,
    pub final_accuracy: f64,
}

impl RunSummary {
    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target_accuracy).collect()
    }
}

/// Builds the federation described by `config` over `samples`.
pub fn build_federation(
    config: &ExperimentConfig,
    samples: &[LabeledSample],
) -> Result<Federation> {
    config.validate()?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    if let Some(s) = samples.iter().find(|s| s.label >= config.classes) {
        return Err(Error::Config(format!(
            "label {} outside the configured {} classes",
            s.label, config.classes
        )));
    }
    let spec = config.model(first.image.shape())?;
    let data = partition(samples, &config.partition_plan())?
        .shift_target(&config.shift()?, seed::derive(config.seed, 2))?;
    Ok(
        Federation::new(&spec, data, config.schedule(), seed::derive(config.seed, 3))?
            .with_representative(config.representative),
    )
}

/// Initialisation followed by `config.rounds` rounds. Writes `metrics.csv`,
/// `timing.csv`, `summary.txt` and optionally `transcript.bin` into
/// `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig, samples: &[LabeledSample]) -> Result<RunSummary> {
    let mut fed = build_federation(config, samples)?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut metrics = MetricsWriter::create(out)?;
    let mut transcript = if config.transcript {
        Some(TranscriptWriter::create(&out.join(TRANSCRIPT_FILE))?)
    } else {
        None
    };

    let start = Instant::now();
    let init = fed.run_initialization()?;
    if let Some(t) = transcript.as_mut() {
        t.write(&init.broadcast)?;
    }
    let initial_accuracy = fed.evaluate_target()?.accuracy;

    let mut rows = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let report = fed.run_round()?;
        for loss in [
            Some(report.mean_classification_loss),
            report.domain_loss,
            report.consistency_loss,
        ]
        .into_iter()
        .flatten()
        {
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "round {}: non-finite loss",
                    report.round
                )));
            }
        }
        if let Some(t) = transcript.as_mut() {
            for m in &report.messages {
                t.write(m)?;
            }
        }
        let row = MetricsRow {
            round: report.round,
            mean_classification_loss: report.mean_classification_loss,
            domain_loss: report.domain_loss,
            consistency_loss: report.consistency_loss,
            target_accuracy: fed.evaluate_target()?.accuracy,
            wall_clock_ms: start.elapsed().as_millis(),
        };
        metrics.append(&row)?;
        rows.push(row);
    }
    if let Some(t) = transcript {
        t.finish()?;
    }

    let final_eval = fed.evaluate_target()?;
    let mut summary = SummaryText::default();
    summary.put("rounds", config.rounds);
    summary.put("seed", config.seed);
    summary.put("init_loss_first", init.shard_losses[0]);
    summary.put(
        "init_loss_last",
        init.shard_losses[init.shard_losses.len() - 1],
    );
    summary.put("initial_target_accuracy", initial_accuracy);
    summary.put("final_target_accuracy", final_eval.accuracy);
    summary.put("mean_source_accuracy", fed.mean_source_accuracy()?);
    let confusion: Vec<String> = final_eval
        .confusion
        .iter()
        .map(|row| row.iter().map(u64::to_string).collect::<Vec<_>>().join(" "))
        .collect();
    summary.put("confusion", confusion.join(" | "));
    write_atomic(&out.join(SUMMARY_FILE), summary.as_str())?;

    Ok(RunSummary {
        out_dir: out.clone(),
        init_losses: init.shard_losses,
        initial_accuracy,
        rows,
        final_accuracy: final_eval.accuracy,
    })
}
