//! All-in-one runs: authority, clients and server in one process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use nn_emd_core::nn::{self, MlpModel};
use nn_emd_core::trainer::{run_session, BatchMetrics, DatasetType, Pipeline, SessionOutcome, SessionSetup};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{load_split, partition, Dataset};
use crate::roles::check_sizes;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub accuracy: Option<f64>,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub key_requests: usize,
    pub wall_ms: f64,
    pub checkpoint: PathBuf,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?),
        })
    }

    pub fn batch(&mut self, m: &BatchMetrics) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(m)?)?;
        Ok(())
    }

    pub fn summary(mut self, s: &RunSummary) -> Result<()> {
        writeln!(self.out, "{}", serde_json::json!({ "summary": s }))?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, nn::checkpoint_bytes(model)).with_context(|| format!("writing {}", path.display()))
}

pub fn test_accuracy(model: &MlpModel, test: Option<&Dataset>) -> Result<Option<f64>> {
    test.map(|t| nn::accuracy(model, t.x.view(), &t.labels))
        .transpose()
        .map_err(Into::into)
}

/// Trains through one pipeline on the configured dataset.
pub fn train_pipeline(
    cfg: &RunConfig,
    pipeline: Pipeline,
    mut on_batch: impl FnMut(&BatchMetrics),
) -> Result<(SessionOutcome, Option<f64>)> {
    let train = load_split(cfg, true)?.context("no training data configured")?;
    let test = load_split(cfg, false)?;
    let sources = partition(cfg, &train)?;
    if cfg.eta.is_some() || cfg.etas.is_some() || cfg.n.is_some() {
        let metas: Vec<_> = sources.iter().map(|s| s.meta.clone()).collect();
        let hashes = sources
            .iter()
            .filter(|s| s.meta.dataset_type == DatasetType::Partial)
            .map(|s| (s.meta.source_id, s.id_hashes()))
            .collect();
        check_sizes(cfg, &SessionSetup::derive(&metas, &cfg.plan_options(), &hashes)?)?;
    }
    let session = cfg.session(cfg.params()?);
    let outcome = run_session(&sources, &session, pipeline, |m, _| on_batch(m))?;
    let acc = test_accuracy(&outcome.model, test.as_ref())?;
    Ok((outcome, acc))
}

pub fn run_all_in_one(cfg: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let mut metrics = MetricsWriter::create(&cfg.metrics_path())?;
    let mut write_err = None;
    let (outcome, accuracy) = train_pipeline(cfg, Pipeline::Encrypted, |m| {
        log::debug!("epoch {} batch {} loss {:.4}", m.epoch, m.batch, m.loss);
        if let Err(e) = metrics.batch(m) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let checkpoint = cfg.checkpoint_path();
    write_checkpoint(&outcome.model, &checkpoint)?;
    let summary = RunSummary {
        accuracy,
        steps: outcome.model.step,
        final_loss: outcome.metrics.last().map(|m| m.loss),
        key_requests: outcome.key_log.len(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        checkpoint,
    };
    metrics.summary(&summary)?;
    Ok(summary)
}
