//! Per-mini-batch timing across hidden-layer depths.

use std::io::Write;

use anyhow::{ensure, Context, Result};
use nn_emd_core::trainer::{run_session, Pipeline, TrainingMode};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::{load_split, partition};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: TrainingMode,
    pub hidden_layers: usize,
    pub width: usize,
    pub batch_size: usize,
    pub batches: usize,
    /// Median wall time of one mini-batch.
    pub per_batch_ms: f64,
    pub keyreq_ms: f64,
    pub decrypt_ms: f64,
    pub plain_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One encrypted epoch over `bench_batches` mini-batches per source for
/// every configured depth and mode.
pub fn bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    ensure!(cfg.bench_batches > 0 && cfg.bench_batch_size > 0, "empty benchmark");
    let full = load_split(cfg, true)?.context("no training data configured")?;
    let modes = if cfg.bench_modes.is_empty() {
        vec![cfg.mode]
    } else {
        cfg.bench_modes.clone()
    };
    let params = cfg.params()?;
    let classes = *cfg.arch.last().expect("validated");
    let mut rows = Vec::new();
    for mode in modes {
        let mut run = cfg.clone();
        run.mode = mode;
        run.batch_size = cfg.bench_batch_size;
        run.epochs = 1;
        run.shuffle_period = 1;
        let per_source = match mode {
            TrainingMode::Hpt => cfg.sources,
            TrainingMode::Vpt => 1,
            TrainingMode::Hybrid => cfg.sources + 1,
        };
        let mut train = full.clone();
        train.truncate(cfg.bench_batch_size * cfg.bench_batches * per_source);
        let sources = partition(&run, &train)?;
        for &depth in &cfg.bench_depths {
            run.arch = std::iter::once(train.x.ncols())
                .chain(std::iter::repeat(cfg.bench_width).take(depth))
                .chain(std::iter::once(classes))
                .collect();
            let out = run_session(&sources, &run.session(params.clone()), Pipeline::Encrypted, |_, _| {})?;
            let m = &out.metrics;
            rows.push(BenchRow {
                mode,
                hidden_layers: depth,
                width: cfg.bench_width,
                batch_size: cfg.bench_batch_size,
                batches: m.len(),
                per_batch_ms: median(m.iter().map(|b| b.t_keyreq_ms + b.t_decrypt_ms + b.t_plain_ms).collect()),
                keyreq_ms: median(m.iter().map(|b| b.t_keyreq_ms).collect()),
                decrypt_ms: median(m.iter().map(|b| b.t_decrypt_ms).collect()),
                plain_ms: median(m.iter().map(|b| b.t_plain_ms).collect()),
            });
        }
    }
    Ok(rows)
}

pub fn print_report<W: Write>(rows: &[BenchRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "{:<7} {:>6} {:>6} {:>6} {:>13} {:>11} {:>11} {:>9}",
        "mode", "hidden", "width", "batch", "per_batch_ms", "keyreq_ms", "decrypt_ms", "plain_ms"
    )?;
    for r in rows {
        writeln!(
            out,
            "{:<7} {:>6} {:>6} {:>6} {:>13.1} {:>11.1} {:>11.1} {:>9.2}",
            format!("{:?}", r.mode).to_lowercase(),
            r.hidden_layers,
            r.width,
            r.batch_size,
            r.per_batch_ms,
            r.keyreq_ms,
            r.decrypt_ms,
            r.plain_ms
        )?;
    }
    Ok(())
}
