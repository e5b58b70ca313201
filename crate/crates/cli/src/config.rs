//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nn_emd_core::dlog::DlogMode;
use nn_emd_core::nn::{Activation, Hyperparams};
use nn_emd_core::trainer::{PlanOptions, SessionConfig, TrainingMode};
use nn_emd_core::GroupParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    #[default]
    AllInOne,
    Tpa,
    Server,
    Client,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    #[default]
    MnistIdx,
    Csv,
}

fn default_group() -> String {
    "demo512".into()
}
fn default_two() -> u32 {
    2
}
fn default_tau() -> usize {
    2
}
fn default_arch() -> Vec<usize> {
    vec![784, 128, 10]
}
fn default_lr() -> f64 {
    1.0
}
fn default_batch() -> usize {
    50
}
fn default_epochs() -> usize {
    5
}
fn default_one() -> usize {
    1
}
fn default_sources() -> usize {
    5
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_tpa() -> String {
    "127.0.0.1:7400".into()
}
fn default_server() -> String {
    "127.0.0.1:7401".into()
}
fn default_frame() -> usize {
    256 << 20
}
fn default_connect_ms() -> u64 {
    30_000
}
fn default_depths() -> Vec<usize> {
    vec![1, 3, 5]
}
fn default_bench_width() -> usize {
    64
}
fn default_bench_batches() -> usize {
    3
}
fn default_bench_batch() -> usize {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: TrainingMode,
    #[serde(default)]
    pub role: Role,

    /// Named parameter set; ignored when `lambda` is given.
    #[serde(default = "default_group")]
    pub group: String,
    pub lambda: Option<u32>,
    /// Optional cross-checks against the sizes derived from the plan.
    pub eta: Option<usize>,
    pub etas: Option<Vec<usize>>,
    pub n: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_two")]
    pub eps_client: u32,
    #[serde(default = "default_two")]
    pub eps_server: u32,
    #[serde(default)]
    pub dlog_mode: DlogMode,

    #[serde(default = "default_arch")]
    pub arch: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_one")]
    pub shuffle_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Shared by the client pool only.
    #[serde(default)]
    pub pool_seed: u64,

    #[serde(default)]
    pub dataset_format: DatasetFormat,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    /// Label column of CSV files; the last column when absent.
    pub label_column: Option<String>,
    /// Divides every feature, 255 for raw pixels.
    pub normalize: Option<f64>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,

    /// Full-feature sources (HPT and hybrid).
    #[serde(default = "default_sources")]
    pub sources: usize,
    /// Partial-feature sources (VPT and hybrid).
    #[serde(default = "default_sources")]
    pub vertical_sources: usize,
    /// 1-based index of the label holder among the vertical sources.
    pub label_holder: Option<usize>,

    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub authority_log: Option<PathBuf>,

    #[serde(default = "default_tpa")]
    pub tpa_addr: String,
    #[serde(default = "default_server")]
    pub server_addr: String,
    pub source_id: Option<usize>,
    #[serde(default)]
    pub run_secret: String,
    #[serde(default = "default_frame")]
    pub max_frame_bytes: usize,
    #[serde(default = "default_connect_ms")]
    pub connect_timeout_ms: u64,
    #[serde(default)]
    pub unsafe_override_privacy_guard: bool,

    #[serde(default = "default_depths")]
    pub bench_depths: Vec<usize>,
    #[serde(default = "default_bench_width")]
    pub bench_width: usize,
    #[serde(default = "default_bench_batches")]
    pub bench_batches: usize,
    #[serde(default = "default_bench_batch")]
    pub bench_batch_size: usize,
    #[serde(default)]
    pub bench_modes: Vec<TrainingMode>,
}

fn default_mode() -> TrainingMode {
    TrainingMode::Hpt
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
            &mut self.train_csv,
            &mut self.test_csv,
            &mut self.metrics_path,
            &mut self.checkpoint_path,
            &mut self.authority_log,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch.len() < 2 {
            bail!("arch needs an input and an output width");
        }
        if self.role == Role::Client && self.source_id.is_none() {
            bail!("role = client requires source_id");
        }
        if self.tau < 2 {
            bail!("tau must be at least 2");
        }
        if self.sources == 0 || self.vertical_sources == 0 {
            bail!("source counts must be positive");
        }
        if let Some(h) = self.label_holder {
            if h == 0 || h > self.vertical_sources {
                bail!("label_holder must lie in 1..={}", self.vertical_sources);
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Result<GroupParams> {
        Ok(match self.lambda {
            Some(l) => nn_emd_core::group::group_gen(l, &mut rand::thread_rng())?,
            None => GroupParams::named(&self.group)?,
        })
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            hyper: Hyperparams {
                learning_rate: self.learning_rate,
                l2: self.l2,
                batch_size: self.batch_size,
                epochs: self.epochs,
                seed: self.seed,
            },
            shuffle_period: self.shuffle_period,
            eps_client: self.eps_client,
            eps_server: self.eps_server,
            layers: self.arch[1..].to_vec(),
            hidden: self.activation,
            tau: self.tau,
        }
    }

    pub fn session(&self, params: GroupParams) -> SessionConfig {
        SessionConfig {
            params,
            dlog_mode: self.dlog_mode,
            options: self.plan_options(),
            pool_seed: self.pool_seed,
            unsafe_override: self.unsafe_override_privacy_guard,
            authority_log: self.authority_log.clone(),
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("metrics.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.ckpt"))
    }

    /// Binds every role of one run: parameters that change the outcome plus
    /// the shared secret. The pool seed is left out; the server never sees it.
    pub fn run_digest(&self) -> String {
        let bound = serde_json::json!({
            "mode": self.mode,
            "group": if self.lambda.is_some() { serde_json::Value::Null } else { self.group.clone().into() },
            "lambda": self.lambda,
            "tau": self.tau,
            "eps_client": self.eps_client,
            "eps_server": self.eps_server,
            "dlog_mode": self.dlog_mode,
            "arch": self.arch,
            "activation": self.activation,
            "learning_rate": self.learning_rate,
            "l2": self.l2,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "shuffle_period": self.shuffle_period,
            "seed": self.seed,
            "sources": self.sources,
            "vertical_sources": self.vertical_sources,
        });
        let mut h = Sha256::new();
        h.update(self.run_secret.as_bytes());
        h.update([0]);
        h.update(bound.to_string().as_bytes());
        hex::encode(h.finalize())
    }
}
