//! Run configuration assembled from built-in defaults, an optional TOML file
//! and command-line flags, in increasing order of precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use cmhash::{Task, TrainConfig};
use serde::Deserialize;

/// Keys accepted in a `--config` file. Relative paths are resolved against
/// the directory containing the file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub bits: Option<usize>,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub anchors: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub dcc_sweeps: Option<usize>,

    pub features: Option<Vec<PathBuf>>,
    pub labels: Option<PathBuf>,
    pub query_features: Option<Vec<PathBuf>>,
    pub query_labels: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub train_count: Option<usize>,
    pub split_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub task: Option<TaskChoice>,
    pub format: Option<ReportFormat>,
    pub top_k: Option<usize>,

    pub betas: Option<Vec<f64>>,
    pub etas: Option<Vec<f64>>,
    pub anchor_grid: Option<Vec<usize>>,
    pub bits_grid: Option<Vec<usize>>,
    pub workers: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("config {}: {}", path.display(), e.message()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for list in [&mut cfg.features, &mut cfg.query_features].into_iter().flatten() {
            list.iter_mut().for_each(fix);
        }
        for p in [&mut cfg.labels, &mut cfg.query_labels, &mut cfg.split, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn load_opt(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskChoice {
    I2t,
    T2i,
    Both,
}

impl TaskChoice {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            TaskChoice::I2t => vec![Task::ImageToText],
            TaskChoice::T2i => vec![Task::TextToImage],
            TaskChoice::Both => Task::BOTH.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

/// Hyper-parameter flags shared by `train` and `sweep`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Code length in bits.
    #[arg(long)]
    pub bits: Option<usize>,
    /// Classifier loss weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Label-consistent factorization weight.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Ridge regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Modality-weight exponent (> 1).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Kernel anchors per modality.
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative objective change that stops training.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Coordinate-descent passes per code update.
    #[arg(long)]
    pub dcc_sweeps: Option<usize>,
}

impl TrainFlags {
    /// Defaults, then the file, then these flags; validated before returning.
    pub fn resolve(&self, file: &FileConfig) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        macro_rules! layer {
            ($($field:ident),*) => {
                $(
                    if let Some(v) = file.$field { cfg.$field = v; }
                    if let Some(v) = self.$field { cfg.$field = v; }
                )*
            };
        }
        layer!(bits, beta, eta, lambda, gamma, anchors, max_iters, tol, seed, dcc_sweeps);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Picks the flag value, else the file value, else fails with `what`.
pub fn required<T: Clone>(flag: Option<T>, file: &Option<T>, what: &str) -> Result<T> {
    match flag.or_else(|| file.clone()) {
        Some(v) => Ok(v),
        None => bail!("missing {what}"),
    }
}

/// Non-empty list from the flags or, failing that, the file.
pub fn list<T: Clone>(flag: &[T], file: &Option<Vec<T>>) -> Option<Vec<T>> {
    if !flag.is_empty() {
        Some(flag.to_vec())
    } else {
        file.clone().filter(|v| !v.is_empty())
    }
}
