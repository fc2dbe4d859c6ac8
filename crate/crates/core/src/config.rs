//! Experiment configuration: a flat `key = value` text format with
//! command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::data::Source;
use crate::error::{FidelError, Result};
use crate::nn::arch::{VictimArch, GENERATOR_LEARNING_RATE, GENERATOR_RHO, VICTIM_BATCH_SIZE, VICTIM_LEARNING_RATE};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Local training in minibatches of 50; several SGD steps when n > 50.
    PaperBatch50,
    /// The whole local dataset in one batch: exactly one SGD step per epoch.
    FullBatch,
}

impl BatchMode {
    pub fn name(self) -> &'static str {
        match self {
            BatchMode::PaperBatch50 => "paper-batch-50",
            BatchMode::FullBatch => "full-batch",
        }
    }

    pub fn batch_size(self, n: usize) -> usize {
        match self {
            BatchMode::PaperBatch50 => VICTIM_BATCH_SIZE,
            BatchMode::FullBatch => n,
        }
    }
}

/// How the victim model evolves between the rounds of a sweep cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotMode {
    /// One pretrained snapshot shared by every round of a cell.
    PerCell,
    /// A freshly pretrained snapshot (own seed) for every round.
    PerRound,
    /// Rounds run in sequence; each round's update is aggregated into the
    /// global model used by the next one.
    Continuing,
}

impl SnapshotMode {
    pub fn name(self) -> &'static str {
        match self {
            SnapshotMode::PerCell => "per-cell",
            SnapshotMode::PerRound => "per-round",
            SnapshotMode::Continuing => "continuing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Source,
    pub arch: VictimArch,
    pub activations: Vec<Activation>,
    /// Dropout settings to sweep; demos use the first entry.
    pub dropout: Vec<bool>,
    pub dropout_rate: f64,
    pub n: Vec<usize>,
    pub rounds: usize,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub batch_mode: BatchMode,
    pub snapshot: SnapshotMode,
    pub seed: u64,
    pub out: PathBuf,
    pub threshold: f64,
    pub dead_threshold: f64,
    pub generator_epochs: usize,
    /// Wall-clock cap on generator training in seconds; 0 disables it.
    pub generator_seconds: u64,
    pub generator_batch: usize,
    pub generator_lr: f64,
    pub generator_rho: f64,
    pub validation_fraction: f64,
    /// Generator is retrained once the victim parameters have moved further
    /// than this (L2) from the snapshot it was trained on.
    pub retrain_distance: f64,
    pub renormalize: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: Source::Mnist,
            arch: VictimArch::Fcnn,
            activations: vec![Activation::Relu],
            dropout: vec![false],
            dropout_rate: 0.5,
            n: vec![10],
            rounds: 200,
            pretrain_epochs: 1,
            learning_rate: VICTIM_LEARNING_RATE,
            batch_mode: BatchMode::PaperBatch50,
            snapshot: SnapshotMode::PerCell,
            seed: 0,
            out: PathBuf::from("out"),
            threshold: 0.98,
            dead_threshold: crate::attack::DEAD_THRESHOLD,
            generator_epochs: 100,
            generator_seconds: 600,
            generator_batch: 32,
            generator_lr: GENERATOR_LEARNING_RATE,
            generator_rho: GENERATOR_RHO,
            validation_fraction: 0.1,
            retrain_distance: 0.0,
            renormalize: false,
        }
    }
}

fn list<T>(value: &str, item: impl Fn(&str) -> Option<T>) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(item).collect();
    items.filter(|v| !v.is_empty())
}

fn flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn number<T: FromStr>(s: &str) -> Option<T> {
    s.parse().ok()
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = || FidelError::Config(format!("invalid value '{value}' for '{key}'"));
        match key.trim() {
            "dataset" => self.dataset = Source::parse(value).ok_or_else(bad)?,
            "arch" => self.arch = value.parse().map_err(|_| bad())?,
            "activation" | "activations" => {
                self.activations = list(value, |s| {
                    Activation::parse(s).filter(|a| matches!(a, Activation::Relu | Activation::Sigmoid | Activation::Tanh))
                })
                .ok_or_else(bad)?
            }
            "dropout" => self.dropout = list(value, flag).ok_or_else(bad)?,
            "dropout_rate" => self.dropout_rate = number(value).ok_or_else(bad)?,
            "n" => self.n = list(value, number).ok_or_else(bad)?,
            "rounds" => self.rounds = number(value).ok_or_else(bad)?,
            "pretrain_epochs" => self.pretrain_epochs = number(value).ok_or_else(bad)?,
            "learning_rate" => self.learning_rate = number(value).ok_or_else(bad)?,
            "batch_mode" => {
                self.batch_mode = match value {
                    "paper-batch-50" => BatchMode::PaperBatch50,
                    "full-batch" => BatchMode::FullBatch,
                    _ => return Err(bad()),
                }
            }
            "snapshot" => {
                self.snapshot = match value {
                    "per-cell" => SnapshotMode::PerCell,
                    "per-round" => SnapshotMode::PerRound,
                    "continuing" => SnapshotMode::Continuing,
                    _ => return Err(bad()),
                }
            }
            "seed" => self.seed = number(value).ok_or_else(bad)?,
            "out" => self.out = PathBuf::from(value),
            "threshold" => self.threshold = number(value).ok_or_else(bad)?,
            "dead_threshold" => self.dead_threshold = number(value).ok_or_else(bad)?,
            "generator_epochs" => self.generator_epochs = number(value).ok_or_else(bad)?,
            "generator_seconds" => self.generator_seconds = number(value).ok_or_else(bad)?,
            "generator_batch" => self.generator_batch = number(value).ok_or_else(bad)?,
            "generator_lr" => self.generator_lr = number(value).ok_or_else(bad)?,
            "generator_rho" => self.generator_rho = number(value).ok_or_else(bad)?,
            "validation_fraction" => self.validation_fraction = number(value).ok_or_else(bad)?,
            "retrain_distance" => self.retrain_distance = number(value).ok_or_else(bad)?,
            "renormalize" => self.renormalize = flag(value).ok_or_else(bad)?,
            other => return Err(FidelError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Apply an override of the form `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| FidelError::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k, v)
    }

    /// Parse config text; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line)
                .map_err(|e| FidelError::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FidelError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FidelError::Config(msg));
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.n.contains(&0) {
            return fail("every n must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.generator_batch == 0 {
            return fail("generator_batch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!("validation_fraction {} outside [0, 1)", self.validation_fraction));
        }
        Ok(())
    }

    pub fn generator_wall_clock(&self) -> Option<Duration> {
        (self.generator_seconds > 0).then(|| Duration::from_secs(self.generator_seconds))
    }

    /// Canonical `key = value` rendering of every setting; parses back to `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        };
        put("dataset", self.dataset.name().into());
        put("arch", self.arch.name().into());
        put("activations", join(&self.activations, |a| a.name().to_string()));
        put("dropout", join(&self.dropout, |&d| if d { "on" } else { "off" }.to_string()));
        put("dropout_rate", self.dropout_rate.to_string());
        put("n", join(&self.n, usize::to_string));
        put("rounds", self.rounds.to_string());
        put("pretrain_epochs", self.pretrain_epochs.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("batch_mode", self.batch_mode.name().into());
        put("snapshot", self.snapshot.name().into());
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("threshold", self.threshold.to_string());
        put("dead_threshold", self.dead_threshold.to_string());
        put("generator_epochs", self.generator_epochs.to_string());
        put("generator_seconds", self.generator_seconds.to_string());
        put("generator_batch", self.generator_batch.to_string());
        put("generator_lr", self.generator_lr.to_string());
        put("generator_rho", self.generator_rho.to_string());
        put("validation_fraction", self.validation_fraction.to_string());
        put("retrain_distance", self.retrain_distance.to_string());
        put("renormalize", self.renormalize.to_string());
        s
    }
}
