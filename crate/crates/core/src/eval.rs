//! Leakage measurement: Pearson correlation, unique-reveal counting and the
//! multi-round sweeps over activation, dropout and local dataset size.

use std::path::Path;

use rayon::prelude::*;

use crate::attack::extract_partials;
use crate::config::{ExperimentConfig, SnapshotMode};
use crate::data::{sample_private, DataRoot, Dataset, SampleSource, split_auxiliary};
use crate::error::{FidelError, Result};
use crate::fed::{client_train, pretrain, server_aggregate, ClientConfig, ModelUpdate, PretrainConfig};
use crate::genrec::{build_pairs, generate_batch_candidates, train_generator, Generator, TrainBudget};
use crate::nn::arch::{build_victim, GeneratorArch, VictimArch, VictimOptions};
use crate::nn::{Activation, Model};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Sample correlation of `a` and `b`; `None` when either is constant or the
/// lengths differ or are below two.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Centered, unit-norm copy of `v`, or `None` for a constant vector.
fn standardize(v: &[f64]) -> Option<Vec<f64>> {
    if v.len() < 2 {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let centered: Vec<f64> = v.iter().map(|x| x - m).collect();
    let norm = centered.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0).then(|| centered.into_iter().map(|x| x / norm).collect())
}

/// A candidate's best-correlated private sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub sample: usize,
    pub abs_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reveal {
    /// Number of distinct private samples matched at or above the threshold.
    pub revealed: usize,
    /// Per candidate: its arg-max `|r|` sample, `None` for constant candidates.
    pub matches: Vec<Option<Match>>,
    /// Per private sample: the largest `|r|` any candidate reaches.
    pub best_per_sample: Vec<f64>,
    pub revealed_mask: Vec<bool>,
}

impl Reveal {
    pub fn mean_best_abs_r(&self) -> f64 {
        self.best_per_sample.iter().sum::<f64>() / self.best_per_sample.len().max(1) as f64
    }
}

/// Count private samples revealed by the candidates.
///
/// Each candidate may reveal only its best match, and only when that match
/// reaches `threshold` in absolute correlation; each sample counts once.
pub fn count_revealed(candidates: &[Tensor], private: &[Tensor], threshold: f64) -> Result<Reveal> {
    if private.is_empty() {
        return Err(FidelError::Empty("private batch"));
    }
    let len = private[0].len();
    if let Some(bad) = candidates.iter().chain(private).find(|t| t.len() != len) {
        return Err(FidelError::Shape(format!("cannot correlate {} values with {len}", bad.len())));
    }
    let samples: Vec<Option<Vec<f64>>> = private.iter().map(|t| standardize(t.data())).collect();
    let mut best_per_sample = vec![0.0; private.len()];
    let mut revealed_mask = vec![false; private.len()];
    let mut matches = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let Some(c) = standardize(cand.data()) else {
            matches.push(None);
            continue;
        };
        let mut best: Option<Match> = None;
        for (j, s) in samples.iter().enumerate() {
            let r = s
                .as_ref()
                .map_or(0.0, |s| c.iter().zip(s).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0).abs());
            if r > best_per_sample[j] {
                best_per_sample[j] = r;
            }
            if best.is_none_or(|b| r > b.abs_r) {
                best = Some(Match { sample: j, abs_r: r });
            }
        }
        if let Some(m) = best {
            if m.abs_r >= threshold {
                revealed_mask[m.sample] = true;
            }
        }
        matches.push(best);
    }
    Ok(Reveal {
        revealed: revealed_mask.iter().filter(|&&r| r).count(),
        matches,
        best_per_sample,
        revealed_mask,
    })
}

/// Train, auxiliary and private-pool splits of one dataset.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub auxiliary: Dataset,
    pub private: Dataset,
}

impl ExperimentData {
    pub fn from_splits(train: Dataset, test: &Dataset) -> Result<Self> {
        let (auxiliary, private) = split_auxiliary(test)?;
        Ok(ExperimentData { train, auxiliary, private })
    }

    pub fn load(root: &DataRoot, cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = root.load(cfg.dataset)?;
        Self::from_splits(train, &test)
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }
}

fn activation_code(a: Activation) -> u64 {
    match a {
        Activation::None => 0,
        Activation::Relu => 1,
        Activation::Sigmoid => 2,
        Activation::Tanh => 3,
        Activation::Softmax => 4,
    }
}

/// Seed of the victim snapshot for an (activation, dropout) pair.
pub fn victim_seed(master: u64, activation: Activation, dropout: bool) -> u64 {
    derive_seed(derive_seed(master, 100 + activation_code(activation)), dropout as u64)
}

/// Seed of one attack round.
pub fn round_seed(victim_seed: u64, n: usize, round: usize) -> u64 {
    derive_seed(derive_seed(victim_seed, n as u64), round as u64)
}

pub fn generator_arch(cfg: &ExperimentConfig) -> GeneratorArch {
    match cfg.dataset {
        crate::data::Source::Mnist => GeneratorArch::Mnist,
        crate::data::Source::Cifar10 => GeneratorArch::Cifar,
    }
}

/// Build and pretrain the victim for one (activation, dropout) setting.
pub fn prepare_victim(cfg: &ExperimentConfig, data: &ExperimentData, activation: Activation, dropout: bool, seed: u64) -> Result<Model> {
    let opts = VictimOptions {
        first_activation: activation,
        dropout: dropout.then_some(cfg.dropout_rate),
    };
    let model = build_victim(cfg.arch, data.sample_shape(), opts, derive_seed(seed, 0))?;
    let pcfg = PretrainConfig {
        epochs: cfg.pretrain_epochs,
        learning_rate: cfg.learning_rate,
        seed: derive_seed(seed, 1),
        ..PretrainConfig::default()
    };
    pretrain(&model, &data.train, &pcfg)
}

/// Train a generator on the auxiliary features of `victim`.
pub fn prepare_generator(cfg: &ExperimentConfig, data: &ExperimentData, victim: &Model, seed: u64) -> Result<Generator> {
    let pairs = build_pairs(victim, &data.auxiliary)?;
    let budget = TrainBudget {
        max_epochs: cfg.generator_epochs,
        wall_clock: cfg.generator_wall_clock(),
        batch_size: cfg.generator_batch,
        learning_rate: cfg.generator_lr,
        rho: cfg.generator_rho,
        validation_fraction: cfg.validation_fraction,
        seed: derive_seed(seed, 2),
    };
    train_generator(&pairs, generator_arch(cfg), &budget)
}

/// Result of one simulated attack round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    /// Private-pool indices of the client's local dataset, in training order.
    pub indices: Vec<usize>,
    pub candidates: Vec<Tensor>,
    pub private: Vec<Tensor>,
    pub reveal: Reveal,
}

/// Draw a private batch, train the client on it, attack its update and
/// score the candidates.
pub fn attack_round(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    victim: &Model,
    generator: Option<&Generator>,
    n: usize,
    round: usize,
    seed: u64,
) -> Result<(RoundOutcome, ModelUpdate)> {
    let indices = sample_private(data.private.len(), n, derive_seed(seed, 1))?;
    let local = data.private.subset(indices.clone());
    let client = ClientConfig {
        epochs: 1,
        batch_size: cfg.batch_mode.batch_size(n),
        learning_rate: cfg.learning_rate,
        seed: derive_seed(seed, 2),
    };
    let (_, mut update) = client_train(victim, &local, &client)?;
    update.meta.round = round as u32;
    if !update.deltas.all_finite() {
        return Err(FidelError::Numerical(format!("non-finite update in round {round}")));
    }
    let partials = extract_partials(&update, victim, cfg.dead_threshold)?;
    let candidates: Vec<Tensor> = match cfg.arch {
        VictimArch::Fcnn => partials
            .into_iter()
            .filter(|p| !p.dead)
            .map(|p| p.values.reshape(data.sample_shape()))
            .collect::<Result<_>>()?,
        VictimArch::Cnn => {
            let gen = generator.ok_or_else(|| FidelError::Config("convolutional victims need a generator".into()))?;
            generate_batch_candidates(gen, &partials, cfg.renormalize)?
                .into_iter()
                .map(|(_, c)| c)
                .collect()
        }
    };
    let private: Vec<Tensor> = (0..local.len()).map(|i| local.image(i)).collect();
    let reveal = count_revealed(&candidates, &private, cfg.threshold)?;
    Ok((
        RoundOutcome {
            round,
            indices,
            candidates,
            private,
            reveal,
        },
        update,
    ))
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub activation: Activation,
    pub dropout: bool,
    pub n: usize,
    pub round: usize,
    pub indices: Vec<usize>,
    pub candidates: usize,
    pub revealed: usize,
    pub mean_abs_r_best: f64,
    pub matches: Vec<Option<Match>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub activation: Activation,
    pub dropout: bool,
    pub n: usize,
    pub rounds: usize,
    pub mean: f64,
    pub stderr: f64,
    pub mean_abs_r_best: f64,
}

/// All rounds of a sweep plus per-cell aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct RevealReport {
    pub dataset: String,
    pub arch: String,
    pub rounds: Vec<RoundRecord>,
    pub cells: Vec<CellSummary>,
}

impl RevealReport {
    pub fn cell(&self, activation: Activation, dropout: bool, n: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.activation == activation && c.dropout == dropout && c.n == n)
    }

    pub fn write_results(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dataset", "arch", "activation", "dropout", "n", "round", "revealed", "mean_abs_r_best"])?;
        for r in &self.rounds {
            w.write_record([
                self.dataset.clone(),
                self.arch.clone(),
                r.activation.name().to_string(),
                r.dropout.to_string(),
                r.n.to_string(),
                r.round.to_string(),
                r.revealed.to_string(),
                format!("{:.6}", r.mean_abs_r_best),
            ])?;
        }
        w.flush().map_err(|e| FidelError::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dataset", "arch", "activation", "dropout", "n", "rounds", "mean_revealed", "stderr", "mean_abs_r_best"])?;
        for c in &self.cells {
            w.write_record([
                self.dataset.clone(),
                self.arch.clone(),
                c.activation.name().to_string(),
                c.dropout.to_string(),
                c.n.to_string(),
                c.rounds.to_string(),
                format!("{:.4}", c.mean),
                format!("{:.4}", c.stderr),
                format!("{:.6}", c.mean_abs_r_best),
            ])?;
        }
        w.flush().map_err(|e| FidelError::io(path, e))
    }

    /// Wide table: one row per `n`, one mean-revealed column per series.
    pub fn write_plot_data(&self, path: &Path) -> Result<()> {
        let mut series: Vec<(Activation, bool)> = Vec::new();
        let mut ns: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !series.contains(&(c.activation, c.dropout)) {
                series.push((c.activation, c.dropout));
            }
            if !ns.contains(&c.n) {
                ns.push(c.n);
            }
        }
        let mut text = String::from("n");
        for (a, d) in &series {
            text.push('\t');
            text.push_str(a.name());
            if *d {
                text.push_str("+dropout");
            }
        }
        text.push('\n');
        for n in ns {
            text.push_str(&n.to_string());
            for &(a, d) in &series {
                text.push('\t');
                if let Some(c) = self.cell(a, d, n) {
                    text.push_str(&format!("{:.4}", c.mean));
                }
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| FidelError::io(path, e))
    }
}

fn summarize(activation: Activation, dropout: bool, n: usize, rows: &[RoundRecord]) -> CellSummary {
    let k = rows.len() as f64;
    let mean = rows.iter().map(|r| r.revealed as f64).sum::<f64>() / k;
    let var = if rows.len() > 1 {
        rows.iter().map(|r| (r.revealed as f64 - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    CellSummary {
        activation,
        dropout,
        n,
        rounds: rows.len(),
        mean,
        stderr: (var / k).sqrt(),
        mean_abs_r_best: rows.iter().map(|r| r.mean_abs_r_best).sum::<f64>() / k,
    }
}

fn record(activation: Activation, dropout: bool, n: usize, o: RoundOutcome) -> RoundRecord {
    RoundRecord {
        activation,
        dropout,
        n,
        round: o.round,
        candidates: o.candidates.len(),
        revealed: o.reveal.revealed,
        mean_abs_r_best: o.reveal.mean_best_abs_r(),
        matches: o.reveal.matches,
        indices: o.indices,
    }
}

fn needs_generator(cfg: &ExperimentConfig) -> bool {
    cfg.arch == VictimArch::Cnn
}

/// Run every (activation, dropout, n) cell for `cfg.rounds` rounds.
///
/// Rounds run in parallel on the ambient rayon pool except in continuing
/// mode; results are collected in round order, so output does not depend on
/// scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<RevealReport> {
    cfg.validate()?;
    if let Some(&n) = cfg.n.iter().find(|&&n| n > data.private.len()) {
        return Err(FidelError::Config(format!("n = {n} exceeds the private pool of {}", data.private.len())));
    }
    let mut report = RevealReport {
        dataset: cfg.dataset.name().to_string(),
        arch: cfg.arch.name().to_string(),
        rounds: Vec::new(),
        cells: Vec::new(),
    };
    for &activation in &cfg.activations {
        for &dropout in &cfg.dropout {
            let vseed = victim_seed(cfg.seed, activation, dropout);
            let snapshot = match cfg.snapshot {
                SnapshotMode::PerRound => None,
                _ => Some(prepare_victim(cfg, data, activation, dropout, vseed)?),
            };
            let generator = match (&snapshot, needs_generator(cfg)) {
                (Some(victim), true) => Some(prepare_generator(cfg, data, victim, vseed)?),
                _ => None,
            };
            for &n in &cfg.n {
                log::info!("cell {} dropout={dropout} n={n}", activation.name());
                let rows = match cfg.snapshot {
                    SnapshotMode::PerCell => {
                        let victim = snapshot.as_ref().expect("per-cell snapshot");
                        (0..cfg.rounds)
                            .into_par_iter()
                            .map(|round| {
                                let seed = round_seed(vseed, n, round);
                                attack_round(cfg, data, victim, generator.as_ref(), n, round, seed)
                                    .map(|(o, _)| record(activation, dropout, n, o))
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                    SnapshotMode::PerRound => (0..cfg.rounds)
                        .into_par_iter()
                        .map(|round| {
                            let seed = round_seed(vseed, n, round);
                            let victim = prepare_victim(cfg, data, activation, dropout, derive_seed(seed, 3))?;
                            let gen = if needs_generator(cfg) {
                                Some(prepare_generator(cfg, data, &victim, derive_seed(seed, 3))?)
                            } else {
                                None
                            };
                            attack_round(cfg, data, &victim, gen.as_ref(), n, round, seed)
                                .map(|(o, _)| record(activation, dropout, n, o))
                        })
                        .collect::<Result<Vec<_>>>()?,
                    SnapshotMode::Continuing => {
                        let mut global = snapshot.clone().expect("continuing snapshot");
                        let mut gen = generator.clone();
                        let mut trained_on = global.clone();
                        let mut rows = Vec::with_capacity(cfg.rounds);
                        for round in 0..cfg.rounds {
                            let seed = round_seed(vseed, n, round);
                            if needs_generator(cfg) {
                                let moved = global
                                    .params()
                                    .zip_map(trained_on.params(), |a, b| a - b)?
                                    .l2_norm();
                                if moved > cfg.retrain_distance {
                                    gen = Some(prepare_generator(cfg, data, &global, derive_seed(seed, 3))?);
                                    trained_on = global.clone();
                                }
                            }
                            let (o, update) = attack_round(cfg, data, &global, gen.as_ref(), n, round, seed)?;
                            rows.push(record(activation, dropout, n, o));
                            global = server_aggregate(&[update], &global)?;
                        }
                        rows
                    }
                };
                let summary = summarize(activation, dropout, n, &rows);
                log::info!("  mean revealed {:.3} +- {:.3}", summary.mean, summary.stderr);
                report.cells.push(summary);
                report.rounds.extend(rows);
            }
        }
    }
    Ok(report)
}
