//! Generative inversion of convolutional partial reconstructions.
//!
//! The adversary runs its auxiliary samples through the victim's layers in
//! front of the first dense layer, trains a generator on the resulting
//! (feature, sample) pairs, then feeds recovered partials to the generator.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::attack::{locate_first_dense, PartialReconstruction};
use crate::data::SampleSource;
use crate::error::{FidelError, Result};
use crate::nn::arch::{build_generator, GeneratorArch, ADADELTA_EPSILON, GENERATOR_LEARNING_RATE, GENERATOR_RHO};
use crate::nn::codec::{load_model, save_model};
use crate::nn::{train_batch, Adadelta, LossKind, Model, Optimizer, Phase};
use crate::rng::seeded;
use crate::tensor::Tensor;

const CHUNK: usize = 32;

/// Auxiliary features and their source samples, stacked along axis 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPairs {
    pub features: Tensor,
    pub targets: Tensor,
}

impl TrainingPairs {
    pub fn len(&self) -> usize {
        self.targets.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.targets.shape()[1..]
    }

    fn gather(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let pick = |t: &Tensor| {
            let rows: Vec<Tensor> = indices.iter().map(|&i| t.sample(i)).collect();
            Tensor::stack(rows.iter()).expect("rows share a shape")
        };
        (pick(&self.features), pick(&self.targets))
    }
}

/// Victim activations feeding the first dense layer, for a batch of samples.
pub fn victim_features(victim: &Model, batch: &Tensor) -> Result<Tensor> {
    let first = locate_first_dense(victim)?;
    let trace = victim.forward_prefix(batch, first.feature_layer, Phase::Inference)?;
    Ok(trace.activations().last().expect("non-empty trace").clone())
}

/// One (feature, sample) pair per auxiliary sample, in dataset order.
pub fn build_pairs(victim: &Model, aux: &impl SampleSource) -> Result<TrainingPairs> {
    if aux.is_empty() {
        return Err(FidelError::Empty("auxiliary dataset"));
    }
    let indices: Vec<usize> = (0..aux.len()).collect();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut feature_shape = Vec::new();
    for chunk in indices.chunks(CHUNK) {
        let (x, _) = aux.batch(chunk);
        let f = victim_features(victim, &x)?;
        feature_shape = f.shape()[1..].to_vec();
        features.extend_from_slice(f.data());
        targets.extend_from_slice(x.data());
    }
    let mut fs = vec![aux.len()];
    fs.extend_from_slice(&feature_shape);
    let mut ts = vec![aux.len()];
    ts.extend_from_slice(aux.sample_shape());
    Ok(TrainingPairs {
        features: Tensor::new(fs, features)?,
        targets: Tensor::new(ts, targets)?,
    })
}

/// Per-channel mean and standard deviation of feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn of(features: &Tensor) -> FeatureStats {
        let c = *features.shape().last().expect("rank >= 1");
        let (mean, std) = channel_moments(features.data(), c);
        FeatureStats { mean, std }
    }

    /// Affinely map each channel of `values` onto these statistics.
    pub fn renormalize(&self, values: &Tensor) -> Tensor {
        let c = self.mean.len();
        let (m, s) = channel_moments(values.data(), c);
        let mut out = values.clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                let z = if s[k] > 0.0 { (*v - m[k]) / s[k] } else { 0.0 };
                *v = self.mean[k] + self.std[k] * z;
            }
        }
        out
    }
}

fn channel_moments(data: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (data.len() / c).max(1) as f64;
    let mut mean = vec![0.0; c];
    for px in data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for px in data.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s / count).sqrt()).collect())
}

/// Limits and optimizer settings for generator training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBudget {
    pub max_epochs: usize,
    /// Training stops at the first batch boundary past this duration.
    pub wall_clock: Option<Duration>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rho: f64,
    /// Fraction of pairs (taken from the end) held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            max_epochs: 100,
            wall_clock: Some(Duration::from_secs(600)),
            batch_size: 32,
            learning_rate: GENERATOR_LEARNING_RATE,
            rho: GENERATOR_RHO,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean training MSE over the batches seen in this epoch.
    pub train: f64,
    pub validation: Option<f64>,
    /// Whether the epoch ran to completion before the wall-clock cap.
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub model: Model,
    pub optimizer: Adadelta,
    pub curve: Vec<EpochLoss>,
    /// Auxiliary feature statistics, when trained in this process.
    pub feature_stats: Option<FeatureStats>,
}

impl Generator {
    pub fn new(arch: GeneratorArch, feature_shape: &[usize], sample_shape: &[usize], seed: u64) -> Result<Self> {
        Ok(Generator {
            arch,
            model: build_generator(arch, feature_shape, sample_shape, seed)?,
            optimizer: Adadelta::new(GENERATOR_LEARNING_RATE, GENERATOR_RHO, ADADELTA_EPSILON),
            curve: Vec::new(),
            feature_stats: None,
        })
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(&self.model, path)
    }

    pub fn load(arch: GeneratorArch, path: &Path) -> Result<Self> {
        Ok(Generator {
            arch,
            model: load_model(path)?,
            optimizer: Adadelta::new(GENERATOR_LEARNING_RATE, GENERATOR_RHO, ADADELTA_EPSILON),
            curve: Vec::new(),
            feature_stats: None,
        })
    }

    pub fn final_validation_loss(&self) -> Option<f64> {
        self.curve.iter().rev().find_map(|e| e.validation)
    }
}

/// Train a fresh generator on `pairs` with Adadelta on mean squared error.
pub fn train_generator(pairs: &TrainingPairs, arch: GeneratorArch, budget: &TrainBudget) -> Result<Generator> {
    if pairs.is_empty() {
        return Err(FidelError::Empty("training pairs"));
    }
    if budget.batch_size == 0 {
        return Err(FidelError::Config("generator batch size must be at least 1".into()));
    }
    let mut gen = Generator::new(arch, pairs.feature_shape(), pairs.sample_shape(), budget.seed)?;
    gen.optimizer = Adadelta::new(budget.learning_rate, budget.rho, ADADELTA_EPSILON);
    gen.feature_stats = Some(FeatureStats::of(&pairs.features));

    let n = pairs.len();
    let held = ((n as f64 * budget.validation_fraction).round() as usize).min(n - 1);
    let mut train: Vec<usize> = (0..n - held).collect();
    let validation: Vec<usize> = (n - held..n).collect();
    let mut rng = seeded(budget.seed);
    let start = Instant::now();
    let out_of_time = |start: &Instant| budget.wall_clock.is_some_and(|cap| start.elapsed() >= cap);

    for epoch in 0..budget.max_epochs {
        train.shuffle(&mut rng);
        let mut optimizer = Optimizer::Adadelta(gen.optimizer.clone());
        let (mut total, mut seen, mut complete) = (0.0, 0usize, true);
        for chunk in train.chunks(budget.batch_size) {
            if out_of_time(&start) {
                complete = false;
                break;
            }
            let (x, y) = pairs.gather(chunk);
            let loss = train_batch(&mut gen.model, &x, &y, LossKind::MeanSquaredError, &mut optimizer, &mut rng)?;
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let Optimizer::Adadelta(state) = optimizer else {
            unreachable!()
        };
        gen.optimizer = state;
        if seen == 0 {
            break;
        }
        let validation_loss = if validation.is_empty() {
            None
        } else {
            Some(mse_on(&gen.model, pairs, &validation)?)
        };
        let entry = EpochLoss {
            epoch: epoch + 1,
            train: total / seen as f64,
            validation: validation_loss,
            complete,
        };
        log::info!(
            "generator epoch {}: train {:.5} validation {:?} ({:.0?})",
            entry.epoch,
            entry.train,
            entry.validation,
            start.elapsed()
        );
        gen.curve.push(entry);
        if !complete {
            log::warn!("generator training hit its wall-clock cap in epoch {}", epoch + 1);
            break;
        }
    }
    Ok(gen)
}

/// Mean per-pixel squared error of the generator on the selected pairs.
pub fn mse_on(model: &Model, pairs: &TrainingPairs, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(CHUNK) {
        let (x, y) = pairs.gather(chunk);
        let out = model.predict(&x)?;
        total += out.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let per: usize = pairs.sample_shape().iter().product();
    Ok(total / (indices.len() * per) as f64)
}

/// Generator output for one feature map (`feature_shape`) or a batch of them.
pub fn generate(gen: &Generator, features: &Tensor) -> Result<Tensor> {
    let fs = gen.feature_shape();
    if features.shape() == fs {
        let mut batched = vec![1];
        batched.extend_from_slice(fs);
        let out = gen.model.predict(&features.clone().reshape(&batched)?)?;
        return out.reshape(gen.model.output_shape());
    }
    if features.rank() < 2 || features.shape()[1..] != *fs {
        return Err(FidelError::Shape(format!(
            "generator expects features of shape {fs:?}, got {:?}",
            features.shape()
        )));
    }
    let n = features.batch_len();
    let mut data = Vec::with_capacity(n * gen.model.output_shape().iter().product::<usize>());
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(CHUNK) {
        let parts: Vec<Tensor> = chunk.iter().map(|&i| features.sample(i)).collect();
        let out = gen.model.predict(&Tensor::stack(parts.iter())?)?;
        data.extend_from_slice(out.data());
    }
    let mut shape = vec![n];
    shape.extend_from_slice(gen.model.output_shape());
    Tensor::new(shape, data)
}

/// One candidate per live exact partial, as `(neuron, candidate)`.
///
/// With `renormalize`, each partial is first mapped channel-wise onto the
/// auxiliary feature statistics.
pub fn generate_batch_candidates(
    gen: &Generator,
    partials: &[PartialReconstruction],
    renormalize: bool,
) -> Result<Vec<(usize, Tensor)>> {
    let live: Vec<&PartialReconstruction> = partials.iter().filter(|p| p.is_exact() && !p.dead).collect();
    if live.is_empty() {
        return Ok(Vec::new());
    }
    let inputs: Vec<Tensor> = live
        .iter()
        .map(|p| match (&gen.feature_stats, renormalize) {
            (Some(stats), true) => stats.renormalize(&p.values),
            _ => p.values.clone(),
        })
        .collect();
    let out = generate(gen, &Tensor::stack(inputs.iter())?)?;
    Ok(live.iter().enumerate().map(|(k, p)| (p.neuron, out.sample(k))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_stats_renormalize_channels() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let stats = FeatureStats::of(&t);
        assert_eq!(stats.mean, vec![2.0, 20.0]);
        assert_eq!(stats.std, vec![1.0, 10.0]);
        let scaled = t.scale(5.0);
        let back = stats.renormalize(&scaled);
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
