//! Federated round simulation: local client training, model deltas and
//! server-side averaging.

use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::SampleSource;
use crate::error::{FidelError, Result};
use crate::nn::codec::{read_container, write_container, Header, UpdateMeta};
use crate::nn::{loss, one_hot, sgd_step, train_batch, LossKind, Model, Optimizer, ParamSet, Phase};
use crate::nn::arch::{NUM_CLASSES, VICTIM_BATCH_SIZE, VICTIM_LEARNING_RATE};
use crate::rng::seeded;
use crate::tensor::{argmax, Tensor};

/// Local training settings of one client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the dropout masks drawn during local training.
    pub seed: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            epochs: 1,
            batch_size: VICTIM_BATCH_SIZE,
            learning_rate: VICTIM_LEARNING_RATE,
            seed: 0,
        }
    }
}

impl ClientConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(FidelError::Config(format!(
                "epochs ({}) and batch size ({}) must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Parameter change reported by one client after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub deltas: ParamSet,
    pub meta: UpdateMeta,
}

impl ModelUpdate {
    pub fn l2_norm(&self) -> f64 {
        self.deltas.l2_norm()
    }

    pub fn scale(&self, c: f64) -> ModelUpdate {
        ModelUpdate {
            deltas: self.deltas.scale(c),
            meta: self.meta,
        }
    }

    /// Write as a `FIDU` container carrying the model's layer table.
    pub fn save(&self, model: &Model, path: &Path) -> Result<()> {
        if !model.params().is_congruent(&self.deltas) {
            return Err(FidelError::SpecMismatch("update does not fit model".into()));
        }
        let tensors: Vec<&Tensor> = self.deltas.tensors().collect();
        write_container(path, &Header::Update(self.meta), model.input_shape(), model.layers(), &tensors)
    }

    /// Read an update written by [`ModelUpdate::save`], checking it against `model`.
    pub fn load(model: &Model, path: &Path) -> Result<ModelUpdate> {
        let c = read_container(path)?;
        let Header::Update(meta) = c.header else {
            return Err(FidelError::format(path, "not an update container"));
        };
        if c.layers != model.layers() || c.input_shape != model.input_shape() {
            return Err(FidelError::SpecMismatch(format!("{} was written for another model", path.display())));
        }
        let counts: Vec<usize> = model.params().layers().iter().map(Vec::len).collect();
        if c.tensors.len() != counts.iter().sum::<usize>() {
            return Err(FidelError::format(path, "tensor count does not match model"));
        }
        let mut iter = c.tensors.into_iter();
        let deltas = ParamSet::new(counts.iter().map(|&k| iter.by_ref().take(k).collect()).collect());
        if !model.params().is_congruent(&deltas) {
            return Err(FidelError::format(path, "tensor shapes do not match model"));
        }
        Ok(ModelUpdate { deltas, meta })
    }
}

/// Elementwise `after - before`.
pub fn model_delta(before: &Model, after: &Model) -> Result<ModelUpdate> {
    if !before.same_architecture(after) {
        return Err(FidelError::SpecMismatch("models differ in layer specs".into()));
    }
    Ok(ModelUpdate {
        deltas: after.params().zip_map(before.params(), |a, b| a - b)?,
        meta: UpdateMeta::default(),
    })
}

/// Train a copy of `global` on the client's data with minibatch SGD in
/// dataset order and report the resulting update.
///
/// The update is the sum of the applied steps `-lr * g`, accumulated
/// directly rather than recovered as `after - before`, so a single-step
/// round reports `-lr * g` without cancellation error. The returned model
/// differs from `global + update` by at most rounding.
pub fn client_train(global: &Model, local: &impl SampleSource, cfg: &ClientConfig) -> Result<(Model, ModelUpdate)> {
    cfg.validate()?;
    if local.is_empty() {
        return Err(FidelError::Empty("client dataset"));
    }
    if local.sample_shape() != global.input_shape() {
        return Err(FidelError::Shape(format!(
            "samples of shape {:?} do not fit model input {:?}",
            local.sample_shape(),
            global.input_shape()
        )));
    }
    let mut model = global.clone();
    let mut rng = seeded(cfg.seed);
    let mut deltas: Option<ParamSet> = None;
    let order: Vec<usize> = (0..local.len()).collect();
    for _ in 0..cfg.epochs {
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = local.batch(chunk);
            let y = one_hot(&labels, NUM_CLASSES);
            let trace = model.forward(&x, Phase::Training(&mut rng))?;
            let value = loss(trace.output(), &y, LossKind::CategoricalCrossEntropy)?;
            if !value.is_finite() {
                return Err(FidelError::Numerical(format!("client loss became {value}")));
            }
            let grads = model.backward(&trace, &y, LossKind::CategoricalCrossEntropy)?;
            let step = grads.scale(-cfg.learning_rate);
            sgd_step(&mut model, &grads, cfg.learning_rate)?;
            model.absorb_batch_statistics(&trace);
            deltas = Some(match deltas {
                None => step,
                Some(acc) => acc.zip_map(&step, |a, b| a + b)?,
            });
        }
    }
    let update = ModelUpdate {
        deltas: deltas.expect("at least one batch"),
        meta: UpdateMeta {
            samples: local.len() as u32,
            ..UpdateMeta::default()
        },
    };
    Ok((model, update))
}

/// `base` plus the unweighted mean of the client deltas.
pub fn server_aggregate(updates: &[ModelUpdate], base: &Model) -> Result<Model> {
    let first = updates.first().ok_or(FidelError::Empty("update list"))?;
    let mut sum = first.deltas.clone();
    for u in &updates[1..] {
        sum = sum.zip_map(&u.deltas, |a, b| a + b)?;
    }
    let k = updates.len() as f64;
    let params = base.params().zip_map(&sum, |w, s| w + s / k)?;
    let mut model = base.clone();
    *model.params_mut() = params;
    Ok(model)
}

/// Pretraining schedule for the global model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 1,
            batch_size: VICTIM_BATCH_SIZE,
            learning_rate: VICTIM_LEARNING_RATE,
            seed: 0,
        }
    }
}

/// Minibatch SGD over a seeded reshuffle of `train` each epoch.
pub fn pretrain(model: &Model, train: &impl SampleSource, cfg: &PretrainConfig) -> Result<Model> {
    let mut model = model.clone();
    if cfg.epochs == 0 {
        return Ok(model);
    }
    if cfg.batch_size == 0 {
        return Err(FidelError::Config("batch size must be at least 1".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut optimizer = Optimizer::Sgd { lr: cfg.learning_rate };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(chunk);
            let y = one_hot(&labels, NUM_CLASSES);
            total += train_batch(&mut model, &x, &y, LossKind::CategoricalCrossEntropy, &mut optimizer, &mut rng)?
                * chunk.len() as f64;
        }
        log::info!("pretrain epoch {}: mean loss {:.4}", epoch + 1, total / train.len().max(1) as f64);
    }
    Ok(model)
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(model: &Model, data: &impl SampleSource) -> Result<f64> {
    if data.is_empty() {
        return Err(FidelError::Empty("evaluation set"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(500) {
        let (x, labels) = data.batch(chunk);
        let out = model.predict(&x)?;
        correct += labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| argmax(out.row(*i)) == l as usize)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Append one row per update to a CSV round log, writing the header on creation.
pub fn append_round_log(path: &Path, updates: &[ModelUpdate]) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FidelError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(["round", "client", "n", "update_l2"])?;
    }
    for u in updates {
        w.write_record([
            u.meta.round.to_string(),
            u.meta.client.to_string(),
            u.meta.samples.to_string(),
            format!("{:.12e}", u.l2_norm()),
        ])?;
    }
    w.flush().map_err(|e| FidelError::io(path, e))
}
