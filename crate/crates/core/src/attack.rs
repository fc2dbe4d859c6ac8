//! First-dense-layer reconstruction from a model update.
//!
//! For a dense neuron `i` with weights `w_i` and bias `b_i` the loss gradient
//! satisfies `dL/dw_i = (dL/db_i) * x`, where `x` is the layer input. A single
//! SGD step scales both by `-lr`, so `delta_w_i / delta_b_i` is `x` itself.

use std::path::Path;

use crate::error::{FidelError, Result};
use crate::fed::ModelUpdate;
use crate::nn::codec::{read_container, write_container, Header, UpdateMeta};
use crate::nn::{LayerKind, Model};
use crate::tensor::Tensor;

/// Default relative threshold on `|delta_b|` below which a neuron is treated
/// as having received no gradient.
pub const DEAD_THRESHOLD: f64 = 1e-12;
const THRESHOLD_FLOOR: f64 = 1e-300;

/// Position of the first dense layer and the shape of what feeds it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirstDense {
    /// Index of the dense layer.
    pub layer: usize,
    /// Index of the first layer of the flatten/reshape run leading into the
    /// dense layer; its input is the activation the attack recovers.
    pub feature_layer: usize,
    /// Shape of that activation (without batch axis).
    pub input_shape: Vec<usize>,
    pub units: usize,
}

impl FirstDense {
    pub fn fan_in(&self) -> usize {
        self.input_shape.iter().product()
    }
}

pub fn locate_first_dense(model: &Model) -> Result<FirstDense> {
    let layers = model.layers();
    let layer = layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Dense { .. }))
        .ok_or(FidelError::NoDenseLayer)?;
    let LayerKind::Dense { units } = layers[layer].kind else {
        unreachable!()
    };
    let mut feature_layer = layer;
    while feature_layer > 0
        && matches!(layers[feature_layer - 1].kind, LayerKind::Flatten | LayerKind::Reshape { .. })
    {
        feature_layer -= 1;
    }
    Ok(FirstDense {
        layer,
        feature_layer,
        input_shape: model.layer_input_shape(feature_layer).to_vec(),
        units,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialKind {
    /// `delta_w / delta_b`: the layer input itself.
    Exact,
    /// `delta_w` alone: the layer input up to an unknown scale.
    Unbiased,
}

/// One neuron's view of the first dense layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialReconstruction {
    pub neuron: usize,
    pub values: Tensor,
    pub kind: PartialKind,
    pub bias_delta: f64,
    /// No weight or bias change at all.
    pub dead: bool,
}

impl PartialReconstruction {
    pub fn is_exact(&self) -> bool {
        self.kind == PartialKind::Exact
    }
}

/// One partial per neuron of the first dense layer.
///
/// A neuron yields an exact partial when `|delta_b|` exceeds
/// `tau * max_i |delta_b_i|` (and `1e-300`); otherwise its weight-delta row
/// is returned as an unbiased partial.
pub fn extract_partials(update: &ModelUpdate, model: &Model, tau: f64) -> Result<Vec<PartialReconstruction>> {
    if !model.params().is_congruent(&update.deltas) {
        return Err(FidelError::SpecMismatch("update does not fit model".into()));
    }
    let first = locate_first_dense(model)?;
    let [dw, db] = update.deltas.layer(first.layer) else {
        return Err(FidelError::Shape("dense layer must hold weights and bias".into()));
    };
    let fan_in = first.fan_in();
    let max_db = db.max_abs();
    let threshold = (tau * max_db).max(THRESHOLD_FLOOR);
    let partials = (0..first.units)
        .map(|i| {
            let row = &dw.data()[i * fan_in..(i + 1) * fan_in];
            let bias_delta = db.data()[i];
            let (data, kind) = if bias_delta.abs() > threshold {
                (row.iter().map(|w| w / bias_delta).collect(), PartialKind::Exact)
            } else {
                (row.to_vec(), PartialKind::Unbiased)
            };
            PartialReconstruction {
                neuron: i,
                values: Tensor::new(first.input_shape.clone(), data).expect("fan-in shape"),
                kind,
                bias_delta,
                dead: bias_delta == 0.0 && row.iter().all(|&w| w == 0.0),
            }
        })
        .collect();
    Ok(partials)
}

/// The exact partial with the largest `|delta_b|`, or failing that the
/// unbiased partial with the largest norm.
pub fn reconstruct_single(partials: &[PartialReconstruction]) -> Option<&PartialReconstruction> {
    let best_exact = partials
        .iter()
        .filter(|p| p.is_exact())
        .fold(None::<&PartialReconstruction>, |best, p| match best {
            Some(b) if b.bias_delta.abs() >= p.bias_delta.abs() => Some(b),
            _ => Some(p),
        });
    best_exact.or_else(|| {
        partials.iter().fold(None::<&PartialReconstruction>, |best, p| match best {
            Some(b) if b.values.l2_norm() >= p.values.l2_norm() => Some(b),
            _ => Some(p),
        })
    })
}

const FLAG_UNBIASED: f64 = 0.0;
const FLAG_EXACT: f64 = 1.0;
const FLAG_DEAD: f64 = 2.0;

/// Write partials as a `FIDU` container with no layer table and three
/// tensors: stacked values `[k, ...]`, bias deltas `[k]` and kind flags `[k]`
/// (0 unbiased, 1 exact, 2 dead).
pub fn save_partials(partials: &[PartialReconstruction], meta: UpdateMeta, path: &Path) -> Result<()> {
    let values = Tensor::stack(partials.iter().map(|p| &p.values))?;
    let bias = Tensor::vector(partials.iter().map(|p| p.bias_delta).collect());
    let flags = Tensor::vector(
        partials
            .iter()
            .map(|p| match (p.dead, p.kind) {
                (true, _) => FLAG_DEAD,
                (false, PartialKind::Exact) => FLAG_EXACT,
                (false, PartialKind::Unbiased) => FLAG_UNBIASED,
            })
            .collect(),
    );
    write_container(path, &Header::Update(meta), values.shape(), &[], &[&values, &bias, &flags])
}

pub fn load_partials(path: &Path) -> Result<(UpdateMeta, Vec<PartialReconstruction>)> {
    let c = read_container(path)?;
    let Header::Update(meta) = c.header else {
        return Err(FidelError::format(path, "not an update container"));
    };
    let [values, bias, flags] = &c.tensors[..] else {
        return Err(FidelError::format(path, "expected values, bias and flag tensors"));
    };
    let k = values.batch_len();
    if bias.len() != k || flags.len() != k {
        return Err(FidelError::format(path, "tensor lengths disagree"));
    }
    let partials = (0..k)
        .map(|i| {
            let flag = flags.data()[i];
            PartialReconstruction {
                neuron: i,
                values: values.sample(i),
                kind: if flag == FLAG_EXACT { PartialKind::Exact } else { PartialKind::Unbiased },
                bias_delta: bias.data()[i],
                dead: flag == FLAG_DEAD,
            }
        })
        .collect();
    Ok((meta, partials))
}
