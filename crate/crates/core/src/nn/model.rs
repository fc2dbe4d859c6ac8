//! Sequential models: parameter storage, forward pass and backpropagation.

use rand::Rng;
use rand::SeedableRng;

use super::layer::{
    conv_out, conv_pad_before, conv_transpose_crop, Activation, LayerKind, LayerSpec,
};
use super::loss::{loss_gradient, LossKind};
use super::ops::{self, gemm, Mat, Window};
use crate::error::{FidelError, Result};
use crate::rng::Rng as ModelRng;
use crate::tensor::Tensor;

/// Per-layer list of tensors mirroring a model's trainable parameters.
///
/// Dense layers hold `[W (units x fan_in), b]`; convolutions hold
/// `[W (kh x kw x cin x cout), b]`; transposed convolutions hold
/// `[W (cin x kh x kw x cout), b]`; batch norm holds `[gamma, beta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<Vec<Tensor>>,
}

pub type Gradients = ParamSet;

impl ParamSet {
    pub fn new(layers: Vec<Vec<Tensor>>) -> Self {
        ParamSet { layers }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        ParamSet {
            layers: other
                .layers
                .iter()
                .map(|ts| ts.iter().map(|t| Tensor::zeros(t.shape())).collect())
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Vec<Tensor>] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> &[Tensor] {
        &self.layers[index]
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.layers
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flatten()
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape()))
    }

    /// Elementwise `f(self, other)`; errors if the sets are not congruent.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        if !self.is_congruent(other) {
            return Err(FidelError::Shape("parameter sets are not congruent".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.zip_map(y, &f)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamSet { layers })
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|ts| ts.iter().map(|t| t.scale(c)).collect())
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    pub fn value_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }
}

/// Whether a pass is for training (dropout active, batch statistics) or not.
pub enum Phase<'a> {
    Inference,
    Training(&'a mut ModelRng),
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Training(_))
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    None,
    DropoutMask(Vec<f64>),
    PoolArgmax(Vec<usize>),
    BatchStats {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    FrozenNorm {
        inv_std: Vec<f64>,
    },
}

/// Every intermediate activation of one forward pass.
///
/// `activations[0]` is the input batch and `activations[l + 1]` the output of
/// layer `l` (after its activation function).
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    activations: Vec<Tensor>,
    caches: Vec<LayerCache>,
}

impl ActivationTrace {
    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds the input")
    }

    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }

    /// Output of layer `index`.
    pub fn layer_output(&self, index: usize) -> &Tensor {
        &self.activations[index + 1]
    }

    /// Input fed to layer `index`.
    pub fn layer_input(&self, index: usize) -> &Tensor {
        &self.activations[index]
    }

    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[l]` is the per-sample input shape of layer `l`; the final entry
    /// is the model output shape.
    shapes: Vec<Vec<usize>>,
    params: ParamSet,
    /// Non-trainable running statistics (`[mean, var]` for batch norm).
    state: Vec<Vec<Tensor>>,
    seed: u64,
}

impl Model {
    /// Build a model with Glorot-uniform weights, zero biases, unit batch-norm
    /// scales, all drawn from a generator seeded with `seed`.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Model> {
        let shapes = infer_shapes(input_shape, &layers)?;
        let mut rng = ModelRng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.len());
        let mut state = Vec::with_capacity(layers.len());
        for (spec, in_shape) in layers.iter().zip(&shapes) {
            let shapes = spec.param_shapes(in_shape);
            let layer_params = match &spec.kind {
                LayerKind::Dense { units } => {
                    let fan_in: usize = in_shape.iter().product();
                    vec![
                        glorot(&mut rng, &shapes[0], fan_in, *units),
                        Tensor::zeros(&shapes[1]),
                    ]
                }
                LayerKind::Conv2D { filters, kernel, .. }
                | LayerKind::ConvTranspose2D { filters, kernel, .. } => {
                    let area = kernel.0 * kernel.1;
                    let cin = in_shape[2];
                    vec![
                        glorot(&mut rng, &shapes[0], area * cin, area * filters),
                        Tensor::zeros(&shapes[1]),
                    ]
                }
                LayerKind::BatchNorm { .. } => {
                    vec![Tensor::filled(&shapes[0], 1.0), Tensor::zeros(&shapes[1])]
                }
                _ => Vec::new(),
            };
            params.push(layer_params);
            state.push(match &spec.kind {
                LayerKind::BatchNorm { .. } => {
                    vec![Tensor::zeros(&shapes[0]), Tensor::filled(&shapes[0], 1.0)]
                }
                _ => Vec::new(),
            });
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            layers,
            shapes,
            params: ParamSet::new(params),
            state,
            seed,
        })
    }

    /// Reassemble a model from stored parts, validating every shape.
    pub fn from_parts(
        input_shape: &[usize],
        layers: Vec<LayerSpec>,
        params: ParamSet,
        state: Vec<Vec<Tensor>>,
        seed: u64,
    ) -> Result<Model> {
        let mut model = Model::new(input_shape, layers, seed)?;
        if !model.params.is_congruent(&params) {
            return Err(FidelError::Shape("parameters do not match layer specs".into()));
        }
        let state_ok = state.len() == model.state.len()
            && state
                .iter()
                .zip(&model.state)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape()));
        if !state_ok {
            return Err(FidelError::Shape("layer state does not match layer specs".into()));
        }
        model.params = params;
        model.state = state;
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("shapes include the input")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample input shape of layer `index`.
    pub fn layer_input_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn layer_output_shape(&self, index: usize) -> &[usize] {
        &self.shapes[index + 1]
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn state(&self) -> &[Vec<Tensor>] {
        &self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.value_count()
    }

    pub fn same_architecture(&self, other: &Model) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }

    /// Run the whole network.
    pub fn forward(&self, input: &Tensor, phase: Phase<'_>) -> Result<ActivationTrace> {
        self.forward_prefix(input, self.layers.len(), phase)
    }

    /// Run layers `0..end` only.
    pub fn forward_prefix(&self, input: &Tensor, end: usize, mut phase: Phase<'_>) -> Result<ActivationTrace> {
        let end = end.min(self.layers.len());
        if input.rank() < 2 || input.shape()[1..] != self.input_shape[..] {
            let kind = self.layers.first().map(|l| l.kind.name()).unwrap_or("input");
            return Err(FidelError::LayerShape {
                layer: 0,
                kind,
                expected: self.input_shape.clone(),
                actual: input.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        let mut activations = Vec::with_capacity(end + 1);
        let mut caches = Vec::with_capacity(end);
        activations.push(input.clone());
        for l in 0..end {
            let (mut out, cache) = self.layer_forward(l, &activations[l], &mut phase)?;
            let row_len = *self.shapes[l + 1].last().unwrap_or(&1);
            ops::activate(self.layers[l].activation, out.data_mut(), row_len);
            activations.push(out);
            caches.push(cache);
        }
        Ok(ActivationTrace { activations, caches })
    }

    /// Inference-mode output for a batch.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let trace = self.forward(input, Phase::Inference)?;
        Ok(trace.activations.into_iter().last().expect("non-empty trace"))
    }

    fn layer_forward(&self, l: usize, x: &Tensor, phase: &mut Phase<'_>) -> Result<(Tensor, LayerCache)> {
        let n = x.batch_len();
        let in_shape = &self.shapes[l];
        let out_shape = &self.shapes[l + 1];
        let mut full_out = vec![n];
        full_out.extend_from_slice(out_shape);
        let params = self.params.layer(l);
        match &self.layers[l].kind {
            LayerKind::Dense { units } => {
                let fan_in = x.row_len();
                let mut out = vec![0.0; n * units];
                gemm(
                    1.0,
                    Mat::new(x.data(), n, fan_in),
                    Mat::new(params[0].data(), *units, fan_in).t(),
                    0.0,
                    &mut out,
                );
                ops::add_bias_rows(&mut out, params[1].data());
                Ok((Tensor::new(full_out, out)?, LayerCache::None))
            }
            LayerKind::Conv2D { .. } => {
                let win = self.conv_window(l);
                let cout = out_shape[2];
                let (plen, pos) = (win.patch_len(), win.positions());
                let mut cols = vec![0.0; pos * plen];
                let mut out = vec![0.0; n * pos * cout];
                for (s, dst) in out.chunks_exact_mut(pos * cout).enumerate() {
                    win.im2col(x.row(s), &mut cols);
                    gemm(1.0, Mat::new(&cols, pos, plen), Mat::new(params[0].data(), plen, cout), 0.0, dst);
                }
                ops::add_bias_rows(&mut out, params[1].data());
                Ok((Tensor::new(full_out, out)?, LayerCache::None))
            }
            LayerKind::ConvTranspose2D { .. } => {
                let win = self.conv_transpose_window(l);
                let cin = in_shape[2];
                let in_pos = in_shape[0] * in_shape[1];
                let plen = win.patch_len();
                let out_len: usize = out_shape.iter().product();
                let mut cols = vec![0.0; in_pos * plen];
                let mut out = vec![0.0; n * out_len];
                for (s, dst) in out.chunks_exact_mut(out_len).enumerate() {
                    gemm(1.0, Mat::new(x.row(s), in_pos, cin), Mat::new(params[0].data(), cin, plen), 0.0, &mut cols);
                    win.col2im_add(&cols, dst);
                }
                ops::add_bias_rows(&mut out, params[1].data());
                Ok((Tensor::new(full_out, out)?, LayerCache::None))
            }
            LayerKind::MaxPool2D { pool } => {
                let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let out_len = oh * ow * c;
                let mut out = vec![0.0; n * out_len];
                let mut argmax = vec![0usize; n * out_len];
                for s in 0..n {
                    let src = x.row(s);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best_idx = ((oy * pool.0) * w + ox * pool.1) * c + ch;
                                let mut best = src[best_idx];
                                for py in 0..pool.0 {
                                    for px in 0..pool.1 {
                                        let idx = ((oy * pool.0 + py) * w + ox * pool.1 + px) * c + ch;
                                        if src[idx] > best {
                                            best = src[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                let o = s * out_len + (oy * ow + ox) * c + ch;
                                out[o] = best;
                                argmax[o] = best_idx;
                            }
                        }
                    }
                    debug_assert!(h >= oh * pool.0);
                }
                Ok((Tensor::new(full_out, out)?, LayerCache::PoolArgmax(argmax)))
            }
            LayerKind::Flatten | LayerKind::Reshape { .. } => {
                Ok((x.clone().reshape(&full_out)?, LayerCache::None))
            }
            LayerKind::Dropout { rate } => match phase {
                Phase::Training(rng) if *rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { 1.0 / keep })
                        .collect();
                    let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                    Ok((Tensor::new(full_out, out)?, LayerCache::DropoutMask(mask)))
                }
                _ => Ok((x.clone(), LayerCache::None)),
            },
            LayerKind::Upsample2D { factor } => {
                let (w, c) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let out_len = oh * ow * c;
                let mut out = vec![0.0; n * out_len];
                for s in 0..n {
                    let src = x.row(s);
                    let dst = &mut out[s * out_len..(s + 1) * out_len];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let i = ((oy / factor.0) * w + ox / factor.1) * c;
                            let o = (oy * ow + ox) * c;
                            dst[o..o + c].copy_from_slice(&src[i..i + c]);
                        }
                    }
                }
                Ok((Tensor::new(full_out, out)?, LayerCache::None))
            }
            LayerKind::BatchNorm { epsilon, .. } => {
                let c = *in_shape.last().unwrap_or(&1);
                let gamma = params[0].data();
                let beta = params[1].data();
                let m = (x.len() / c) as f64;
                if phase.is_training() {
                    let mut mean = vec![0.0; c];
                    for row in x.data().chunks_exact(c) {
                        for (a, v) in mean.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m);
                    let mut var = vec![0.0; c];
                    for row in x.data().chunks_exact(c) {
                        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                            *a += (v - mu) * (v - mu);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= m);
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let mut xhat = x.data().to_vec();
                    let mut out = vec![0.0; x.len()];
                    for (xr, orow) in xhat.chunks_exact_mut(c).zip(out.chunks_exact_mut(c)) {
                        for ch in 0..c {
                            xr[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                            orow[ch] = gamma[ch] * xr[ch] + beta[ch];
                        }
                    }
                    Ok((
                        Tensor::new(full_out, out)?,
                        LayerCache::BatchStats { xhat, inv_std, mean, var },
                    ))
                } else {
                    let mean = self.state[l][0].data();
                    let var = self.state[l][1].data();
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let mut out = x.data().to_vec();
                    for row in out.chunks_exact_mut(c) {
                        for ch in 0..c {
                            row[ch] = gamma[ch] * (row[ch] - mean[ch]) * inv_std[ch] + beta[ch];
                        }
                    }
                    Ok((Tensor::new(full_out, out)?, LayerCache::FrozenNorm { inv_std }))
                }
            }
        }
    }

    fn conv_window(&self, l: usize) -> Window {
        let LayerKind::Conv2D { kernel, stride, padding, .. } = self.layers[l].kind else {
            unreachable!("conv_window on non-conv layer")
        };
        let (i, o) = (&self.shapes[l], &self.shapes[l + 1]);
        Window {
            in_h: i[0],
            in_w: i[1],
            channels: i[2],
            out_h: o[0],
            out_w: o[1],
            kernel,
            stride,
            pad: (
                conv_pad_before(i[0], o[0], kernel.0, stride.0, padding),
                conv_pad_before(i[1], o[1], kernel.1, stride.1, padding),
            ),
        }
    }

    /// Geometry of the convolution whose adjoint this transposed layer is:
    /// the layer output plays the image, the layer input the patch grid.
    fn conv_transpose_window(&self, l: usize) -> Window {
        let LayerKind::ConvTranspose2D { kernel, stride, padding, .. } = self.layers[l].kind else {
            unreachable!("conv_transpose_window on non-transposed layer")
        };
        let (i, o) = (&self.shapes[l], &self.shapes[l + 1]);
        debug_assert!(conv_out(o[0], kernel.0, stride.0, padding).is_some());
        Window {
            in_h: o[0],
            in_w: o[1],
            channels: o[2],
            out_h: i[0],
            out_w: i[1],
            kernel,
            stride,
            pad: (
                conv_transpose_crop(i[0], o[0], kernel.0, stride.0, padding),
                conv_transpose_crop(i[1], o[1], kernel.1, stride.1, padding),
            ),
        }
    }

    /// Gradient of `loss(output, target)` with respect to every parameter.
    ///
    /// A softmax output layer combined with cross-entropy is differentiated
    /// in fused form, `(h(x) - y) / N`.
    pub fn backward(&self, trace: &ActivationTrace, target: &Tensor, loss: LossKind) -> Result<Gradients> {
        if trace.caches.len() != self.layers.len() {
            return Err(FidelError::Shape("trace does not cover every layer".into()));
        }
        let output = trace.output();
        if output.shape() != target.shape() {
            return Err(FidelError::Shape(format!(
                "output {:?} vs target {:?}",
                output.shape(),
                target.shape()
            )));
        }
        let last = self.layers.len() - 1;
        let fused = loss == LossKind::CategoricalCrossEntropy && self.layers[last].activation == Activation::Softmax;
        let mut grad = if fused {
            let n = output.batch_len() as f64;
            output.zip_map(target, |p, y| (p - y) / n)?
        } else {
            loss_gradient(output, target, loss)?
        };
        let mut grads = ParamSet::zeros_like(&self.params);
        for l in (0..self.layers.len()).rev() {
            if !(fused && l == last) {
                let row_len = *self.shapes[l + 1].last().unwrap_or(&1);
                ops::activation_backward(
                    self.layers[l].activation,
                    trace.activations[l + 1].data(),
                    grad.data_mut(),
                    row_len,
                );
            }
            let need_input_grad = l > 0;
            grad = self.layer_backward(l, trace, grad, &mut grads.layers[l], need_input_grad)?;
        }
        Ok(grads)
    }

    fn layer_backward(
        &self,
        l: usize,
        trace: &ActivationTrace,
        dout: Tensor,
        pgrads: &mut [Tensor],
        need_input_grad: bool,
    ) -> Result<Tensor> {
        let x = &trace.activations[l];
        let n = x.batch_len();
        let in_shape = &self.shapes[l];
        let out_shape = &self.shapes[l + 1];
        let params = self.params.layer(l);
        let mut dx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
        match &self.layers[l].kind {
            LayerKind::Dense { units } => {
                let fan_in = x.row_len();
                let (dw, db) = split_pair(pgrads);
                gemm(1.0, Mat::new(dout.data(), n, *units).t(), Mat::new(x.data(), n, fan_in), 0.0, dw.data_mut());
                ops::accumulate_bias_grad(dout.data(), db.data_mut());
                if need_input_grad {
                    gemm(1.0, Mat::new(dout.data(), n, *units), Mat::new(params[0].data(), *units, fan_in), 0.0, &mut dx);
                }
            }
            LayerKind::Conv2D { .. } => {
                let win = self.conv_window(l);
                let cout = out_shape[2];
                let (plen, pos) = (win.patch_len(), win.positions());
                let (dw, db) = split_pair(pgrads);
                let mut cols = vec![0.0; pos * plen];
                let mut dcols = vec![0.0; pos * plen];
                let in_len = x.row_len();
                for s in 0..n {
                    let dz = &dout.data()[s * pos * cout..(s + 1) * pos * cout];
                    win.im2col(x.row(s), &mut cols);
                    gemm(1.0, Mat::new(&cols, pos, plen).t(), Mat::new(dz, pos, cout), 1.0, dw.data_mut());
                    if need_input_grad {
                        gemm(1.0, Mat::new(dz, pos, cout), Mat::new(params[0].data(), plen, cout).t(), 0.0, &mut dcols);
                        win.col2im_add(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                ops::accumulate_bias_grad(dout.data(), db.data_mut());
            }
            LayerKind::ConvTranspose2D { .. } => {
                let win = self.conv_transpose_window(l);
                let cin = in_shape[2];
                let in_pos = in_shape[0] * in_shape[1];
                let plen = win.patch_len();
                let out_len: usize = out_shape.iter().product();
                let (dw, db) = split_pair(pgrads);
                let mut dcols = vec![0.0; in_pos * plen];
                for s in 0..n {
                    win.im2col(&dout.data()[s * out_len..(s + 1) * out_len], &mut dcols);
                    gemm(1.0, Mat::new(x.row(s), in_pos, cin).t(), Mat::new(&dcols, in_pos, plen), 1.0, dw.data_mut());
                    if need_input_grad {
                        gemm(
                            1.0,
                            Mat::new(&dcols, in_pos, plen),
                            Mat::new(params[0].data(), cin, plen).t(),
                            0.0,
                            &mut dx[s * in_pos * cin..(s + 1) * in_pos * cin],
                        );
                    }
                }
                ops::accumulate_bias_grad(dout.data(), db.data_mut());
            }
            LayerKind::MaxPool2D { .. } => {
                if need_input_grad {
                    let LayerCache::PoolArgmax(argmax) = &trace.caches[l] else {
                        return Err(FidelError::Shape("pooling trace missing".into()));
                    };
                    let in_len = x.row_len();
                    let out_len = dout.row_len();
                    for (o, (&g, &idx)) in dout.data().iter().zip(argmax).enumerate() {
                        dx[(o / out_len) * in_len + idx] += g;
                    }
                }
            }
            LayerKind::Flatten | LayerKind::Reshape { .. } => {
                if need_input_grad {
                    dx = dout.into_data();
                }
            }
            LayerKind::Dropout { .. } => {
                if need_input_grad {
                    dx = match &trace.caches[l] {
                        LayerCache::DropoutMask(mask) => dout.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
                        _ => dout.into_data(),
                    };
                }
            }
            LayerKind::Upsample2D { factor } => {
                if need_input_grad {
                    let (w, c) = (in_shape[1], in_shape[2]);
                    let (oh, ow) = (out_shape[0], out_shape[1]);
                    let (in_len, out_len) = (x.row_len(), oh * ow * c);
                    for s in 0..n {
                        let src = &dout.data()[s * out_len..(s + 1) * out_len];
                        let dst = &mut dx[s * in_len..(s + 1) * in_len];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let i = ((oy / factor.0) * w + ox / factor.1) * c;
                                let o = (oy * ow + ox) * c;
                                for ch in 0..c {
                                    dst[i + ch] += src[o + ch];
                                }
                            }
                        }
                    }
                }
            }
            LayerKind::BatchNorm { .. } => {
                let c = *in_shape.last().unwrap_or(&1);
                let gamma = params[0].data();
                let (dgamma, dbeta) = split_pair(pgrads);
                match &trace.caches[l] {
                    LayerCache::BatchStats { xhat, inv_std, .. } => {
                        let m = (x.len() / c) as f64;
                        let mut sum_dy = vec![0.0; c];
                        let mut sum_dy_xhat = vec![0.0; c];
                        for (g, xh) in dout.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                sum_dy[ch] += g[ch];
                                sum_dy_xhat[ch] += g[ch] * xh[ch];
                            }
                        }
                        dgamma.data_mut().copy_from_slice(&sum_dy_xhat);
                        dbeta.data_mut().copy_from_slice(&sum_dy);
                        if need_input_grad {
                            for ((d, g), xh) in dx.chunks_exact_mut(c).zip(dout.data().chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                                for ch in 0..c {
                                    d[ch] = gamma[ch] * inv_std[ch] / m
                                        * (m * g[ch] - sum_dy[ch] - xh[ch] * sum_dy_xhat[ch]);
                                }
                            }
                        }
                    }
                    LayerCache::FrozenNorm { inv_std } => {
                        let mean = self.state[l][0].data();
                        for (g, xr) in dout.data().chunks_exact(c).zip(x.data().chunks_exact(c)) {
                            for ch in 0..c {
                                dgamma.data_mut()[ch] += g[ch] * (xr[ch] - mean[ch]) * inv_std[ch];
                                dbeta.data_mut()[ch] += g[ch];
                            }
                        }
                        if need_input_grad {
                            for (d, g) in dx.chunks_exact_mut(c).zip(dout.data().chunks_exact(c)) {
                                for ch in 0..c {
                                    d[ch] = g[ch] * gamma[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                    _ => return Err(FidelError::Shape("batch-norm trace missing".into())),
                }
            }
        }
        if !need_input_grad {
            return Ok(Tensor::zeros(&[1]));
        }
        Tensor::new(x.shape().to_vec(), dx)
    }

    /// Fold the batch statistics of a training trace into the batch-norm
    /// running averages.
    pub fn absorb_batch_statistics(&mut self, trace: &ActivationTrace) {
        for (l, cache) in trace.caches.iter().enumerate() {
            if let (LayerKind::BatchNorm { momentum, .. }, LayerCache::BatchStats { mean, var, .. }) =
                (&self.layers[l].kind, cache)
            {
                let [running_mean, running_var] = &mut self.state[l][..] else {
                    continue;
                };
                for (r, b) in running_mean.data_mut().iter_mut().zip(mean) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
                for (r, b) in running_var.data_mut().iter_mut().zip(var) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
    }
}

fn split_pair(pgrads: &mut [Tensor]) -> (&mut Tensor, &mut Tensor) {
    let [a, b] = pgrads else {
        panic!("layer expected exactly two parameter tensors");
    };
    (a, b)
}

fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(FidelError::Shape(format!("invalid input shape {input_shape:?}")));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (l, spec) in layers.iter().enumerate() {
        let next = spec.output_shape(&shapes[l]).map_err(|e| match e {
            FidelError::InvalidLayer(msg) => FidelError::InvalidLayer(format!("layer {l}: {msg}")),
            other => other,
        })?;
        shapes.push(next);
    }
    Ok(shapes)
}

fn glorot(rng: &mut ModelRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Padding;

    fn dense_identity() -> Model {
        let mut m = Model::new(&[2], vec![LayerSpec::dense(2, Activation::None)], 0).unwrap();
        let p = &mut m.params_mut().layers_mut()[0];
        p[0] = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p[1] = Tensor::zeros(&[2]);
        m
    }

    #[test]
    fn dense_identity_passes_input_through() {
        let m = dense_identity();
        let x = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn softmax_output_of_zero_logits() {
        let m = Model::new(&[2], vec![LayerSpec::dense(2, Activation::Softmax)], 3).unwrap();
        let mut m = m;
        m.params_mut().layers_mut()[0][0] = Tensor::zeros(&[2, 2]);
        let out = m.predict(&Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn input_shape_mismatch_names_the_layer() {
        let m = dense_identity();
        let err = m.forward(&Tensor::zeros(&[1, 3]), Phase::Inference).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0") && msg.contains("Dense"), "{msg}");
    }

    #[test]
    fn seeded_construction_is_bit_identical() {
        let layers = vec![
            LayerSpec::conv2d(4, (3, 3), (1, 1), Padding::Valid, Activation::Relu),
            LayerSpec::flatten(),
            LayerSpec::dense(5, Activation::Softmax),
        ];
        let a = Model::new(&[6, 6, 2], layers.clone(), 11).unwrap();
        let b = Model::new(&[6, 6, 2], layers.clone(), 11).unwrap();
        let c = Model::new(&[6, 6, 2], layers, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn one_neuron_closed_form_gradient() {
        let mut m = Model::new(&[1], vec![LayerSpec::dense(1, Activation::None)], 0).unwrap();
        m.params_mut().layers_mut()[0][0] = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let trace = m.forward(&x, Phase::Inference).unwrap();
        let g = m.backward(&trace, &y, LossKind::MeanSquaredError).unwrap();
        assert_eq!(g.layer(0)[0].data(), &[8.0]);
        assert_eq!(g.layer(0)[1].data(), &[4.0]);
    }

    #[test]
    fn dead_relu_neuron_has_no_gradient() {
        let mut m = Model::new(
            &[3],
            vec![LayerSpec::dense(2, Activation::Relu), LayerSpec::dense(1, Activation::None)],
            5,
        )
        .unwrap();
        {
            let p = &mut m.params_mut().layers_mut()[0];
            p[0] = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]).unwrap();
            p[1] = Tensor::new(vec![2], vec![0.1, -0.1]).unwrap();
        }
        let x = Tensor::new(vec![1, 3], vec![0.5, 0.2, 0.9]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let trace = m.forward(&x, Phase::Inference).unwrap();
        let g = m.backward(&trace, &y, LossKind::MeanSquaredError).unwrap();
        let (dw, db) = (&g.layer(0)[0], &g.layer(0)[1]);
        assert!(dw.row(0).iter().all(|v| *v != 0.0));
        assert!(dw.row(1).iter().all(|v| *v == 0.0));
        assert_eq!(db.data()[1], 0.0);
    }

    #[test]
    fn max_pool_routes_ties_to_first_maximum() {
        let m = Model::new(&[2, 2, 1], vec![LayerSpec::max_pool((2, 2)), LayerSpec::flatten()], 0).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 3.0, 3.0, 2.0]).unwrap();
        let trace = m.forward(&x, Phase::Inference).unwrap();
        assert_eq!(trace.output().data(), &[3.0]);
        let LayerCache::PoolArgmax(idx) = &trace.caches[0] else { panic!() };
        assert_eq!(idx, &vec![1]);
    }

    #[test]
    fn dropout_is_identity_outside_training_and_at_rate_zero() {
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let m = Model::new(&[3], vec![LayerSpec::dropout(0.5)], 0).unwrap();
        assert_eq!(m.predict(&x).unwrap(), x);
        let m0 = Model::new(&[3], vec![LayerSpec::dropout(0.0)], 0).unwrap();
        let mut rng = ModelRng::seed_from_u64(1);
        let t = m0.forward(&x, Phase::Training(&mut rng)).unwrap();
        assert_eq!(t.output(), &x);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let x = Tensor::filled(&[1, 1000], 1.0);
        let m = Model::new(&[1000], vec![LayerSpec::dropout(0.5)], 0).unwrap();
        let mut rng = ModelRng::seed_from_u64(9);
        let t = m.forward(&x, Phase::Training(&mut rng)).unwrap();
        assert!(t.output().data().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = t.output().data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept), "{kept}");
    }

    #[test]
    fn batch_norm_normalizes_in_training_and_updates_running_stats() {
        let mut m = Model::new(&[2], vec![LayerSpec::batch_norm()], 0).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let mut rng = ModelRng::seed_from_u64(0);
        let t = m.forward(&x, Phase::Training(&mut rng)).unwrap();
        let out = t.output();
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| out.data()[i * 2 + ch]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
        m.absorb_batch_statistics(&t);
        let running_mean = m.state()[0][0].data();
        assert!((running_mean[0] - 0.01 * 2.5).abs() < 1e-12);
        assert!((running_mean[1] - 0.01 * 25.0).abs() < 1e-12);
    }
}
