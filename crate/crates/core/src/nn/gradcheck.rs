//! Central finite-difference checks of [`Model::backward`].

use rand::Rng;

use super::layer::Activation;
use super::loss::{loss, LossKind};
use super::model::{Model, Phase};
use crate::error::{FidelError, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Differences smaller than this are treated as agreement regardless of scale.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings {
    pub step: f64,
    /// Parameters probed per tensor, chosen at random.
    pub probes: usize,
    /// Seeds both the probe choice and the dropout masks.
    pub seed: u64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            step: 1e-5,
            probes: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mismatch {
    pub layer: usize,
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Mismatch {
    pub fn relative_error(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        if diff <= ABS_FLOOR {
            0.0
        } else {
            diff / self.analytic.abs().max(self.numeric.abs())
        }
    }
}

/// Loss plus the on/off pattern of every ReLU unit in the pass.
fn eval_loss(model: &Model, x: &Tensor, y: &Tensor, kind: LossKind, seed: u64) -> Result<(f64, Vec<bool>)> {
    let mut rng = seeded(seed);
    let trace = model.forward(x, Phase::Training(&mut rng))?;
    let mut pattern = Vec::new();
    for (l, spec) in model.layers().iter().enumerate() {
        if spec.activation == Activation::Relu {
            pattern.extend(trace.layer_output(l).data().iter().map(|&v| v > 0.0));
        }
    }
    Ok((loss(trace.output(), y, kind)?, pattern))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientReport {
    /// The probe with the largest relative error.
    pub worst: Mismatch,
    pub probes: usize,
    /// Probes discarded because the perturbation switched a ReLU unit, where
    /// the loss is not differentiable.
    pub kinks: usize,
}

/// Probe random parameters of every tensor and report the comparison with
/// the largest relative error. Dropout masks are identical in every pass.
pub fn check_gradients(model: &Model, x: &Tensor, y: &Tensor, kind: LossKind, settings: &CheckSettings) -> Result<GradientReport> {
    let mut rng = seeded(settings.seed);
    let trace = model.forward(x, Phase::Training(&mut rng))?;
    let grads = model.backward(&trace, y, kind)?;
    let (_, base_pattern) = eval_loss(model, x, y, kind, settings.seed)?;

    let mut pick = seeded(settings.seed ^ 0x5eed);
    let mut probe = model.clone();
    let mut worst: Option<Mismatch> = None;
    let (mut probes, mut kinks) = (0, 0);
    for (l, layer) in grads.layers().iter().enumerate() {
        for (t, g) in layer.iter().enumerate() {
            for _ in 0..settings.probes.min(g.len()) {
                let i = pick.gen_range(0..g.len());
                let orig = model.params().layer(l)[t].data()[i];
                let mut at = |v: f64| -> Result<(f64, Vec<bool>)> {
                    probe.params_mut().layers_mut()[l][t].data_mut()[i] = v;
                    eval_loss(&probe, x, y, kind, settings.seed)
                };
                let (up, up_pattern) = at(orig + settings.step)?;
                let (down, down_pattern) = at(orig - settings.step)?;
                at(orig)?;
                probes += 1;
                if up_pattern != base_pattern || down_pattern != base_pattern {
                    kinks += 1;
                    continue;
                }
                let m = Mismatch {
                    layer: l,
                    tensor: t,
                    index: i,
                    analytic: g.data()[i],
                    numeric: (up - down) / (2.0 * settings.step),
                };
                if worst.is_none_or(|w| m.relative_error() > w.relative_error()) {
                    worst = Some(m);
                }
            }
        }
    }
    let worst = worst.ok_or(FidelError::Empty("differentiable probes"))?;
    Ok(GradientReport { worst, probes, kinks })
}

/// A named model with an input batch and regression or classification target.
#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: String,
    pub model: Model,
    pub input: Tensor,
    pub target: Tensor,
    pub loss: LossKind,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches length")
}

fn batched(n: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(shape);
    s
}

fn regression_case(name: String, model: Model, seed: u64) -> CheckCase {
    let input = uniform(&batched(3, model.input_shape()), -1.0, 1.0, seed);
    let target = uniform(&batched(3, model.output_shape()), 0.0, 1.0, seed + 1);
    CheckCase { name, model, input, target, loss: LossKind::MeanSquaredError }
}

/// Small random instances covering every layer kind with every activation,
/// plus the victim and generator architectures at reduced size.
pub fn catalog() -> Result<Vec<CheckCase>> {
    use super::arch::{build_generator, build_victim, GeneratorArch, VictimArch, VictimOptions};
    use super::layer::{LayerSpec, Padding};
    use super::loss::one_hot;

    let input = [6, 6, 2];
    let acts = [Activation::None, Activation::Relu, Activation::Sigmoid, Activation::Tanh];
    // A leading convolution makes every tested layer pass gradients on.
    let wrap = |layer: LayerSpec, tail: Vec<LayerSpec>, seed: u64| -> Result<Model> {
        let mut layers = vec![LayerSpec::conv2d(3, (2, 2), (1, 1), Padding::Same, Activation::Tanh), layer];
        layers.extend(tail);
        Model::new(&input, layers, seed)
    };
    let head = || vec![LayerSpec::flatten(), LayerSpec::dense(4, Activation::Sigmoid)];

    let mut cases = Vec::new();
    let mut seed = 0u64;
    let mut next = || {
        seed += 1;
        seed * 7919
    };
    for act in acts {
        for units in [5, 2] {
            let s = next();
            let m = wrap(LayerSpec::flatten(), vec![LayerSpec::dense(units, act), LayerSpec::dense(3, Activation::Sigmoid)], s)?;
            cases.push(regression_case(format!("dense/{act}"), m, s));
        }
        for (pad, stride, kernel) in [(Padding::Valid, (1, 1), (3, 2)), (Padding::Same, (2, 2), (3, 3))] {
            let s = next();
            let m = wrap(LayerSpec::conv2d(4, kernel, stride, pad, act), head(), s)?;
            cases.push(regression_case(format!("conv2d/{act}"), m, s));
        }
        for (pad, stride) in [(Padding::Valid, (1, 1)), (Padding::Same, (2, 2)), (Padding::Valid, (2, 2))] {
            let s = next();
            let m = wrap(LayerSpec::conv_transpose2d(3, (3, 3), stride, pad, act), head(), s)?;
            cases.push(regression_case(format!("conv_transpose2d/{act}"), m, s));
        }
    }
    let structural = [
        LayerSpec::max_pool((2, 2)),
        LayerSpec::max_pool((3, 2)),
        LayerSpec::upsample((2, 2)),
        LayerSpec::reshape(vec![9, 4, 3]),
        LayerSpec::dropout(0.5),
        LayerSpec::dropout(0.0),
        LayerSpec::batch_norm(),
    ];
    for layer in structural {
        for _ in 0..3 {
            let s = next();
            let name = layer.kind.name().to_string();
            let m = wrap(layer.clone(), head(), s)?;
            cases.push(regression_case(name, m, s));
        }
    }
    for act in acts {
        let s = next();
        let model = Model::new(&[5], vec![LayerSpec::dense(6, act), LayerSpec::dense(4, Activation::Softmax)], s)?;
        cases.push(CheckCase {
            name: format!("softmax-cross-entropy/{act}"),
            input: uniform(&[4, 5], -1.0, 1.0, s),
            target: one_hot(&[0, 3, 1, 3], 4),
            loss: LossKind::CategoricalCrossEntropy,
            model,
        });
    }
    for act in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
        for arch in [VictimArch::Fcnn, VictimArch::Cnn] {
            let s = next();
            let opts = VictimOptions { first_activation: act, dropout: Some(0.5) };
            let model = build_victim(arch, &[8, 8, 1], opts, s)?;
            cases.push(CheckCase {
                name: format!("victim-{arch}/{act}"),
                input: uniform(&[2, 8, 8, 1], 0.0, 1.0, s),
                target: one_hot(&[1, 7], 10),
                loss: LossKind::CategoricalCrossEntropy,
                model,
            });
        }
    }
    let s = next();
    cases.push(regression_case("generator-cifar".into(), build_generator(GeneratorArch::Cifar, &[3, 3, 2], &[8, 8, 3], s)?, s));
    let s = next();
    cases.push(regression_case("generator-mnist".into(), build_generator(GeneratorArch::Mnist, &[5, 5, 2], &[6, 6, 1], s)?, s));
    Ok(cases)
}
