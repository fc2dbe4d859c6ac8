//! Builders for the victim classifiers and the reconstruction generators.

use std::fmt;
use std::str::FromStr;

use super::layer::{Activation, LayerSpec, Padding};
use super::model::Model;
use crate::error::{FidelError, Result};

/// SGD learning rate of both victim networks.
pub const VICTIM_LEARNING_RATE: f64 = 0.01;
/// Minibatch size of both victim networks.
pub const VICTIM_BATCH_SIZE: usize = 50;
pub const NUM_CLASSES: usize = 10;
/// Width of the first dense layer of both victims.
pub const FIRST_DENSE_UNITS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VictimArch {
    /// Dense 128 (configurable activation) -> Dense 128 -> Dense 64 -> Dense 10.
    Fcnn,
    /// Conv 3x3x32 -> MaxPool 2x2 -> Flatten -> Dense 128 (configurable
    /// activation) -> Dense 64 -> Dense 10.
    Cnn,
}

impl VictimArch {
    pub fn name(self) -> &'static str {
        match self {
            VictimArch::Fcnn => "fcnn",
            VictimArch::Cnn => "cnn",
        }
    }
}

impl fmt::Display for VictimArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VictimArch {
    type Err = FidelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcnn" => Ok(VictimArch::Fcnn),
            "cnn" => Ok(VictimArch::Cnn),
            other => Err(FidelError::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Victim network options that vary across experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VictimOptions {
    /// Activation of the first dense layer; deeper layers always use ReLU.
    pub first_activation: Activation,
    /// Dropout rate placed directly after the first dense layer.
    pub dropout: Option<f64>,
}

impl Default for VictimOptions {
    fn default() -> Self {
        VictimOptions {
            first_activation: Activation::Relu,
            dropout: None,
        }
    }
}

pub fn victim_layers(arch: VictimArch, opts: VictimOptions) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    if arch == VictimArch::Cnn {
        layers.push(LayerSpec::conv2d(32, (3, 3), (1, 1), Padding::Valid, Activation::None));
        layers.push(LayerSpec::max_pool((2, 2)));
        layers.push(LayerSpec::flatten());
    }
    layers.push(LayerSpec::dense(FIRST_DENSE_UNITS, opts.first_activation));
    if let Some(rate) = opts.dropout {
        layers.push(LayerSpec::dropout(rate));
    }
    if arch == VictimArch::Fcnn {
        layers.push(LayerSpec::dense(128, Activation::Relu));
    }
    layers.push(LayerSpec::dense(64, Activation::Relu));
    layers.push(LayerSpec::dense(NUM_CLASSES, Activation::Softmax));
    layers
}

pub fn build_victim(arch: VictimArch, input_shape: &[usize], opts: VictimOptions, seed: u64) -> Result<Model> {
    Model::new(input_shape, victim_layers(arch, opts), seed)
}

/// Generator families, keyed by the dataset they reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GeneratorArch {
    /// Upsample -> Conv 5x5x20 -> Upsample -> Conv 5x5x10 /2 -> Dense -> Reshape.
    Mnist,
    /// Three transposed convolutions with batch norm, then Tanh and Sigmoid
    /// convolutions.
    Cifar,
}

impl GeneratorArch {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorArch::Mnist => "mnist",
            GeneratorArch::Cifar => "cifar",
        }
    }
}

impl FromStr for GeneratorArch {
    type Err = FidelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(GeneratorArch::Mnist),
            "cifar" | "cifar10" => Ok(GeneratorArch::Cifar),
            other => Err(FidelError::Config(format!("unknown generator '{other}'"))),
        }
    }
}

pub const GENERATOR_LEARNING_RATE: f64 = 0.001;
pub const GENERATOR_RHO: f64 = 0.95;
pub const ADADELTA_EPSILON: f64 = 1e-7;

pub fn generator_layers(arch: GeneratorArch, sample_shape: &[usize]) -> Vec<LayerSpec> {
    match arch {
        GeneratorArch::Mnist => vec![
            LayerSpec::upsample((2, 2)),
            LayerSpec::conv2d(20, (5, 5), (1, 1), Padding::Valid, Activation::Relu),
            LayerSpec::upsample((2, 2)),
            LayerSpec::conv2d(10, (5, 5), (2, 2), Padding::Valid, Activation::Relu),
            LayerSpec::flatten(),
            LayerSpec::dense(sample_shape.iter().product(), Activation::Sigmoid),
            LayerSpec::reshape(sample_shape.to_vec()),
        ],
        // The third transposed convolution uses valid padding (30 -> 34) so
        // the valid 3x3 Tanh convolution lands on 32 x 32.
        GeneratorArch::Cifar => vec![
            LayerSpec::conv_transpose2d(128, (5, 5), (1, 1), Padding::Same, Activation::Relu),
            LayerSpec::conv_transpose2d(64, (5, 5), (2, 2), Padding::Same, Activation::Relu),
            LayerSpec::batch_norm(),
            LayerSpec::conv_transpose2d(64, (5, 5), (1, 1), Padding::Valid, Activation::Relu),
            LayerSpec::conv2d(32, (3, 3), (1, 1), Padding::Valid, Activation::Tanh),
            LayerSpec::conv2d(sample_shape[2], (3, 3), (1, 1), Padding::Same, Activation::Sigmoid),
        ],
    }
}

/// Build a generator mapping `feature_shape` to `sample_shape`.
pub fn build_generator(
    arch: GeneratorArch,
    feature_shape: &[usize],
    sample_shape: &[usize],
    seed: u64,
) -> Result<Model> {
    let model = Model::new(feature_shape, generator_layers(arch, sample_shape), seed)?;
    if model.output_shape() != sample_shape {
        return Err(FidelError::InvalidLayer(format!(
            "{} generator maps {feature_shape:?} to {:?}, not {sample_shape:?}",
            arch.name(),
            model.output_shape()
        )));
    }
    Ok(model)
}
