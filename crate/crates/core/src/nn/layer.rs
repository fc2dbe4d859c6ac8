//! Layer descriptors and shape inference.

use std::fmt;

use crate::error::{FidelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "linear" => Some(Activation::None),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            "softmax" => Some(Activation::Softmax),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// Output spatial size `ceil(in / stride)`; the zero padding is split
    /// evenly with the odd pixel going to the bottom/right.
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Fully connected layer. Inputs of any rank are flattened per sample.
    Dense {
        units: usize,
    },
    Conv2D {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    ConvTranspose2D {
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    /// Non-overlapping max pooling (stride equals pool size).
    MaxPool2D {
        pool: (usize, usize),
    },
    Flatten,
    Reshape {
        target: Vec<usize>,
    },
    /// Inverted dropout: kept activations are divided by the keep probability.
    Dropout {
        rate: f64,
    },
    /// Nearest-neighbour upsampling.
    Upsample2D {
        factor: (usize, usize),
    },
    /// Per-channel normalization over every axis but the last.
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Conv2D { .. } => "Conv2D",
            LayerKind::ConvTranspose2D { .. } => "ConvTranspose2D",
            LayerKind::MaxPool2D { .. } => "MaxPool2D",
            LayerKind::Flatten => "Flatten",
            LayerKind::Reshape { .. } => "Reshape",
            LayerKind::Dropout { .. } => "Dropout",
            LayerKind::Upsample2D { .. } => "Upsample2D",
            LayerKind::BatchNorm { .. } => "BatchNorm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, activation: Activation) -> Self {
        LayerSpec { kind, activation }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerSpec::new(LayerKind::Dense { units }, activation)
    }

    pub fn conv2d(
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    ) -> Self {
        LayerSpec::new(
            LayerKind::Conv2D {
                filters,
                kernel,
                stride,
                padding,
            },
            activation,
        )
    }

    pub fn conv_transpose2d(
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    ) -> Self {
        LayerSpec::new(
            LayerKind::ConvTranspose2D {
                filters,
                kernel,
                stride,
                padding,
            },
            activation,
        )
    }

    pub fn max_pool(pool: (usize, usize)) -> Self {
        LayerSpec::new(LayerKind::MaxPool2D { pool }, Activation::None)
    }

    pub fn flatten() -> Self {
        LayerSpec::new(LayerKind::Flatten, Activation::None)
    }

    pub fn reshape(target: Vec<usize>) -> Self {
        LayerSpec::new(LayerKind::Reshape { target }, Activation::None)
    }

    pub fn dropout(rate: f64) -> Self {
        LayerSpec::new(LayerKind::Dropout { rate }, Activation::None)
    }

    pub fn upsample(factor: (usize, usize)) -> Self {
        LayerSpec::new(LayerKind::Upsample2D { factor }, Activation::None)
    }

    pub fn batch_norm() -> Self {
        LayerSpec::new(
            LayerKind::BatchNorm {
                momentum: 0.99,
                epsilon: 1e-5,
            },
            Activation::None,
        )
    }

    /// Output shape (without batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| FidelError::InvalidLayer(format!("{}: {msg}", self.kind.name()));
        let bad = |msg: String| Err(err(msg));
        match &self.kind {
            LayerKind::Dense { units } => {
                if *units == 0 {
                    return bad("zero units".into());
                }
                Ok(vec![*units])
            }
            LayerKind::Conv2D {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w, _) = spatial(input).map_err(err)?;
                check_window(*kernel, *stride).map_err(err)?;
                let oh = conv_out(h, kernel.0, stride.0, *padding).ok_or(());
                let ow = conv_out(w, kernel.1, stride.1, *padding).ok_or(());
                match (oh, ow) {
                    (Ok(oh), Ok(ow)) if *filters > 0 => Ok(vec![oh, ow, *filters]),
                    _ => bad(format!("kernel {kernel:?} does not fit input {input:?}")),
                }
            }
            LayerKind::ConvTranspose2D {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w, _) = spatial(input).map_err(err)?;
                check_window(*kernel, *stride).map_err(err)?;
                if *filters == 0 {
                    return bad("zero filters".into());
                }
                Ok(vec![
                    conv_transpose_out(h, kernel.0, stride.0, *padding),
                    conv_transpose_out(w, kernel.1, stride.1, *padding),
                    *filters,
                ])
            }
            LayerKind::MaxPool2D { pool } => {
                let (h, w, c) = spatial(input).map_err(err)?;
                if pool.0 == 0 || pool.1 == 0 || pool.0 > h || pool.1 > w {
                    return bad(format!("pool {pool:?} does not fit input {input:?}"));
                }
                Ok(vec![h / pool.0, w / pool.1, c])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Reshape { target } => {
                let want: usize = target.iter().product();
                let have: usize = input.iter().product();
                if want != have || target.contains(&0) {
                    return bad(format!("cannot reshape {input:?} into {target:?}"));
                }
                Ok(target.clone())
            }
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return bad(format!("rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Upsample2D { factor } => {
                let (h, w, c) = spatial(input).map_err(err)?;
                if factor.0 == 0 || factor.1 == 0 {
                    return bad("zero upsample factor".into());
                }
                Ok(vec![h * factor.0, w * factor.1, c])
            }
            LayerKind::BatchNorm { momentum, epsilon } => {
                if !(0.0..=1.0).contains(momentum) || *epsilon <= 0.0 {
                    return bad(format!("momentum {momentum}, epsilon {epsilon}"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Shapes of the trainable parameter tensors for a given input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        match &self.kind {
            LayerKind::Dense { units } => {
                let fan_in: usize = input.iter().product();
                vec![vec![*units, fan_in], vec![*units]]
            }
            LayerKind::Conv2D {
                filters, kernel, ..
            } => {
                let cin = input[2];
                vec![vec![kernel.0, kernel.1, cin, *filters], vec![*filters]]
            }
            LayerKind::ConvTranspose2D {
                filters, kernel, ..
            } => {
                let cin = input[2];
                vec![vec![cin, kernel.0, kernel.1, *filters], vec![*filters]]
            }
            LayerKind::BatchNorm { .. } => {
                let c = *input.last().unwrap_or(&1);
                vec![vec![c], vec![c]]
            }
            _ => Vec::new(),
        }
    }
}

fn spatial(input: &[usize]) -> std::result::Result<(usize, usize, usize), String> {
    match input {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(format!("expected H x W x C input, got {input:?}")),
    }
}

fn check_window(kernel: (usize, usize), stride: (usize, usize)) -> std::result::Result<(), String> {
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(format!("kernel {kernel:?} / stride {stride:?} must be positive"));
    }
    Ok(())
}

pub(crate) fn conv_out(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
        Padding::Same => Some(input.div_ceil(stride)),
    }
}

/// Leading zero padding of a convolution producing `output` from `input`.
pub(crate) fn conv_pad_before(input: usize, output: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => ((output - 1) * stride + kernel).saturating_sub(input) / 2,
    }
}

pub(crate) fn conv_transpose_out(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => (input - 1) * stride + kernel.max(stride),
        Padding::Same => input * stride,
    }
}

/// Offset subtracted from the uncropped transposed-convolution coordinate.
/// Mirrors `conv_pad_before` of the forward convolution it transposes.
pub(crate) fn conv_transpose_crop(input: usize, output: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => ((input - 1) * stride + kernel).saturating_sub(output) / 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_valid_and_pool_dims() {
        let conv = LayerSpec::conv2d(32, (3, 3), (1, 1), Padding::Valid, Activation::None);
        assert_eq!(conv.output_shape(&[28, 28, 1]).unwrap(), vec![26, 26, 32]);
        assert_eq!(conv.output_shape(&[32, 32, 3]).unwrap(), vec![30, 30, 32]);
        let pool = LayerSpec::max_pool((2, 2));
        assert_eq!(pool.output_shape(&[26, 26, 32]).unwrap(), vec![13, 13, 32]);
        assert_eq!(pool.output_shape(&[15, 15, 4]).unwrap(), vec![7, 7, 4]);
    }

    #[test]
    fn same_padding_splits_odd_pixel_to_the_end() {
        assert_eq!(conv_out(30, 5, 2, Padding::Same), Some(15));
        // (15 - 1) * 2 + 5 - 30 = 3 pixels of padding: one before, two after.
        assert_eq!(conv_pad_before(30, 15, 5, 2, Padding::Same), 1);
        assert_eq!(conv_pad_before(28, 28, 3, 1, Padding::Same), 1);
    }

    #[test]
    fn transpose_dims() {
        assert_eq!(conv_transpose_out(15, 5, 2, Padding::Same), 30);
        assert_eq!(conv_transpose_out(15, 5, 1, Padding::Same), 15);
        assert_eq!(conv_transpose_out(30, 5, 1, Padding::Valid), 34);
        assert_eq!(conv_transpose_crop(15, 30, 5, 2, Padding::Same), 1);
        assert_eq!(conv_transpose_crop(15, 15, 5, 1, Padding::Same), 2);
        assert_eq!(conv_transpose_crop(30, 34, 5, 1, Padding::Valid), 0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let conv = LayerSpec::conv2d(4, (5, 5), (1, 1), Padding::Valid, Activation::None);
        assert!(conv.output_shape(&[3, 3, 1]).is_err());
        assert!(conv.output_shape(&[9]).is_err());
        assert!(LayerSpec::dropout(1.0).output_shape(&[4]).is_err());
        assert!(LayerSpec::reshape(vec![3, 3]).output_shape(&[10]).is_err());
    }
}
