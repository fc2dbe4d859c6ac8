//! A small from-scratch neural network stack: sequential models over
//! `H x W x C` tensors with dense, convolutional, pooling, upsampling,
//! dropout and batch-norm layers.

pub mod arch;
pub mod codec;
pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod model;
pub(crate) mod ops;
pub mod optim;

pub use layer::{Activation, LayerKind, LayerSpec, Padding};
pub use loss::{loss, one_hot, LossKind};
pub use model::{ActivationTrace, Gradients, Model, ParamSet, Phase};
pub use optim::{sgd_step, train_batch, Adadelta, Optimizer};
