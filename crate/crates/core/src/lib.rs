//! Federated-learning sample reconstruction from first-dense-layer updates.
//!
//! A neuron `i` of a dense layer computes `A(W_i . a + b_i)`. After one
//! gradient step on a single sample its weight change is proportional to the
//! layer input `a` and its bias change carries the same factor, so
//! `delta_W_i / delta_b_i == a`. The crate simulates federated clients,
//! extracts these per-neuron partial reconstructions from model updates,
//! inverts convolutional features with a trained generator, and measures
//! how many private samples an update reveals.
//!
//! Modules:
//! - [`nn`]: tensors, layers, backpropagation, SGD / Adadelta, model files
//! - [`data`]: MNIST / CIFAR-10 loaders and PGM/PPM output
//! - [`fed`]: client training, update extraction, FedAvg aggregation
//! - [`attack`]: partial reconstruction from updates
//! - [`genrec`]: generator-based inversion of convolutional features
//! - [`eval`]: Pearson correlation, reveal counting, sweeps

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fed;
pub mod genrec;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{FidelError, Result};
pub use tensor::Tensor;
