//! Plain SGD and Adadelta.

use super::loss::{loss, LossKind};
use super::model::{Gradients, Model, ParamSet, Phase};
use crate::error::{FidelError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `p <- p - lr * g` for every parameter.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
    if !model.params().is_congruent(grads) {
        return Err(FidelError::Shape("gradients do not match model".into()));
    }
    for (p, g) in model.params_mut().tensors_mut().zip(grads.tensors()) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Adadelta with a learning-rate multiplier on the update:
///
/// ```text
/// E[g^2]  <- rho E[g^2] + (1 - rho) g^2
/// delta    = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
/// E[dx^2] <- rho E[dx^2] + (1 - rho) delta^2
/// p       <- p + lr * delta
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta {
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    sq_grad: Option<ParamSet>,
    sq_update: Option<ParamSet>,
}

impl Adadelta {
    pub fn new(lr: f64, rho: f64, epsilon: f64) -> Self {
        Adadelta {
            lr,
            rho,
            epsilon,
            sq_grad: None,
            sq_update: None,
        }
    }

    /// Running average of squared gradients; `None` before the first step.
    pub fn sq_grad(&self) -> Option<&ParamSet> {
        self.sq_grad.as_ref()
    }

    pub fn sq_update(&self) -> Option<&ParamSet> {
        self.sq_update.as_ref()
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        if !model.params().is_congruent(grads) {
            return Err(FidelError::Shape("gradients do not match model".into()));
        }
        let sq_grad = self.sq_grad.get_or_insert_with(|| ParamSet::zeros_like(grads));
        let sq_update = self.sq_update.get_or_insert_with(|| ParamSet::zeros_like(grads));
        if !sq_grad.is_congruent(grads) {
            return Err(FidelError::Shape("optimizer state does not match gradients".into()));
        }
        let (rho, eps, lr) = (self.rho, self.epsilon, self.lr);
        let tensors = model
            .params_mut()
            .tensors_mut()
            .zip(grads.tensors())
            .zip(sq_grad.tensors_mut().zip(sq_update.tensors_mut()));
        for ((p, g), (eg, ex)) in tensors {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(eg.data_mut().iter_mut().zip(ex.data_mut().iter_mut()));
            for ((pv, &gv), (egv, exv)) in iter {
                *egv = rho * *egv + (1.0 - rho) * gv * gv;
                let delta = -((*exv + eps).sqrt() / (*egv + eps).sqrt()) * gv;
                *exv = rho * *exv + (1.0 - rho) * delta * delta;
                *pv += lr * delta;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adadelta(Adadelta),
}

impl Optimizer {
    pub fn step(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(model, grads, *lr),
            Optimizer::Adadelta(state) => state.step(model, grads),
        }
    }
}

/// One optimization step on a batch; returns the batch loss before the step.
pub fn train_batch(
    model: &mut Model,
    inputs: &Tensor,
    targets: &Tensor,
    loss_kind: LossKind,
    optimizer: &mut Optimizer,
    rng: &mut Rng,
) -> Result<f64> {
    let trace = model.forward(inputs, Phase::Training(rng))?;
    let value = loss(trace.output(), targets, loss_kind)?;
    if !value.is_finite() {
        return Err(FidelError::Numerical(format!("loss became {value}")));
    }
    let grads = model.backward(&trace, targets, loss_kind)?;
    optimizer.step(model, &grads)?;
    model.absorb_batch_statistics(&trace);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Activation, LayerSpec};

    fn scalar_model(p: f64) -> Model {
        let mut m = Model::new(&[1], vec![LayerSpec::dense(1, Activation::None)], 0).unwrap();
        m.params_mut().layers_mut()[0][0] = Tensor::new(vec![1, 1], vec![p]).unwrap();
        m
    }

    fn grads_of(m: &Model, g: f64) -> Gradients {
        let mut grads = ParamSet::zeros_like(m.params());
        grads.layers_mut()[0][0] = Tensor::new(vec![1, 1], vec![g]).unwrap();
        grads
    }

    #[test]
    fn sgd_single_step() {
        let mut m = scalar_model(1.0);
        let g = grads_of(&m, 2.0);
        sgd_step(&mut m, &g, 0.01).unwrap();
        assert_eq!(m.params().layer(0)[0].data()[0], 0.98);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut m = scalar_model(0.3);
        let before = m.clone();
        let g = ParamSet::zeros_like(m.params());
        sgd_step(&mut m, &g, 0.5).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adadelta_zero_gradient_leaves_everything_unchanged() {
        let mut m = scalar_model(0.3);
        let before = m.clone();
        let mut opt = Adadelta::new(0.001, 0.95, 1e-7);
        let zero = ParamSet::zeros_like(m.params());
        opt.step(&mut m, &zero).unwrap();
        assert_eq!(m, before);
        assert!(opt.sq_grad().unwrap().tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(opt.sq_update().unwrap().tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adadelta_first_step_matches_hand_calculation() {
        // E[g^2] = 0.05, delta = -sqrt(1e-7) / sqrt(0.05 + 1e-7) = -1.41421e-3
        let expected_delta = -(1e-7f64).sqrt() / (0.05f64 + 1e-7).sqrt();
        assert!((expected_delta + 1.4142e-3).abs() < 1e-7);
        let mut m = scalar_model(1.0);
        let mut opt = Adadelta::new(0.001, 0.95, 1e-7);
        let g = grads_of(&m, 1.0);
        opt.step(&mut m, &g).unwrap();
        let p = m.params().layer(0)[0].data()[0];
        assert!((p - (1.0 + 0.001 * expected_delta)).abs() < 1e-15);
        let ex = opt.sq_update().unwrap().layer(0)[0].data()[0];
        assert!((ex - 0.05 * expected_delta * expected_delta).abs() < 1e-20);
    }
}
