//! Loss functions, averaged over the batch.

use crate::error::{FidelError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean of squared errors over every element of the batch.
    MeanSquaredError,
    /// `-(1/N) sum_n log p_n[true class]` with one-hot targets.
    CategoricalCrossEntropy,
}

pub fn loss(output: &Tensor, target: &Tensor, kind: LossKind) -> Result<f64> {
    check_shapes(output, target)?;
    match kind {
        LossKind::MeanSquaredError => {
            let sum: f64 = output
                .data()
                .iter()
                .zip(target.data())
                .map(|(o, t)| (o - t) * (o - t))
                .sum();
            Ok(sum / output.len() as f64)
        }
        LossKind::CategoricalCrossEntropy => {
            let n = output.batch_len();
            let mut total = 0.0;
            for i in 0..n {
                let class = one_hot_class(target.row(i))
                    .ok_or_else(|| FidelError::InvalidTarget(format!("row {i} is not one-hot")))?;
                let p = output.row(i)[class];
                if p <= 0.0 || !p.is_finite() {
                    return Err(FidelError::Numerical(format!(
                        "cross-entropy needs a positive probability, row {i} has {p}"
                    )));
                }
                total -= p.ln();
            }
            Ok(total / n as f64)
        }
    }
}

/// Gradient of [`loss`] with respect to `output`.
pub(crate) fn loss_gradient(output: &Tensor, target: &Tensor, kind: LossKind) -> Result<Tensor> {
    check_shapes(output, target)?;
    match kind {
        LossKind::MeanSquaredError => {
            let scale = 2.0 / output.len() as f64;
            output.zip_map(target, |o, t| scale * (o - t))
        }
        LossKind::CategoricalCrossEntropy => {
            let n = output.batch_len();
            for i in 0..n {
                if one_hot_class(target.row(i)).is_none() {
                    return Err(FidelError::InvalidTarget(format!("row {i} is not one-hot")));
                }
            }
            output.zip_map(target, |o, t| if t == 0.0 { 0.0 } else { -t / (o * n as f64) })
        }
    }
}

fn check_shapes(output: &Tensor, target: &Tensor) -> Result<()> {
    if output.shape() != target.shape() {
        return Err(FidelError::Shape(format!(
            "loss on output {:?} and target {:?}",
            output.shape(),
            target.shape()
        )));
    }
    Ok(())
}

fn one_hot_class(row: &[f64]) -> Option<usize> {
    let mut class = None;
    for (i, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if class.is_some() {
                return None;
            }
            class = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    class
}

/// Batch of one-hot rows for class labels.
pub fn one_hot(labels: &[u8], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn mse_zero_on_equal() {
        let a = t(&[1, 2], &[1.0, 0.0]);
        assert_eq!(loss(&a, &a, LossKind::MeanSquaredError).unwrap(), 0.0);
    }

    #[test]
    fn cce_zero_on_certain_true_class() {
        let out = t(&[1, 3], &[0.0, 1.0, 0.0]);
        assert_eq!(loss(&out, &out, LossKind::CategoricalCrossEntropy).unwrap(), 0.0);
    }

    #[test]
    fn cce_uniform_is_ln_classes() {
        let out = Tensor::filled(&[1, 10], 0.1);
        let target = one_hot(&[7], 10);
        let l = loss(&out, &target, LossKind::CategoricalCrossEntropy).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn cce_rejects_non_one_hot() {
        let out = Tensor::filled(&[1, 2], 0.5);
        let soft = t(&[1, 2], &[0.5, 0.5]);
        assert!(matches!(
            loss(&out, &soft, LossKind::CategoricalCrossEntropy),
            Err(FidelError::InvalidTarget(_))
        ));
        let two = t(&[1, 2], &[1.0, 1.0]);
        assert!(loss(&out, &two, LossKind::CategoricalCrossEntropy).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(&[1, 2]);
        let b = Tensor::zeros(&[1, 3]);
        assert!(loss(&a, &b, LossKind::MeanSquaredError).is_err());
    }
}
