use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Clamp applied to probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Element-wise binary cross entropy, averaged over elements.
    Bce,
    /// `-Σ_k y_k ln p_k` per row (last axis), averaged over rows.
    Ce,
    /// Squared error averaged over elements.
    Mse,
}

/// Mean loss and its gradient with respect to `pred`.
pub fn loss(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    ensure!(
        pred.shape() == target.shape(),
        Dimension,
        "prediction {:?} and target {:?} differ in shape",
        pred.shape(),
        target.shape()
    );
    let n = pred.len().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    let mut total = 0.0;
    match kind {
        LossKind::Bce => {
            for ((g, &p), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
                let pc = p.clamp(LOG_EPS, 1.0 - LOG_EPS);
                total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
                *g = (pc - y) / (pc * (1.0 - pc)) / n;
            }
        }
        LossKind::Ce => {
            let width = *pred.shape().last().expect("non-empty shape");
            let rows = (pred.len() / width.max(1)).max(1) as f64;
            for ((g, &p), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
                let pc = p.max(LOG_EPS);
                total -= y * pc.ln();
                *g = -y / pc / rows;
            }
            return Ok((total / rows, grad));
        }
        LossKind::Mse => {
            for ((g, &p), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
                total += (p - y) * (p - y);
                *g = 2.0 * (p - y) / n;
            }
        }
    }
    Ok((total / n, grad))
}
