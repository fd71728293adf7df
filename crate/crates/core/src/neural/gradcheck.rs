//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss, LossKind, Mode, Model, Tensor};
use crate::error::Result;

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients
/// from inflating the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_param_error: f64,
    pub max_input_error: f64,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.max_param_error.max(self.max_input_error)
    }
}

/// Compares backprop against central differences of `L = Σ r ⊙ model(x)`
/// for a random projection `r`, over every parameter and input value.
/// Runs in eval mode (dropout is checked separately through its mask).
pub fn check_model(model: &Model, x: &Tensor, seed: u64) -> Result<GradCheck> {
    let y = model.infer(x.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |m: &Model, x: &Tensor| -> Result<f64> {
        let y = m.infer(x.clone())?;
        Ok(y.data().iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    let (_, tape) = model.forward(x.clone(), Mode::Eval)?;
    let (grads, dx) = model.backward(&tape, Tensor::new(y.shape().to_vec(), r.clone())?)?;

    let mut probe = model.clone();
    let mut max_param_error: f64 = 0.0;
    for i in 0..model.param_count() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + STEP;
        let up = objective(&probe, x)?;
        probe.params_mut()[i] = orig - STEP;
        let down = objective(&probe, x)?;
        probe.params_mut()[i] = orig;
        max_param_error = max_param_error.max(relative_error(grads[i], (up - down) / (2.0 * STEP)));
    }
    let mut xp = x.clone();
    let mut max_input_error: f64 = 0.0;
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + STEP;
        let up = objective(model, &xp)?;
        xp.data_mut()[i] = orig - STEP;
        let down = objective(model, &xp)?;
        xp.data_mut()[i] = orig;
        max_input_error = max_input_error.max(relative_error(dx.data()[i], (up - down) / (2.0 * STEP)));
    }
    Ok(GradCheck {
        max_param_error,
        max_input_error,
    })
}

/// Largest relative error of a loss gradient against central differences.
pub fn check_loss(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (_, grad) = loss(kind, pred, target)?;
    let mut p = pred.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + STEP;
        let up = loss(kind, &p, target)?.0;
        p.data_mut()[i] = orig - STEP;
        let down = loss(kind, &p, target)?.0;
        p.data_mut()[i] = orig;
        worst = worst.max(relative_error(grad.data()[i], (up - down) / (2.0 * STEP)));
    }
    Ok(worst)
}
