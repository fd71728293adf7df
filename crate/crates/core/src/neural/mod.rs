//! Sequential layer engine with explicit backward rules, losses and Adam.

mod adam;
mod gemm;
pub mod gradcheck;
mod layers;
mod loss;
mod tensor;

pub use adam::AdamState;
pub use layers::{Branch, LayerSpec};
pub use loss::{loss, LossKind, LOG_EPS};
pub use tensor::Tensor;

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor_file;
use layers::{backward_seq, forward_seq, Cache, Ctx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, driven by an RNG seeded with `seed`.
    Train { seed: u64 },
}

/// Activations cached by a forward pass for the matching backward pass.
#[derive(Default)]
pub struct Tape {
    caches: Vec<Cache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    specs: Vec<LayerSpec>,
    params: Vec<f64>,
}

impl Model {
    /// Builds the network with seeded uniform initialization.
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        for s in &specs {
            s.validate()?;
        }
        let mut params = vec![0.0; specs.iter().map(|s| s.param_count()).sum()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for s in &specs {
            let n = s.param_count();
            s.init(&mut params[off..off + n], &mut rng);
            off += n;
        }
        Ok(Self { specs, params })
    }

    pub fn from_params(specs: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        for s in &specs {
            s.validate()?;
        }
        let n: usize = specs.iter().map(|s| s.param_count()).sum();
        ensure!(params.len() == n, Dimension, "network needs {n} parameters, got {}", params.len());
        Ok(Self { specs, params })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Slice of the flat parameter vector owned by top-level layer `i`.
    pub fn layer_param_range(&self, i: usize) -> Range<usize> {
        let start: usize = self.specs[..i].iter().map(|s| s.param_count()).sum();
        start..start + self.specs[i].param_count()
    }

    pub fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        let mut ctx = match mode {
            Mode::Eval => Ctx {
                train: false,
                rng: ChaCha8Rng::seed_from_u64(0),
            },
            Mode::Train { seed } => Ctx {
                train: true,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        };
        let (y, caches) = forward_seq(&self.specs, &self.params, x, &mut ctx)?;
        Ok((y, Tape { caches }))
    }

    pub fn infer(&self, x: Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    /// Parameter gradients and input gradient for upstream gradient `dy`.
    pub fn backward(&self, tape: &Tape, dy: Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut grads = vec![0.0; self.params.len()];
        let dx = backward_seq(&self.specs, &self.params, &tape.caches, dy, &mut grads)?;
        Ok((grads, dx))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    specs: Vec<LayerSpec>,
    /// Parameter count of each top-level layer, in order.
    shapes: Vec<usize>,
    seed: u64,
    step: u64,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

/// A saved network with its training position.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub step: u64,
    pub optimizer: Option<AdamState>,
    /// Free-form description written by the trainer.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Flat binary: parameters, then Adam first and second moments if present.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            specs: self.model.specs.clone(),
            shapes: self.model.specs.iter().map(|s| s.param_count()).collect(),
            seed: self.seed,
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            }),
            meta: self.meta.clone(),
        };
        let mut payload = self.model.params.clone();
        if let Some(a) = &self.optimizer {
            payload.extend_from_slice(&a.m);
            payload.extend_from_slice(&a.v);
        }
        tensor_file::write(path, &header, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (h, mut payload): (CheckpointHeader, Vec<f64>) = tensor_file::read(path)?;
        let n: usize = h.shapes.iter().sum();
        let expected = if h.optimizer.is_some() { 3 * n } else { n };
        if payload.len() != expected || h.specs.iter().map(|s| s.param_count()).collect::<Vec<_>>() != h.shapes {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("checkpoint payload of {} values does not match its header", payload.len()),
            });
        }
        let optimizer = h.optimizer.map(|o| {
            let v = payload.split_off(2 * n);
            let m = payload.split_off(n);
            AdamState {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
                m,
                v,
            }
        });
        Ok(Self {
            model: Model::from_params(h.specs, payload)?,
            seed: h.seed,
            step: h.step,
            optimizer,
            meta: h.meta,
        })
    }
}
