//! The four networks of the deflation pipeline, their input assembly, and
//! sequential training.

mod train;

pub use train::{train_sequence, train_stage, FitReport, TrainConfig};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{Mask, Spectrogram};
use crate::error::{ensure, Error, Result};
use crate::features::{beamformed_features, csipd, magnitude, mask_features};
use crate::geometry::ArrayGeometry;
use crate::localization::DoaPosterior;
use crate::neural::{Branch, Checkpoint, LayerSpec, Model, Tensor};

pub const DOA_CLASSES: usize = 182;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoaOutput {
    /// Independent per-class probabilities (multi-speaker targets).
    Sigmoid,
    /// One distribution per frame (single-speaker targets).
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoaNetConfig {
    pub csipd_planes: usize,
    pub bins: usize,
    pub kernel: usize,
    pub pool: usize,
    pub dropout: f64,
    pub hidden: usize,
    pub output: DoaOutput,
}

impl Default for DoaNetConfig {
    fn default() -> Self {
        Self {
            csipd_planes: 12,
            bins: 801,
            kernel: 5,
            pool: 2,
            dropout: 0.3,
            hidden: 32,
            output: DoaOutput::Sigmoid,
        }
    }
}

impl DoaNetConfig {
    /// Phase branch (all CSIPD planes) and magnitude branch, each reduced to
    /// one plane, pooled along frequency and concatenated per frame.
    pub fn specs(&self) -> Vec<LayerSpec> {
        let branch = |planes: [usize; 2]| Branch {
            planes,
            layers: vec![
                LayerSpec::Conv2d {
                    in_planes: planes[1] - planes[0],
                    out_planes: 1,
                    kernel_h: self.kernel,
                    kernel_w: self.kernel,
                },
                LayerSpec::Relu,
                LayerSpec::Dropout { p: self.dropout },
                LayerSpec::MaxPoolFreq { k: self.pool },
                LayerSpec::Flatten,
            ],
        };
        let c = self.csipd_planes;
        let pooled = self.bins / self.pool;
        vec![
            LayerSpec::Concat {
                branches: vec![branch([0, c]), branch([c, c + 1])],
            },
            LayerSpec::BiLstm {
                input: 2 * pooled,
                hidden: self.hidden,
            },
            LayerSpec::Linear {
                input: 2 * self.hidden,
                output: DOA_CLASSES,
            },
            match self.output {
                DoaOutput::Sigmoid => LayerSpec::Sigmoid,
                DoaOutput::Softmax => LayerSpec::Softmax,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskNetConfig {
    pub bins: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for MaskNetConfig {
    fn default() -> Self {
        Self {
            bins: 801,
            hidden: 32,
            layers: 2,
        }
    }
}

impl MaskNetConfig {
    /// Input width per frame: beamformed magnitude, two phase planes, posterior.
    pub fn input_width(&self) -> usize {
        3 * self.bins + DOA_CLASSES
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = self.input_width();
        for _ in 0..self.layers.max(1) {
            specs.push(LayerSpec::BiLstm {
                input: width,
                hidden: self.hidden,
            });
            width = 2 * self.hidden;
        }
        specs.push(LayerSpec::Linear {
            input: width,
            output: self.bins,
        });
        specs.push(LayerSpec::Sigmoid);
        specs
    }
}

/// `[2·C(I,2) + 1, frames, bins]`: CSIPD planes and `log(1+|X_1|)`,
/// optionally multiplied by a remainder mask.
pub fn doa_input(spec: &Spectrogram, remainder: Option<&Mask>) -> Result<Tensor> {
    let mut stack = csipd(spec)?;
    stack.extend(magnitude(spec, 0)?.log_compress("magnitude"))?;
    if let Some(r) = remainder {
        stack = mask_features(&stack, r)?;
    }
    let shape = vec![stack.plane_count(), stack.frame_count(), stack.bin_count()];
    Tensor::new(shape, stack.into_values())
}

/// `[frames, 3·bins + 182]`: delay-and-sum features toward `doa_deg`
/// (`log(1+|Y|)`, cos, sin; optionally masked) followed by the frame's posterior.
pub fn mask_input(
    spec: &Spectrogram,
    doa_deg: f64,
    geometry: &ArrayGeometry,
    posterior: &DoaPosterior,
    remainder: Option<&Mask>,
) -> Result<Tensor> {
    let mut bf = beamformed_features(spec, doa_deg, geometry)?.log_compress("magnitude");
    if let Some(r) = remainder {
        bf = mask_features(&bf, r)?;
    }
    let (frames, bins) = (bf.frame_count(), bf.bin_count());
    ensure!(
        posterior.frame_count() == frames,
        Dimension,
        "posterior has {} frames, features {frames}",
        posterior.frame_count()
    );
    let k = posterior.class_count();
    let width = 3 * bins + k;
    let mut data = vec![0.0; frames * width];
    for p in 0..3 {
        let plane = bf.plane(p);
        for t in 0..frames {
            data[t * width + p * bins..t * width + (p + 1) * bins].copy_from_slice(&plane[t * bins..(t + 1) * bins]);
        }
    }
    for t in 0..frames {
        data[t * width + 3 * bins..(t + 1) * width].copy_from_slice(posterior.frame(t));
    }
    Tensor::new(vec![frames, width], data)
}

pub fn output_posterior(y: Tensor) -> Result<DoaPosterior> {
    ensure!(
        y.shape().len() == 2 && y.shape()[1] == DOA_CLASSES,
        Dimension,
        "DOA network output {:?} is not [frames, {DOA_CLASSES}]",
        y.shape()
    );
    let frames = y.shape()[0];
    DoaPosterior::new(y.into_data(), frames, DOA_CLASSES)
}

pub fn output_mask(y: Tensor) -> Result<Mask> {
    ensure!(y.shape().len() == 2, Dimension, "mask network output {:?} is not 2-D", y.shape());
    let (frames, bins) = (y.shape()[0], y.shape()[1]);
    Mask::new(y.into_data(), frames, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Doa1,
    Mask1,
    Doa2,
    Mask2,
}

impl Stage {
    pub const ORDER: [Stage; 4] = [Stage::Doa1, Stage::Mask1, Stage::Doa2, Stage::Mask2];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Doa1 => "doa1",
            Stage::Mask1 => "mask1",
            Stage::Doa2 => "doa2",
            Stage::Mask2 => "mask2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.ckpt", self.name()))
    }

    /// Training state (optimizer moments, epoch counters) for resuming.
    pub fn resume_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.last.ckpt", self.name()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// The four trained networks.
#[derive(Debug, Clone)]
pub struct Networks {
    pub doa1: Model,
    pub mask1: Model,
    pub doa2: Model,
    pub mask2: Model,
}

impl Networks {
    pub fn load(dir: &Path) -> Result<Self> {
        let load = |s: Stage| -> Result<Model> {
            let p = s.checkpoint_path(dir);
            if !p.exists() {
                return Err(Error::Config(format!("missing {s} checkpoint {p:?}")));
            }
            Ok(Checkpoint::load(&p)?.model)
        };
        Ok(Self {
            doa1: load(Stage::Doa1)?,
            mask1: load(Stage::Mask1)?,
            doa2: load(Stage::Doa2)?,
            mask2: load(Stage::Mask2)?,
        })
    }
}
