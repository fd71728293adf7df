//! CSIPD, magnitude and beamformed features, and remainder-mask
//! multiplication of feature planes.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamforming::delay_and_sum;
pub use crate::dsp::Mask;
use crate::dsp::Spectrogram;
use crate::error::{ensure, Result};
use crate::geometry::ArrayGeometry;
use crate::tensor_file;

/// Real feature planes indexed `(plane, frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    values: Vec<f64>,
    labels: Vec<String>,
    frame_count: usize,
    bin_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpHeader {
    planes: usize,
    frames: usize,
    bins: usize,
    labels: Vec<String>,
}

impl FeatureStack {
    pub fn empty(frame_count: usize, bin_count: usize) -> Self {
        Self {
            values: Vec::new(),
            labels: Vec::new(),
            frame_count,
            bin_count,
        }
    }

    pub fn plane_count(&self) -> usize {
        self.labels.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.frame_count * self.bin_count;
        &self.values[p * n..(p + 1) * n]
    }

    pub fn plane_by_label(&self, label: &str) -> Option<&[f64]> {
        self.labels.iter().position(|l| l == label).map(|p| self.plane(p))
    }

    pub fn push_plane(&mut self, label: impl Into<String>, plane: Vec<f64>) -> Result<()> {
        ensure!(
            plane.len() == self.frame_count * self.bin_count,
            Dimension,
            "plane has {} values, expected {}x{}",
            plane.len(),
            self.frame_count,
            self.bin_count
        );
        self.labels.push(label.into());
        self.values.extend(plane);
        Ok(())
    }

    /// Appends all planes of `other`.
    pub fn extend(&mut self, other: FeatureStack) -> Result<()> {
        ensure!(
            (other.frame_count, other.bin_count) == (self.frame_count, self.bin_count),
            Dimension,
            "cannot stack {}x{} planes onto {}x{}",
            other.frame_count,
            other.bin_count,
            self.frame_count,
            self.bin_count
        );
        self.labels.extend(other.labels);
        self.values.extend(other.values);
        Ok(())
    }

    /// `log(1 + v)` applied to every plane whose label starts with `prefix`.
    pub fn log_compress(mut self, prefix: &str) -> Self {
        let n = self.frame_count * self.bin_count;
        for (p, label) in self.labels.iter().enumerate() {
            if label.starts_with(prefix) {
                self.values[p * n..(p + 1) * n].iter_mut().for_each(|v| *v = v.ln_1p());
            }
        }
        self
    }

    /// Debug dump: flat binary tensor with a `{planes, frames, bins, labels}` header.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = DumpHeader {
            planes: self.plane_count(),
            frames: self.frame_count,
            bins: self.bin_count,
            labels: self.labels.clone(),
        };
        tensor_file::write(path, &header, &self.values)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (h, values): (DumpHeader, _) = tensor_file::read(path)?;
        ensure!(
            values.len() == h.planes * h.frames * h.bins && h.labels.len() == h.planes,
            Dimension,
            "feature dump {path:?} is inconsistent with its header"
        );
        Ok(Self {
            values,
            labels: h.labels,
            frame_count: h.frames,
            bin_count: h.bins,
        })
    }
}

/// Microphone pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn mic_pairs(channels: usize) -> Vec<(usize, usize)> {
    (0..channels)
        .flat_map(|i| (i + 1..channels).map(move |j| (i, j)))
        .collect()
}

/// `(cos, sin)` of the phase of `a * conj(b)`; `(1, 0)` when either is zero.
#[inline]
fn phase_diff(a: Complex64, b: Complex64) -> (f64, f64) {
    let z = a * b.conj();
    let m = z.norm();
    if m > 0.0 && m.is_finite() {
        (z.re / m, z.im / m)
    } else {
        (1.0, 0.0)
    }
}

/// Cosine and sine of the inter-channel phase difference `angle(X_i) - angle(X_j)`
/// for every microphone pair: `2 * C(I, 2)` planes, `cos` then `sin` per pair.
pub fn csipd(spec: &Spectrogram) -> Result<FeatureStack> {
    let channels = spec.channel_count();
    ensure!(channels >= 2, Dimension, "CSIPD needs at least two channels, got {channels}");
    let (frames, bins) = (spec.frame_count(), spec.bin_count());
    let mut out = FeatureStack::empty(frames, bins);
    for (i, j) in mic_pairs(channels) {
        let (mut cos, mut sin) = (Vec::with_capacity(frames * bins), Vec::with_capacity(frames * bins));
        for (a, b) in spec.channel(i).iter().zip(spec.channel(j)) {
            let (c, s) = phase_diff(*a, *b);
            cos.push(c);
            sin.push(s);
        }
        out.push_plane(format!("csipd_cos_{}_{}", i + 1, j + 1), cos)?;
        out.push_plane(format!("csipd_sin_{}_{}", i + 1, j + 1), sin)?;
    }
    Ok(out)
}

/// Linear magnitude of one channel as a single plane.
pub fn magnitude(spec: &Spectrogram, channel: usize) -> Result<FeatureStack> {
    ensure!(
        channel < spec.channel_count(),
        Dimension,
        "channel {channel} out of range for {} channels",
        spec.channel_count()
    );
    let mut out = FeatureStack::empty(spec.frame_count(), spec.bin_count());
    out.push_plane(
        format!("magnitude_{}", channel + 1),
        spec.channel(channel).iter().map(|v| v.norm()).collect(),
    )?;
    Ok(out)
}

/// Delay-and-sum output toward `doa_deg`: its magnitude plus the cos/sin of
/// its phase relative to channel 1.
pub fn beamformed_features(spec: &Spectrogram, doa_deg: f64, geometry: &ArrayGeometry) -> Result<FeatureStack> {
    let y = delay_and_sum(spec, doa_deg, geometry)?;
    let (frames, bins) = (spec.frame_count(), spec.bin_count());
    let mut mag = Vec::with_capacity(frames * bins);
    let mut cos = Vec::with_capacity(frames * bins);
    let mut sin = Vec::with_capacity(frames * bins);
    for (yv, x1) in y.data().iter().zip(spec.channel(0)) {
        mag.push(yv.norm());
        let (c, s) = phase_diff(*yv, *x1);
        cos.push(c);
        sin.push(s);
    }
    let mut out = FeatureStack::empty(frames, bins);
    out.push_plane("magnitude_ds", mag)?;
    out.push_plane("csipd_ds_cos", cos)?;
    out.push_plane("csipd_ds_sin", sin)?;
    Ok(out)
}

/// Multiplies every plane elementwise by `mask`.
pub fn mask_features(stack: &FeatureStack, mask: &Mask) -> Result<FeatureStack> {
    ensure!(
        mask.shape() == (stack.frame_count, stack.bin_count),
        Dimension,
        "mask {:?} does not match feature planes ({}, {})",
        mask.shape(),
        stack.frame_count,
        stack.bin_count
    );
    let n = stack.frame_count * stack.bin_count;
    let m = mask.values();
    let values = stack
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| v * m[k % n])
        .collect();
    Ok(FeatureStack {
        values,
        labels: stack.labels.clone(),
        frame_count: stack.frame_count,
        bin_count: stack.bin_count,
    })
}
