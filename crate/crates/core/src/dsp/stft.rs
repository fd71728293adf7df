use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Mask, MultichannelWave, Spectrogram};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    /// Periodic Hann.
    #[default]
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

/// Frame geometry of the short-time Fourier transform, in samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    #[serde(default)]
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::paper_profile()
    }
}

impl StftConfig {
    /// 16 kHz, 50 ms periodic-Hann frames with 25 ms shift, zero-padded to a
    /// 1600-point FFT: 801 bins.
    pub fn paper_profile() -> Self {
        Self::from_ms(16_000, 50.0, 25.0, 1600, WindowKind::Hann)
    }

    pub fn from_ms(sample_rate: u32, window_ms: f64, hop_ms: f64, fft_len: usize, window: WindowKind) -> Self {
        let to_samples = |ms: f64| (ms * sample_rate as f64 / 1000.0).round() as usize;
        Self {
            sample_rate,
            window_len: to_samples(window_ms),
            hop: to_samples(hop_ms),
            fft_len,
            window,
        }
    }

    pub fn bin_count(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn bin_freq_hz(&self, f: usize) -> f64 {
        f as f64 * self.sample_rate as f64 / self.fft_len as f64
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        let padded = len + 2 * self.pad();
        if padded <= self.window_len {
            1
        } else {
            1 + (padded - self.window_len).div_ceil(self.hop)
        }
    }

    fn pad(&self) -> usize {
        self.window_len / 2
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.sample_rate > 0, Config, "sample rate must be positive");
        ensure!(self.hop > 0, Config, "hop must be positive");
        ensure!(
            self.hop <= self.window_len && self.window_len <= self.fft_len,
            Config,
            "need hop <= window_len <= fft_len, got {} / {} / {}",
            self.hop,
            self.window_len,
            self.fft_len
        );
        ensure!(self.fft_len % 2 == 0, Config, "fft_len must be even");
        // Overlap-add of the squared window must never vanish, otherwise istft
        // cannot normalize.
        let w = self.window.coefficients(self.window_len);
        let min_overlap = (0..self.hop)
            .map(|n| {
                (n..self.window_len)
                    .step_by(self.hop)
                    .map(|k| w[k] * w[k])
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        ensure!(
            min_overlap > 1e-8,
            Config,
            "window/hop combination is not invertible"
        );
        Ok(())
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Per-channel STFT. The signal is zero-padded by `window_len / 2` on both
/// ends so that frame `t` is centered at sample `t * hop`.
pub fn stft(wave: &MultichannelWave, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    ensure!(
        wave.sample_rate() == cfg.sample_rate,
        Config,
        "wave sample rate {} does not match STFT config {}",
        wave.sample_rate(),
        cfg.sample_rate
    );
    let len = wave.len();
    let frames = cfg.frame_count(len);
    let bins = cfg.bin_count();
    let pad = cfg.pad();
    let window = cfg.window.coefficients(cfg.window_len);
    let fft = plans(cfg.fft_len).forward;
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];

    let mut out = Spectrogram::zeros(wave.channel_count(), frames, cfg.clone(), len);
    for c in 0..wave.channel_count() {
        let x = wave.channel(c);
        for t in 0..frames {
            buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            let start = (t * cfg.hop) as isize - pad as isize;
            for (n, w) in window.iter().enumerate() {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < len {
                    buf[n] = Complex64::new(x[idx as usize] * w, 0.0);
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            out.frame_mut(c, t).copy_from_slice(&buf[..bins]);
        }
    }
    Ok(out)
}

/// Weighted overlap-add inverse of [`stft`], trimmed back to the original length.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<MultichannelWave> {
    cfg.validate()?;
    ensure!(
        spec.config() == cfg,
        Config,
        "spectrogram geometry {:?} does not match config {:?}",
        spec.config(),
        cfg
    );
    let len = spec.signal_len();
    let frames = spec.frame_count();
    let bins = spec.bin_count();
    let pad = cfg.pad();
    let n_fft = cfg.fft_len;
    let window = cfg.window.coefficients(cfg.window_len);
    let padded_len = (frames - 1) * cfg.hop + cfg.window_len;

    let mut norm = vec![0.0; padded_len];
    for t in 0..frames {
        for (n, w) in window.iter().enumerate() {
            norm[t * cfg.hop + n] += w * w;
        }
    }

    let ifft = plans(n_fft).inverse;
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut channels = Vec::with_capacity(spec.channel_count());
    for c in 0..spec.channel_count() {
        let mut acc = vec![0.0; padded_len];
        for t in 0..frames {
            let frame = spec.frame(c, t);
            buf[..bins].copy_from_slice(frame);
            for k in bins..n_fft {
                buf[k] = frame[n_fft - k].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let base = t * cfg.hop;
            for (n, w) in window.iter().enumerate() {
                acc[base + n] += buf[n].re / n_fft as f64 * w;
            }
        }
        let samples = (0..len)
            .map(|i| {
                let j = i + pad;
                if j < padded_len && norm[j] > 1e-12 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect();
        channels.push(samples);
    }
    MultichannelWave::new(channels, cfg.sample_rate)
}

/// `out(c, t, f) = mask(t, f) * spec(c, t, f)` for every channel.
pub fn apply_mask(spec: &Spectrogram, mask: &Mask) -> Result<Spectrogram> {
    if mask.shape() != (spec.frame_count(), spec.bin_count()) {
        return Err(Error::Dimension(format!(
            "mask {:?} does not match spectrogram ({}, {})",
            mask.shape(),
            spec.frame_count(),
            spec.bin_count()
        )));
    }
    let mut out = spec.clone();
    let per_channel = spec.frame_count() * spec.bin_count();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= mask.values()[i % per_channel];
    }
    Ok(out)
}

/// Time-domain energy of one analysis frame recovered from its one-sided
/// spectrum (Parseval), for an even `fft_len`.
pub fn spectral_frame_energy(bins: &[Complex64], fft_len: usize) -> f64 {
    let half = fft_len / 2;
    debug_assert_eq!(bins.len(), half + 1);
    let edge = bins[0].norm_sqr() + bins[half].norm_sqr();
    let inner: f64 = bins[1..half].iter().map(|b| b.norm_sqr()).sum();
    (edge + 2.0 * inner) / fft_len as f64
}
