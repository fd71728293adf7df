//! Buffer types and time/frequency conversion shared by every other module.

mod conv;
mod stft;
mod wav;

pub use conv::fft_convolve;
pub use stft::{apply_mask, istft, stft, spectral_frame_energy, StftConfig, WindowKind};
pub use wav::{read_wav, write_wav, SampleFormat};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// An `I`-channel time-domain buffer. All channels have the same length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultichannelWave {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl MultichannelWave {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        ensure!(!channels.is_empty(), Validation, "wave needs at least one channel");
        ensure!(sample_rate > 0, Validation, "sample rate must be positive");
        let len = channels[0].len();
        ensure!(
            channels.iter().all(|c| c.len() == len),
            Dimension,
            "channels have unequal lengths"
        );
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn zeros(channel_count: usize, len: usize, sample_rate: u32) -> Self {
        assert!(channel_count > 0 && sample_rate > 0);
        Self {
            channels: vec![vec![0.0; len]; channel_count],
            sample_rate,
        }
    }

    pub fn from_mono(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        Self {
            channels: vec![samples],
            sample_rate,
        }
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Mono wave holding channel `i`.
    pub fn select_channel(&self, i: usize) -> MultichannelWave {
        MultichannelWave::from_mono(self.channels[i].clone(), self.sample_rate)
    }

    /// Zero-pads (or truncates) every channel to `len` samples.
    pub fn resized(mut self, len: usize) -> Self {
        for c in &mut self.channels {
            c.resize(len, 0.0);
        }
        self
    }

    pub fn scale(&mut self, gain: f64) {
        for c in &mut self.channels {
            c.iter_mut().for_each(|x| *x *= gain);
        }
    }

    /// Adds `other` sample-wise. Both waves must share geometry.
    pub fn add_assign(&mut self, other: &MultichannelWave) -> Result<()> {
        ensure!(
            self.channel_count() == other.channel_count() && self.len() == other.len(),
            Dimension,
            "cannot add {}x{} wave to {}x{} wave",
            other.channel_count(),
            other.len(),
            self.channel_count(),
            self.len()
        );
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn energy(&self, channel: usize) -> f64 {
        self.channels[channel].iter().map(|x| x * x).sum()
    }
}

/// Complex time-frequency tensor indexed `(channel, frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    channel_count: usize,
    frame_count: usize,
    bin_count: usize,
    config: StftConfig,
    signal_len: usize,
}

impl Spectrogram {
    pub fn zeros(channel_count: usize, frame_count: usize, config: StftConfig, signal_len: usize) -> Self {
        let bin_count = config.bin_count();
        Self {
            data: vec![Complex64::new(0.0, 0.0); channel_count * frame_count * bin_count],
            channel_count,
            frame_count,
            bin_count,
            config,
            signal_len,
        }
    }

    /// Builds a spectrogram from raw `(channel, frame, bin)`-ordered data.
    pub fn from_raw(
        data: Vec<Complex64>,
        channel_count: usize,
        frame_count: usize,
        config: StftConfig,
        signal_len: usize,
    ) -> Result<Self> {
        let bin_count = config.bin_count();
        ensure!(
            data.len() == channel_count * frame_count * bin_count,
            Dimension,
            "raw data length {} does not match {}x{}x{}",
            data.len(),
            channel_count,
            frame_count,
            bin_count
        );
        Ok(Self {
            data,
            channel_count,
            frame_count,
            bin_count,
            config,
            signal_len,
        })
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// Length in samples of the time-domain signal this spectrogram came from.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    #[inline]
    fn offset(&self, c: usize, t: usize, f: usize) -> usize {
        (c * self.frame_count + t) * self.bin_count + f
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, f: usize) -> Complex64 {
        self.data[self.offset(c, t, f)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, f: usize, v: Complex64) {
        let o = self.offset(c, t, f);
        self.data[o] = v;
    }

    pub fn frame(&self, c: usize, t: usize) -> &[Complex64] {
        let o = self.offset(c, t, 0);
        &self.data[o..o + self.bin_count]
    }

    pub fn frame_mut(&mut self, c: usize, t: usize) -> &mut [Complex64] {
        let o = self.offset(c, t, 0);
        let n = self.bin_count;
        &mut self.data[o..o + n]
    }

    /// All frames of channel `c`, frame-major.
    pub fn channel(&self, c: usize) -> &[Complex64] {
        let n = self.frame_count * self.bin_count;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Center frequency of bin `f` in Hz.
    pub fn bin_freq_hz(&self, f: usize) -> f64 {
        self.config.bin_freq_hz(f)
    }

    /// The single-channel spectrogram holding channel `c`.
    pub fn select_channel(&self, c: usize) -> Spectrogram {
        Spectrogram {
            data: self.channel(c).to_vec(),
            channel_count: 1,
            frame_count: self.frame_count,
            bin_count: self.bin_count,
            config: self.config.clone(),
            signal_len: self.signal_len,
        }
    }
}

/// Real time-frequency weighting indexed `(frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Vec<f64>,
    frame_count: usize,
    bin_count: usize,
}

impl Mask {
    pub fn new(values: Vec<f64>, frame_count: usize, bin_count: usize) -> Result<Self> {
        ensure!(
            values.len() == frame_count * bin_count,
            Dimension,
            "mask has {} values, expected {}x{}",
            values.len(),
            frame_count,
            bin_count
        );
        Ok(Self {
            values,
            frame_count,
            bin_count,
        })
    }

    pub fn filled(frame_count: usize, bin_count: usize, value: f64) -> Self {
        Self {
            values: vec![value; frame_count * bin_count],
            frame_count,
            bin_count,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frame_count, self.bin_count)
    }

    #[inline]
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.bin_count + f]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bin_count..(t + 1) * self.bin_count]
    }

    /// `1 - self`, the remainder mask.
    pub fn complement(&self) -> Mask {
        self.map(|v| 1.0 - v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mask {
        Mask {
            values: self.values.iter().map(|&v| f(v)).collect(),
            frame_count: self.frame_count,
            bin_count: self.bin_count,
        }
    }

    /// Elementwise combination of two equally shaped masks.
    pub fn zip_with(&self, other: &Mask, f: impl Fn(f64, f64) -> f64) -> Result<Mask> {
        ensure!(
            self.shape() == other.shape(),
            Dimension,
            "mask shapes {:?} and {:?} differ",
            self.shape(),
            other.shape()
        );
        Ok(Mask {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            frame_count: self.frame_count,
            bin_count: self.bin_count,
        })
    }

    /// Copy with every value clamped to `[0, 1]`, plus the number of values that moved.
    pub fn clamped(&self) -> (Mask, usize) {
        let moved = self
            .values
            .iter()
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count();
        (self.map(|v| v.clamp(0.0, 1.0)), moved)
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mse(&self, other: &Mask) -> Result<f64> {
        ensure!(
            self.shape() == other.shape(),
            Dimension,
            "mask shapes {:?} and {:?} differ",
            self.shape(),
            other.shape()
        );
        let n = self.values.len().max(1) as f64;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}
