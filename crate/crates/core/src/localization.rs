//! DOA grid, far-field steering, GCC-PHAT and posterior pooling.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::dsp::{Mask, Spectrogram};
use crate::error::{ensure, Error, Result};
use crate::geometry::{direction, dot, ArrayGeometry, SPEED_OF_SOUND};

/// Index of the non-speech class in the standard grid.
pub const NON_SPEECH: usize = 181;

/// Candidate DOAs plus one trailing non-speech class.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaGrid {
    angles_deg: Vec<f64>,
}

impl Default for DoaGrid {
    fn default() -> Self {
        Self::standard()
    }
}

impl DoaGrid {
    /// 181 angles 0..=180 in 1 degree steps; 182 classes.
    pub fn standard() -> Self {
        Self {
            angles_deg: (0..=180).map(f64::from).collect(),
        }
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn angle_count(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn class_count(&self) -> usize {
        self.angles_deg.len() + 1
    }

    pub fn non_speech_class(&self) -> usize {
        self.angles_deg.len()
    }

    /// Nearest grid class, rounding exact midpoints up.
    pub fn nearest_class(&self, doa_deg: f64) -> usize {
        let first = self.angles_deg[0];
        let step = if self.angles_deg.len() > 1 {
            self.angles_deg[1] - first
        } else {
            1.0
        };
        let idx = ((doa_deg - first) / step + 0.5).floor();
        idx.clamp(0.0, (self.angles_deg.len() - 1) as f64) as usize
    }
}

/// Frame-level class probabilities `(frame, class)`. Rows are not required
/// to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DoaPosterior {
    probs: Vec<f64>,
    frame_count: usize,
    class_count: usize,
}

impl DoaPosterior {
    pub fn new(probs: Vec<f64>, frame_count: usize, class_count: usize) -> Result<Self> {
        ensure!(
            probs.len() == frame_count * class_count,
            Dimension,
            "posterior has {} values, expected {}x{}",
            probs.len(),
            frame_count,
            class_count
        );
        Ok(Self {
            probs,
            frame_count,
            class_count,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.probs[t * self.class_count..(t + 1) * self.class_count]
    }

    pub fn values(&self) -> &[f64] {
        &self.probs
    }

    /// Per-class average over frames.
    pub fn mean_over_frames(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.class_count];
        for t in 0..self.frame_count {
            for (a, p) in avg.iter_mut().zip(self.frame(t)) {
                *a += p;
            }
        }
        let n = self.frame_count.max(1) as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        avg
    }
}

/// Far-field delays `tau_i = -(p_i . u(theta)) / c`, relative to the array
/// center. A microphone closer to the source gets a more negative delay.
pub fn steering_delays(geometry: &ArrayGeometry, doa_deg: f64) -> Vec<f64> {
    steering_delays_with_speed(geometry, doa_deg, SPEED_OF_SOUND)
}

pub fn steering_delays_with_speed(geometry: &ArrayGeometry, doa_deg: f64, speed_of_sound: f64) -> Vec<f64> {
    let u = direction(doa_deg);
    geometry
        .mic_positions
        .iter()
        .map(|p| -dot(p, &u) / speed_of_sound)
        .collect()
}

pub(crate) fn validate_doa(doa_deg: f64) -> Result<()> {
    ensure!(
        doa_deg.is_finite() && (0.0..=180.0).contains(&doa_deg),
        Validation,
        "DOA {doa_deg} outside [0, 180] degrees"
    );
    Ok(())
}

const PHAT_EPS: f64 = 1e-12;

/// GCC-PHAT over all microphone pairs, scored on the grid angles.
pub fn gcc_phat(spec: &Spectrogram, geometry: &ArrayGeometry, grid: &DoaGrid) -> Result<f64> {
    gcc_phat_weighted(spec, geometry, grid, None)
}

/// GCC-PHAT where each time-frequency bin's PHAT-normalized cross spectrum is
/// additionally weighted by `weights(t, f)` (e.g. a remainder mask).
pub fn gcc_phat_weighted(
    spec: &Spectrogram,
    geometry: &ArrayGeometry,
    grid: &DoaGrid,
    weights: Option<&Mask>,
) -> Result<f64> {
    let scores = gcc_phat_scores(spec, geometry, grid, weights)?;
    Ok(grid.angles_deg()[argmax_first(&scores)])
}

/// Summed GCC-PHAT response for every grid angle.
pub fn gcc_phat_scores(
    spec: &Spectrogram,
    geometry: &ArrayGeometry,
    grid: &DoaGrid,
    weights: Option<&Mask>,
) -> Result<Vec<f64>> {
    let channels = spec.channel_count();
    ensure!(channels >= 2, Dimension, "GCC-PHAT needs at least two channels");
    ensure!(
        geometry.mic_count() == channels,
        Dimension,
        "geometry has {} microphones, spectrogram {} channels",
        geometry.mic_count(),
        channels
    );
    if let Some(w) = weights {
        ensure!(
            w.shape() == (spec.frame_count(), spec.bin_count()),
            Dimension,
            "weight mask {:?} does not match spectrogram",
            w.shape()
        );
    }
    let bins = spec.bin_count();
    let mut total_weight = 0.0;
    // Cross-power spectrum of each pair accumulated over frames, then
    // PHAT-normalized per bin.
    let mut pairs = Vec::new();
    for i in 0..channels {
        for j in i + 1..channels {
            let mut acc = vec![Complex64::new(0.0, 0.0); bins];
            for t in 0..spec.frame_count() {
                let (xi, xj) = (spec.frame(i, t), spec.frame(j, t));
                for f in 0..bins {
                    let w = weights.map_or(1.0, |m| m.get(t, f));
                    acc[f] += xi[f] * xj[f].conj() * w;
                }
            }
            for g in acc.iter_mut() {
                let mag = g.norm();
                if mag > PHAT_EPS {
                    total_weight += 1.0;
                }
                *g /= mag.max(PHAT_EPS);
            }
            pairs.push((i, j, acc));
        }
    }
    if total_weight <= 0.0 {
        return Err(Error::NoEstimate("GCC-PHAT input carries no energy".into()));
    }
    let freqs: Vec<f64> = (0..bins).map(|f| spec.bin_freq_hz(f)).collect();
    let scores = grid
        .angles_deg()
        .iter()
        .map(|&theta| {
            let tau = steering_delays(geometry, theta);
            pairs
                .iter()
                .map(|(i, j, acc)| {
                    let dt = tau[*i] - tau[*j];
                    acc.iter()
                        .zip(&freqs)
                        .map(|(g, &fr)| (g * Complex64::from_polar(1.0, 2.0 * PI * fr * dt)).re)
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    Ok(scores)
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Averages the posterior over frames and returns the grid angle of the
/// highest average, ignoring the non-speech class.
pub fn pool_posterior(post: &DoaPosterior, grid: &DoaGrid) -> Result<f64> {
    if post.frame_count() == 0 {
        return Err(Error::NoEstimate("posterior has no frames".into()));
    }
    ensure!(
        post.class_count() == grid.class_count(),
        Dimension,
        "posterior has {} classes, grid {}",
        post.class_count(),
        grid.class_count()
    );
    let avg = post.mean_over_frames();
    Ok(grid.angles_deg()[argmax_first(&avg[..grid.angle_count()])])
}

/// One speaker's DOA and per-frame activity, for target construction.
#[derive(Debug, Clone, Copy)]
pub struct SpeakerActivity<'a> {
    pub doa_deg: f64,
    pub vad: &'a [bool],
}

/// Per-frame target vectors (`frames x classes`, row-major): a one at the
/// nearest grid class of every active speaker, and at the non-speech class
/// when nobody is active. With one speaker this is one-hot.
pub fn doa_targets(speakers: &[SpeakerActivity<'_>], grid: &DoaGrid, frame_count: usize) -> Result<Vec<f64>> {
    for s in speakers {
        validate_doa(s.doa_deg)?;
        ensure!(
            s.vad.len() == frame_count,
            Dimension,
            "VAD has {} frames, expected {frame_count}",
            s.vad.len()
        );
    }
    let classes = grid.class_count();
    let mut out = vec![0.0; frame_count * classes];
    for t in 0..frame_count {
        let row = &mut out[t * classes..(t + 1) * classes];
        let mut any = false;
        for s in speakers.iter().filter(|s| s.vad[t]) {
            row[grid.nearest_class(s.doa_deg)] = 1.0;
            any = true;
        }
        if !any {
            row[grid.non_speech_class()] = 1.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, MultichannelWave, StftConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_shape() {
        let g = DoaGrid::standard();
        assert_eq!(g.angle_count(), 181);
        assert_eq!(g.class_count(), 182);
        assert_eq!(g.non_speech_class(), NON_SPEECH);
        assert!(g.angles_deg().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn broadside_delays_vanish() {
        let g = ArrayGeometry::kinect_like();
        for d in steering_delays(&g, 90.0) {
            assert!(d.abs() < 1e-18);
        }
    }

    #[test]
    fn endfire_delay_difference_is_one_ms() {
        let g = ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [0.343, 0.0, 0.0]]).unwrap();
        let tau = steering_delays(&g, 0.0);
        assert!(((tau[0] - tau[1]) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn mirrored_doa_negates_differences() {
        let g = ArrayGeometry::linear(&[0.0, 0.05, 0.1, 0.15]);
        for theta in [10.0, 33.0, 71.5] {
            let a = steering_delays(&g, theta);
            let b = steering_delays(&g, 180.0 - theta);
            for i in 0..4 {
                for j in 0..4 {
                    assert!(((a[i] - a[j]) + (b[i] - b[j])).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let grid = DoaGrid::standard();
        let one_hot = |frames: usize, k: usize, p: f64| {
            let mut v = vec![0.0; frames * 182];
            for t in 0..frames {
                v[t * 182 + k] = p;
            }
            v
        };
        let post = DoaPosterior::new(one_hot(4, 45, 1.0), 4, 182).unwrap();
        assert_eq!(pool_posterior(&post, &grid).unwrap(), 45.0);

        let mut v = vec![0.0; 2 * 182];
        v[40] = 0.9;
        v[182 + 50] = 0.8;
        let post = DoaPosterior::new(v, 2, 182).unwrap();
        assert_eq!(pool_posterior(&post, &grid).unwrap(), 40.0);

        let post = DoaPosterior::new(vec![0.3; 3 * 182], 3, 182).unwrap();
        assert_eq!(pool_posterior(&post, &grid).unwrap(), 0.0);

        // non-speech never wins
        let post = DoaPosterior::new(one_hot(3, NON_SPEECH, 1.0), 3, 182).unwrap();
        assert_eq!(pool_posterior(&post, &grid).unwrap(), 0.0);

        let empty = DoaPosterior::new(vec![], 0, 182).unwrap();
        assert!(matches!(pool_posterior(&empty, &grid), Err(Error::NoEstimate(_))));
    }

    #[test]
    fn target_examples() {
        let grid = DoaGrid::standard();
        let on = [true, false];
        let both = [
            SpeakerActivity { doa_deg: 30.4, vad: &on },
            SpeakerActivity { doa_deg: 120.7, vad: &on },
        ];
        let y = doa_targets(&both, &grid, 2).unwrap();
        let ones: Vec<usize> = (0..182).filter(|&k| y[k] == 1.0).collect();
        assert_eq!(ones, vec![30, 121]);
        let silent: Vec<usize> = (0..182).filter(|&k| y[182 + k] == 1.0).collect();
        assert_eq!(silent, vec![NON_SPEECH]);

        let half = [SpeakerActivity { doa_deg: 30.5, vad: &[true] }];
        let y = doa_targets(&half, &grid, 1).unwrap();
        assert_eq!(y[31], 1.0);
        assert_eq!(y.iter().sum::<f64>(), 1.0);
    }

    /// Multichannel white noise where channel `i` lags channel 0 by `lags[i]` samples.
    fn shifted_noise(lags: &[usize], len: usize, seed: u64) -> MultichannelWave {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = *lags.iter().max().unwrap();
        let src: Vec<f64> = (0..len + max).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ch = lags
            .iter()
            .map(|&l| (0..len).map(|n| src[n + max - l]).collect())
            .collect();
        MultichannelWave::new(ch, 16_000).unwrap()
    }

    #[test]
    fn integer_shift_recovered_on_grid() {
        // Mic 1 at +d hears the source 2 samples before mic 0 when
        // cos(theta) * d / c = 2 / fs; pick d so that theta = 60 exactly.
        let d = 2.0 * SPEED_OF_SOUND / (16_000.0 * 0.5);
        let g = ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [d, 0.0, 0.0]]).unwrap();
        let w = shifted_noise(&[2, 0], 16_000, 11);
        let spec = stft(&w, &StftConfig::paper_profile()).unwrap();
        let est = gcc_phat(&spec, &g, &DoaGrid::standard()).unwrap();
        assert_eq!(est, 60.0);
    }

    #[test]
    fn uncorrelated_noise_still_returns_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ch = (0..4)
            .map(|_| (0..8000).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let w = MultichannelWave::new(ch, 16_000).unwrap();
        let spec = stft(&w, &StftConfig::paper_profile()).unwrap();
        let est = gcc_phat(&spec, &ArrayGeometry::kinect_like(), &DoaGrid::standard()).unwrap();
        assert!((0.0..=180.0).contains(&est));
    }

    #[test]
    fn silent_input_has_no_estimate() {
        let w = MultichannelWave::zeros(4, 4000, 16_000);
        let spec = stft(&w, &StftConfig::paper_profile()).unwrap();
        let r = gcc_phat(&spec, &ArrayGeometry::kinect_like(), &DoaGrid::standard());
        assert!(matches!(r, Err(Error::NoEstimate(_))));
    }
}
