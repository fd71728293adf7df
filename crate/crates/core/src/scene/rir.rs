//! Image-source room impulse responses for a shoebox room with uniform wall
//! absorption derived from the reverberation time (Sabine).

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::{distance, Point, SPEED_OF_SOUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Length, width, height in meters.
    pub dims: [f64; 3],
    /// Reverberation time in seconds. Zero means anechoic.
    pub rt60: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
}

fn default_speed_of_sound() -> f64 {
    SPEED_OF_SOUND
}

impl RoomSpec {
    pub fn new(dims: [f64; 3], rt60: f64) -> Self {
        Self {
            dims,
            rt60,
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    fn check(&self) -> Result<()> {
        ensure!(
            self.dims.iter().all(|d| d.is_finite() && *d > 0.0),
            Validation,
            "room dimensions must be positive"
        );
        ensure!(self.rt60 >= 0.0 && self.rt60.is_finite(), Validation, "rt60 must be non-negative");
        Ok(())
    }

    /// Sabine absorption `alpha = 24 ln(10) V / (c S T60)`.
    pub fn sabine_absorption(&self) -> Result<f64> {
        self.check()?;
        if self.rt60 == 0.0 {
            return Ok(1.0);
        }
        let alpha = 24.0 * 10f64.ln() * self.volume() / (self.speed_of_sound * self.surface() * self.rt60);
        ensure!(
            alpha <= 1.0,
            Validation,
            "rt60 {} s is infeasible for a {:?} m room (Sabine absorption {alpha:.3} > 1)",
            self.rt60,
            self.dims
        );
        Ok(alpha)
    }

    /// Wall reflection coefficient `beta = sqrt(1 - alpha)` with Sabine absorption.
    pub fn reflection_coefficient(&self) -> Result<f64> {
        Ok((1.0 - self.sabine_absorption()?).sqrt())
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter().zip(&self.dims).all(|(v, d)| *v > 0.0 && v < d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RirConfig {
    pub sample_rate: u32,
    /// Response length in samples; defaults to `rt60 * sample_rate`, at least
    /// long enough to hold the direct path.
    pub length: Option<usize>,
    /// Highest reflection order per axis; `None` keeps every image that
    /// arrives within the response length.
    pub max_order: Option<u32>,
    /// Taps of the windowed-sinc fractional delay.
    pub sinc_taps: usize,
    /// Removes the DC build-up of the all-positive image amplitudes with the
    /// classic 100 Hz two-pole high-pass.
    pub high_pass: bool,
}

impl Default for RirConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            length: None,
            max_order: None,
            sinc_taps: 32,
            high_pass: true,
        }
    }
}

#[inline]
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

fn allen_berkley_high_pass(h: &mut [f64], sample_rate: u32) {
    let w = 2.0 * PI * 100.0 / sample_rate as f64;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in h.iter_mut() {
        let y0 = b1 * y1 + b2 * y2 + *v;
        *v = y0 + a1 * y1 + r1 * y2;
        y2 = y1;
        y1 = y0;
    }
}

/// Adds `amp * delta(n - delay)` as a Hann-windowed sinc.
fn add_fractional_impulse(out: &mut [f64], delay: f64, amp: f64, taps: usize) {
    let half = (taps / 2) as isize;
    let base = delay.floor() as isize;
    for k in base - half + 1..=base + half {
        if k < 0 || k as usize >= out.len() {
            continue;
        }
        let t = k as f64 - delay;
        if t.abs() >= half as f64 {
            continue;
        }
        let w = 0.5 * (1.0 + (2.0 * PI * t / taps as f64).cos());
        out[k as usize] += amp * w * sinc(PI * t);
    }
}

/// Impulse response from `source` to each microphone in `mics` (absolute positions).
pub fn simulate_rir(room: &RoomSpec, source: &Point, mics: &[Point], cfg: &RirConfig) -> Result<Vec<Vec<f64>>> {
    let beta = room.reflection_coefficient()?;
    ensure!(room.contains(source), Validation, "source {source:?} outside room {:?}", room.dims);
    for m in mics {
        ensure!(room.contains(m), Validation, "microphone {m:?} outside room {:?}", room.dims);
    }
    ensure!(cfg.sinc_taps >= 2, Config, "need at least two sinc taps");
    let fs = cfg.sample_rate as f64;
    let c = room.speed_of_sound;
    let max_direct = mics.iter().map(|m| distance(source, m)).fold(0.0, f64::max);
    let min_len = (max_direct / c * fs).ceil() as usize + cfg.sinc_taps;
    let len = cfg
        .length
        .unwrap_or_else(|| (room.rt60 * fs).ceil() as usize)
        .max(min_len);
    let responses = mics
        .par_iter()
        .map(|mic| {
            let mut h = vec![0.0; len];
            let horizon = len + cfg.sinc_taps / 2;
            for_each_image(room, beta, source, mic, horizon, cfg.sample_rate, cfg.max_order, |d, refl| {
                let amp = beta.powi(refl) / (4.0 * PI * d);
                add_fractional_impulse(&mut h, d / c * fs, amp, cfg.sinc_taps);
            });
            // a lone direct path has no DC build-up to remove
            if cfg.high_pass && beta > 0.0 {
                allen_berkley_high_pass(&mut h, cfg.sample_rate);
            }
            h
        })
        .collect();
    Ok(responses)
}

fn order_limits(room: &RoomSpec, beta: f64, len: usize, sample_rate: u32, max_order: Option<u32>) -> [i64; 3] {
    let reach = len as f64 * room.speed_of_sound / sample_rate as f64;
    [0, 1, 2].map(|axis| {
        let by_len = (reach / (2.0 * room.dims[axis])).ceil() as i64 + 1;
        match max_order {
            _ if beta == 0.0 => 0,
            Some(o) => by_len.min(o as i64),
            None => by_len,
        }
    })
}

/// Visits every image `(distance, reflection count)` that can arrive within
/// `len` samples.
#[allow(clippy::too_many_arguments)]
fn for_each_image(
    room: &RoomSpec,
    beta: f64,
    source: &Point,
    mic: &Point,
    len: usize,
    sample_rate: u32,
    max_order: Option<u32>,
    mut visit: impl FnMut(f64, i32),
) {
    let limits = order_limits(room, beta, len, sample_rate, max_order);
    let reach = len as f64 * room.speed_of_sound / sample_rate as f64;
    for nx in -limits[0]..=limits[0] {
        for ny in -limits[1]..=limits[1] {
            for nz in -limits[2]..=limits[2] {
                let n = [nx, ny, nz];
                for q in 0..8u32 {
                    let qs = [(q & 1) as i64, ((q >> 1) & 1) as i64, ((q >> 2) & 1) as i64];
                    let mut refl = 0i64;
                    let mut d2 = 0.0;
                    for a in 0..3 {
                        let img = (1 - 2 * qs[a]) as f64 * source[a] + 2.0 * n[a] as f64 * room.dims[a];
                        d2 += (img - mic[a]).powi(2);
                        refl += (n[a] - qs[a]).abs() + n[a].abs();
                    }
                    if (beta == 0.0 && refl > 0) || max_order.is_some_and(|o| refl > o as i64) {
                        continue;
                    }
                    let d = d2.sqrt();
                    if d > reach {
                        continue;
                    }
                    visit(d, refl as i32);
                }
            }
        }
    }
}

/// Schroeder backward-integrated energy decay curve in dB (0 dB at `t = 0`).
pub fn energy_decay_curve_db(h: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut edc: Vec<f64> = h
        .iter()
        .rev()
        .map(|v| {
            acc += v * v;
            acc
        })
        .collect();
    edc.reverse();
    let total = edc.first().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    edc.iter().map(|e| 10.0 * (e / total).max(1e-300).log10()).collect()
}

/// Reverberation time estimated from the decay between -5 and -25 dB of the
/// Schroeder curve (T20), extrapolated to 60 dB.
pub fn estimate_rt60(h: &[f64], sample_rate: u32) -> Option<f64> {
    let edc = energy_decay_curve_db(h);
    let i5 = edc.iter().position(|&v| v <= -5.0)?;
    let i25 = edc.iter().position(|&v| v <= -25.0)?;
    // least-squares slope over the range
    let pts: Vec<(f64, f64)> = (i5..=i25).map(|i| (i as f64 / sample_rate as f64, edc[i])).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}
