//! Speech-like test material: voiced syllables with moving formants,
//! fricative bursts and pauses. Stands in for a read-speech corpus when none
//! is supplied; each synthetic speaker has a fixed pitch and vocal-tract scale.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// (F1, F2, F3) in Hz for a handful of vowels.
const VOWELS: [[f64; 3]; 7] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
];
const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 170.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub f0_hz: f64,
    /// Multiplies every formant frequency (shorter vocal tract > 1).
    pub formant_scale: f64,
    /// Syllables per second.
    pub rate: f64,
    pub fricative_prob: f64,
}

impl SpeakerProfile {
    pub fn random(rng: &mut impl Rng) -> Self {
        let female = rng.gen_bool(0.5);
        Self {
            f0_hz: if female { rng.gen_range(165.0..255.0) } else { rng.gen_range(85.0..155.0) },
            formant_scale: if female { rng.gen_range(1.08..1.2) } else { rng.gen_range(0.9..1.02) },
            rate: rng.gen_range(3.0..5.5),
            fricative_prob: rng.gen_range(0.1..0.3),
        }
    }
}

fn formant_gain(freq: f64, formants: &[f64; 3], scale: f64) -> f64 {
    formants
        .iter()
        .zip(BANDWIDTHS)
        .map(|(&f, bw)| {
            let x = (freq - f * scale) / (0.5 * bw * scale);
            1.0 / (1.0 + x * x)
        })
        .sum::<f64>()
        // spectral tilt of the glottal source
        * (100.0 / freq.max(100.0)).sqrt()
}

fn raised_cosine_envelope(n: usize, ramp: usize, i: usize) -> f64 {
    let ramp = ramp.min(n / 2).max(1);
    if i < ramp {
        0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
    } else if i + ramp >= n {
        0.5 - 0.5 * (PI * (n - 1 - i) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

fn voiced(out: &mut Vec<f64>, profile: &SpeakerProfile, len: usize, fs: f64, rng: &mut impl Rng) {
    let a = VOWELS[rng.gen_range(0..VOWELS.len())];
    let b = VOWELS[rng.gen_range(0..VOWELS.len())];
    let f0_start = profile.f0_hz * rng.gen_range(0.9..1.15);
    let f0_end = profile.f0_hz * rng.gen_range(0.8..1.05);
    let vibrato = rng.gen_range(3.0..6.0);
    let level = rng.gen_range(0.5..1.0);
    let nyq_limit = (fs / 2.0).min(5000.0);
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    let update = 32;
    let mut gains: Vec<f64> = Vec::new();
    for i in 0..len {
        let u = i as f64 / len.max(1) as f64;
        let f0 = (f0_start + (f0_end - f0_start) * u) * (1.0 + 0.02 * (2.0 * PI * vibrato * i as f64 / fs).sin());
        if i % update == 0 {
            let mut formants = [0.0; 3];
            for k in 0..3 {
                formants[k] = a[k] + (b[k] - a[k]) * u;
            }
            let harmonics = (nyq_limit / f0).floor() as usize;
            gains = (1..=harmonics)
                .map(|h| formant_gain(h as f64 * f0, &formants, profile.formant_scale))
                .collect();
        }
        phase += 2.0 * PI * f0 / fs;
        if phase > 2.0 * PI {
            phase -= 2.0 * PI;
        }
        let s: f64 = gains
            .iter()
            .enumerate()
            .map(|(h, g)| g * ((h + 1) as f64 * phase).sin())
            .sum();
        out.push(level * 0.3 * s * raised_cosine_envelope(len, (0.02 * fs) as usize, i));
    }
}

fn fricative(out: &mut Vec<f64>, len: usize, fs: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let level = rng.gen_range(0.1..0.3);
    let mut prev = 0.0;
    for i in 0..len {
        let x: f64 = normal.sample(rng);
        // first difference: crude high-pass
        out.push(level * (x - prev) * raised_cosine_envelope(len, (0.01 * fs) as usize, i));
        prev = x;
    }
}

/// One utterance of roughly `duration_s` seconds, peak-normalized to 0.5.
pub fn synthesize_utterance(profile: &SpeakerProfile, duration_s: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let fs = sample_rate as f64;
    let total = (duration_s * fs).round() as usize;
    let mut out = Vec::with_capacity(total + fs as usize);
    out.resize((rng.gen_range(0.05..0.25) * fs) as usize, 0.0);
    let tail = (rng.gen_range(0.05..0.2) * fs) as usize;
    while out.len() + tail < total {
        let syllable = (rng.gen_range(0.7..1.3) / profile.rate * fs) as usize;
        if rng.gen_bool(profile.fricative_prob) {
            fricative(&mut out, syllable / 2, fs, rng);
        }
        voiced(&mut out, profile, syllable, fs, rng);
        let pause = if rng.gen_bool(0.15) {
            rng.gen_range(0.15..0.4)
        } else {
            rng.gen_range(0.0..0.06)
        };
        out.resize(out.len() + (pause * fs) as usize, 0.0);
    }
    out.resize(total, 0.0);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}
