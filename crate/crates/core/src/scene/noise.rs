//! Spherically isotropic noise: a superposition of plane waves from random
//! directions with independent random spectra, rendered at each microphone
//! with exact far-field delays in the frequency domain.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use crate::dsp::MultichannelWave;
use crate::geometry::{dot, ArrayGeometry, Point};

/// `len` samples of diffuse noise at unit RMS on channel 1, with a gently
/// falling (pink-like above 100 Hz) spectrum.
pub fn diffuse_noise(
    geometry: &ArrayGeometry,
    len: usize,
    sample_rate: u32,
    plane_waves: usize,
    speed_of_sound: f64,
    rng: &mut impl Rng,
) -> MultichannelWave {
    let mics = geometry.mic_count();
    if len == 0 {
        return MultichannelWave::zeros(mics, 0, sample_rate);
    }
    let n = len.next_power_of_two().max(2);
    let half = n / 2;
    let fs = sample_rate as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); n]; mics];
    for _ in 0..plane_waves.max(1) {
        // uniform direction on the sphere
        let z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let r = (1.0 - z * z).sqrt();
        let u: Point = [r * phi.cos(), r * phi.sin(), z];
        let delays: Vec<f64> = geometry
            .mic_positions
            .iter()
            .map(|p| -dot(p, &u) / speed_of_sound)
            .collect();
        for k in 1..half {
            let f = k as f64 * fs / n as f64;
            let shape = (100.0 / f.max(100.0)).sqrt();
            let g = Complex64::new(normal.sample(rng), normal.sample(rng)) * shape;
            for (m, tau) in delays.iter().enumerate() {
                spectra[m][k] += g * Complex64::from_polar(1.0, -2.0 * PI * f * tau);
            }
        }
    }
    let inv = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut channels: Vec<Vec<f64>> = spectra
        .into_iter()
        .map(|mut s| {
            for k in 1..half {
                s[n - k] = s[k].conj();
            }
            inv.process(&mut s);
            s[..len].iter().map(|v| v.re).collect()
        })
        .collect();
    let rms = (channels[0].iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        channels.iter_mut().flatten().for_each(|v| *v /= rms);
    }
    MultichannelWave::new(channels, sample_rate).expect("equal-length channels")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SPEED_OF_SOUND;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coherence_at(x: &MultichannelWave, a: usize, b: usize) -> f64 {
        let n = x.len() as f64;
        let cov: f64 = x.channel(a).iter().zip(x.channel(b)).map(|(p, q)| p * q).sum::<f64>() / n;
        cov / (x.energy(a) / n * x.energy(b) / n).sqrt()
    }

    #[test]
    fn unit_rms_and_distance_dependent_coherence() {
        let g = ArrayGeometry::linear(&[0.0, 0.01, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = diffuse_noise(&g, 32_000, 16_000, 64, SPEED_OF_SOUND, &mut rng);
        assert_eq!(x.channel_count(), 3);
        assert!((x.energy(0) / 32_000.0 - 1.0).abs() < 1e-9);
        // close pair strongly correlated, distant pair weakly
        assert!(coherence_at(&x, 0, 1) > 0.8);
        assert!(coherence_at(&x, 0, 2).abs() < 0.3);
    }
}
