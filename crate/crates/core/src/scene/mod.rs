//! Reverberant two-speaker scenes with full ground truth.

mod dataset;
mod noise;
mod rir;
mod speech;

pub use dataset::{
    generate_dataset, load_manifest, load_scene, CorpusSource, GeneratorConfig, LoadedScene, ManifestEntry, Split,
};
pub use noise::diffuse_noise;
pub use rir::{energy_decay_curve_db, estimate_rt60, simulate_rir, RirConfig, RoomSpec};
pub use speech::{synthesize_utterance, SpeakerProfile};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{fft_convolve, spectral_frame_energy, stft, Mask, MultichannelWave, Spectrogram, StftConfig};
use crate::error::{ensure, Result};
use crate::geometry::{doa_of, ArrayGeometry, Point};

pub const MASK_EPS: f64 = 1e-8;
pub const VAD_THRESHOLD_DB: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub array_center: Point,
    pub source_positions: Vec<Point>,
    pub sir_db: f64,
    /// Noise level relative to speaker 1; `None` disables noise.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

/// Everything besides the scene itself that determines the rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub geometry: ArrayGeometry,
    pub stft: StftConfig,
    pub rir: RirConfig,
    pub vad_threshold_db: f64,
    pub diffuse_plane_waves: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            geometry: ArrayGeometry::kinect_like(),
            stft: StftConfig::paper_profile(),
            rir: RirConfig::default(),
            vad_threshold_db: VAD_THRESHOLD_DB,
            diffuse_plane_waves: 64,
        }
    }
}

pub enum NoiseInput<'a> {
    /// Spatially diffuse synthetic noise drawn from the scene seed.
    Diffuse,
    /// Multichannel recording, tiled if shorter than the mixture.
    Recording(&'a MultichannelWave),
}

#[derive(Debug, Clone)]
pub struct SceneTruth {
    pub images: Vec<MultichannelWave>,
    pub noise_image: MultichannelWave,
    pub doas_deg: Vec<f64>,
    pub ideal_masks: Vec<Mask>,
    pub noise_mask: Mask,
    pub vad: Vec<Vec<bool>>,
}

fn gain_for_ratio(reference: f64, other: f64, ratio_db: f64) -> Option<f64> {
    (reference > 0.0 && other > 0.0).then(|| (reference / (other * 10f64.powf(ratio_db / 10.0))).sqrt())
}

/// Renders `dry_sources` into the room and mixes them with noise. The
/// mixture is as long as the longest dry source; reverberant tails beyond
/// that are cut.
pub fn synthesize_scene(
    spec: &SceneSpec,
    dry_sources: &[Vec<f64>],
    noise: NoiseInput<'_>,
    cfg: &SceneConfig,
) -> Result<(MultichannelWave, SceneTruth)> {
    ensure!(!dry_sources.is_empty(), Validation, "scene needs at least one source");
    ensure!(
        dry_sources.len() == spec.source_positions.len(),
        Validation,
        "{} dry sources for {} positions",
        dry_sources.len(),
        spec.source_positions.len()
    );
    let fs = cfg.stft.sample_rate;
    let len = dry_sources.iter().map(Vec::len).max().unwrap_or(0);
    ensure!(len > 0, Validation, "all dry sources are empty");
    let mics = cfg.geometry.placed_at(&spec.array_center);
    let rir_cfg = RirConfig {
        sample_rate: fs,
        ..cfg.rir.clone()
    };

    let mut images = Vec::with_capacity(dry_sources.len());
    for (src, pos) in dry_sources.iter().zip(&spec.source_positions) {
        let rirs = simulate_rir(&spec.room, pos, &mics, &rir_cfg)?;
        let channels = rirs.iter().map(|h| fft_convolve(src, h, len)).collect();
        images.push(MultichannelWave::new(channels, fs)?);
    }

    let e1 = images[0].energy(0);
    for img in images.iter_mut().skip(1) {
        if let Some(g) = gain_for_ratio(e1, img.energy(0), spec.sir_db) {
            img.scale(g);
        }
    }

    let mut noise_image = MultichannelWave::zeros(mics.len(), len, fs);
    if let Some(snr_db) = spec.snr_db {
        let raw = match noise {
            NoiseInput::Diffuse => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_65);
                diffuse_noise(&cfg.geometry, len, fs, cfg.diffuse_plane_waves, spec.room.speed_of_sound, &mut rng)
            }
            NoiseInput::Recording(rec) => {
                ensure!(
                    rec.channel_count() == mics.len(),
                    Validation,
                    "noise has {} channels, array has {}",
                    rec.channel_count(),
                    mics.len()
                );
                ensure!(!rec.is_empty(), Validation, "noise recording is empty");
                let channels = rec
                    .channels()
                    .iter()
                    .map(|c| c.iter().cycle().take(len).copied().collect())
                    .collect();
                MultichannelWave::new(channels, fs)?
            }
        };
        let reference = if e1 > 0.0 {
            e1
        } else {
            images.iter().map(|i| i.energy(0)).sum()
        };
        if let Some(g) = gain_for_ratio(reference, raw.energy(0), snr_db) {
            noise_image = raw;
            noise_image.scale(g);
        }
    }

    // x = Σ c_j + n, summed in that order
    let mut channels = vec![vec![0.0; len]; mics.len()];
    for (m, ch) in channels.iter_mut().enumerate() {
        for (t, v) in ch.iter_mut().enumerate() {
            *v = images.iter().map(|img| img.channel(m)[t]).sum::<f64>() + noise_image.channel(m)[t];
        }
    }
    let mixture = MultichannelWave::new(channels, fs)?;

    let doas_deg = spec
        .source_positions
        .iter()
        .map(|p| doa_of(p, &spec.array_center))
        .collect();
    let (ideal_masks, noise_mask) = ideal_masks(&images, &noise_image, &cfg.stft)?;
    let vad = images
        .iter()
        .map(|img| energy_vad(img, &cfg.stft, cfg.vad_threshold_db))
        .collect::<Result<_>>()?;
    Ok((
        mixture,
        SceneTruth {
            images,
            noise_image,
            doas_deg,
            ideal_masks,
            noise_mask,
            vad,
        },
    ))
}

/// Ideal ratio masks at channel 1 for every source and for the noise:
/// `|C_j1| / (Σ_k |C_k1| + |N_1| + eps)`.
pub fn ideal_masks(
    images: &[MultichannelWave],
    noise_image: &MultichannelWave,
    cfg: &StftConfig,
) -> Result<(Vec<Mask>, Mask)> {
    let mags = |w: &MultichannelWave| -> Result<(Vec<f64>, usize, usize)> {
        let s = stft(&w.select_channel(0), cfg)?;
        Ok((s.data().iter().map(|v| v.norm()).collect(), s.frame_count(), s.bin_count()))
    };
    let src: Vec<_> = images.iter().map(mags).collect::<Result<_>>()?;
    let (noise, frames, bins) = mags(noise_image)?;
    for (m, t, b) in &src {
        ensure!(
            (*t, *b, m.len()) == (frames, bins, noise.len()),
            Dimension,
            "source and noise images differ in length"
        );
    }
    let denom: Vec<f64> = (0..noise.len())
        .map(|k| src.iter().map(|s| s.0[k]).sum::<f64>() + noise[k] + MASK_EPS)
        .collect();
    let to_mask = |m: &[f64]| Mask::new(m.iter().zip(&denom).map(|(a, d)| a / d).collect(), frames, bins);
    let masks = src.iter().map(|s| to_mask(&s.0)).collect::<Result<_>>()?;
    Ok((masks, to_mask(&noise)?))
}

/// Ideal ratio mask of source `j` on the frame grid of `mixture_spec`.
pub fn ideal_mask(truth: &SceneTruth, mixture_spec: &Spectrogram, j: usize) -> Result<Mask> {
    ensure!(j < truth.images.len(), Dimension, "source index {j} out of range");
    let (masks, _) = ideal_masks(&truth.images, &truth.noise_image, mixture_spec.config())?;
    let mask = masks.into_iter().nth(j).expect("index checked");
    ensure!(
        mask.shape() == (mixture_spec.frame_count(), mixture_spec.bin_count()),
        Dimension,
        "images are not STFT-compatible with the mixture"
    );
    Ok(mask)
}

/// Per-frame activity of a source image: channel-1 frame energy within
/// `threshold_db` of the loudest frame.
pub fn energy_vad(image: &MultichannelWave, cfg: &StftConfig, threshold_db: f64) -> Result<Vec<bool>> {
    let spec = stft(&image.select_channel(0), cfg)?;
    let energies: Vec<f64> = (0..spec.frame_count())
        .map(|t| spectral_frame_energy(spec.frame(0, t), cfg.fft_len))
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    let floor = peak * 10f64.powf(-threshold_db / 10.0);
    Ok(energies.iter().map(|&e| peak > 0.0 && e > floor).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::gcc_phat;
    use crate::localization::DoaGrid;
    use rand::Rng;

    fn quick_cfg() -> SceneConfig {
        SceneConfig {
            rir: RirConfig {
                length: Some(2400),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn spec(sir_db: f64, snr_db: Option<f64>) -> SceneSpec {
        SceneSpec {
            room: RoomSpec::new([6.0, 5.0, 3.0], 0.3),
            array_center: [3.0, 2.5, 1.2],
            source_positions: vec![[1.5, 3.5, 1.5], [4.2, 1.0, 1.4]],
            sir_db,
            snr_db,
            seed: 9,
        }
    }

    fn dry(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SpeakerProfile::random(&mut rng);
        synthesize_utterance(&p, len as f64 / 16_000.0, 16_000, &mut rng)
    }

    #[test]
    fn decomposition_is_exact_and_sir_applied() {
        let (mix, truth) = synthesize_scene(
            &spec(0.0, Some(5.0)),
            &[dry(1, 16_000), dry(2, 12_000)],
            NoiseInput::Diffuse,
            &quick_cfg(),
        )
        .unwrap();
        assert_eq!(mix.len(), 16_000);
        for m in 0..4 {
            for t in 0..mix.len() {
                let sum = truth.images[0].channel(m)[t] + truth.images[1].channel(m)[t] + truth.noise_image.channel(m)[t];
                assert_eq!(mix.channel(m)[t], sum);
            }
        }
        let sir = 10.0 * (truth.images[0].energy(0) / truth.images[1].energy(0)).log10();
        assert!(sir.abs() < 0.01);
        let snr = 10.0 * (truth.images[0].energy(0) / truth.noise_image.energy(0)).log10();
        assert!((snr - 5.0).abs() < 0.01);
        // masks of sources plus noise sum to D / (D + eps), D the magnitude sum
        let mags: Vec<Vec<f64>> = truth
            .images
            .iter()
            .chain([&truth.noise_image])
            .map(|w| stft(&w.select_channel(0), &quick_cfg().stft).unwrap().data().iter().map(|v| v.norm()).collect())
            .collect();
        for k in 0..truth.noise_mask.values().len() {
            let s: f64 = truth.ideal_masks.iter().map(|m| m.values()[k]).sum::<f64>() + truth.noise_mask.values()[k];
            let d: f64 = mags.iter().map(|m| m[k]).sum();
            assert!((s - d / (d + MASK_EPS)).abs() < 1e-12);
            if d > 1e-2 {
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        assert!(truth.ideal_masks.iter().all(|m| m.in_unit_range()));
    }

    #[test]
    fn silent_second_source_without_noise() {
        let (mix, truth) = synthesize_scene(
            &spec(3.0, None),
            &[dry(1, 8000), vec![0.0; 8000]],
            NoiseInput::Diffuse,
            &quick_cfg(),
        )
        .unwrap();
        assert_eq!(mix.channels(), truth.images[0].channels());
        let m = &truth.ideal_masks[0];
        let spec1 = stft(&truth.images[0].select_channel(0), &quick_cfg().stft).unwrap();
        for (v, x) in m.values().iter().zip(spec1.data()) {
            if x.norm() > 1e-2 {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
        assert!(truth.vad[1].iter().all(|a| !a));
    }

    #[test]
    fn identical_images_split_evenly() {
        let img = MultichannelWave::from_mono(dry(4, 8000), 16_000);
        let silence = MultichannelWave::zeros(1, 8000, 16_000);
        let (masks, _) = ideal_masks(&[img.clone(), img.clone()], &silence, &StftConfig::paper_profile()).unwrap();
        let spec1 = stft(&img, &StftConfig::paper_profile()).unwrap();
        for ((a, b), x) in masks[0].values().iter().zip(masks[1].values()).zip(spec1.data()) {
            assert_eq!(a, b);
            if x.norm() > 1e-2 {
                assert!((a - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_sources_rejected() {
        assert!(synthesize_scene(&spec(0.0, None), &[], NoiseInput::Diffuse, &quick_cfg()).is_err());
    }

    #[test]
    fn vad_examples() {
        let cfg = StftConfig::paper_profile();
        let silence = MultichannelWave::zeros(1, 16_000, 16_000);
        assert!(energy_vad(&silence, &cfg, 40.0).unwrap().iter().all(|a| !a));
        let tone: Vec<f64> = (0..16_000).map(|t| (0.1 * t as f64).sin()).collect();
        assert!(energy_vad(&MultichannelWave::from_mono(tone, 16_000), &cfg, 40.0).unwrap().iter().all(|&a| a));

        // burst in the middle third: frames overlapping the burst are active
        let n = 24_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let burst: Vec<f64> = (0..n)
            .map(|t| if (8000..16_000).contains(&t) { rng.gen_range(-1.0..1.0) } else { 0.0 })
            .collect();
        let vad = energy_vad(&MultichannelWave::from_mono(burst, 16_000), &cfg, 40.0).unwrap();
        // frame t covers samples [t*hop - win/2, t*hop + win/2)
        let first = 8000 / cfg.hop;
        let last = 16_000 / cfg.hop;
        for (t, &a) in vad.iter().enumerate() {
            if t + 1 < first || t > last + 1 {
                assert!(!a, "frame {t} active");
            }
            if t > first && t < last {
                assert!(a, "frame {t} inactive");
            }
        }
    }

    #[test]
    fn anechoic_gcc_phat_recovers_doa() {
        let cfg = SceneConfig::default();
        let mut s = spec(0.0, None);
        s.room.rt60 = 0.0;
        s.source_positions = vec![[1.0, 4.0, 1.2]];
        let (mix, truth) = synthesize_scene(&s, &[dry(7, 16_000)], NoiseInput::Diffuse, &cfg).unwrap();
        let est = gcc_phat(&stft(&mix, &cfg.stft).unwrap(), &cfg.geometry, &DoaGrid::standard()).unwrap();
        assert!((est - truth.doas_deg[0]).abs() <= 2.0, "{est} vs {}", truth.doas_deg[0]);
    }
}
