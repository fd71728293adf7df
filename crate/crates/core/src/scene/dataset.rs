//! Dataset generation: random rooms, placements and levels drawn per scene
//! from an RNG stream derived from (master seed, scene index); WAV output
//! plus a JSON-lines manifest with paths relative to the output root.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    energy_vad, ideal_masks, synthesize_scene, synthesize_utterance, NoiseInput, RoomSpec, SceneConfig, SceneSpec, SceneTruth,
    SpeakerProfile,
};
use crate::dsp::{read_wav, write_wav, MultichannelWave, SampleFormat};
use crate::error::{ensure, Error, Result};
use crate::geometry::{distance, doa_of, Point, SPEED_OF_SOUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Ranges for every random scene parameter. Defaults follow the
/// reverberant two-speaker recipe this crate targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub room_dims_range: [f64; 2],
    pub rt60_range: [f64; 2],
    pub distance_range: [f64; 2],
    pub snr_range: [f64; 2],
    pub sir_range: [f64; 2],
    /// Height of the array center above the floor.
    pub array_height_range: [f64; 2],
    /// Minimum clearance of array center and sources from every wall.
    pub wall_margin: f64,
    /// Relative sizes of the train, dev and test splits.
    pub split_fractions: [f64; 3],
    /// Duration range of synthetic utterances in seconds.
    pub utterance_seconds: [f64; 2],
    /// `false` produces noise-free scenes.
    pub noise: bool,
    /// Cap on the simulated RIR length in seconds (the default renders the
    /// full `rt60`).
    pub max_rir_seconds: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            room_dims_range: [3.0, 9.0],
            rt60_range: [0.3, 1.0],
            distance_range: [0.5, 5.5],
            snr_range: [0.0, 10.0],
            sir_range: [0.0, 5.0],
            array_height_range: [1.0, 2.0],
            wall_margin: 0.3,
            split_fractions: [30.0, 10.0, 5.0],
            utterance_seconds: [2.0, 4.0],
            noise: true,
            max_rir_seconds: None,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64) -> Result<()> {
    ensure!(
        r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= lo,
        Config,
        "{name} must be an ordered range with values >= {lo}, got {r:?}"
    );
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("room_dims_range", self.room_dims_range, 0.0)?;
        check_range("rt60_range", self.rt60_range, 0.0)?;
        check_range("distance_range", self.distance_range, 0.0)?;
        check_range("snr_range", self.snr_range, f64::NEG_INFINITY)?;
        check_range("sir_range", self.sir_range, f64::NEG_INFINITY)?;
        check_range("array_height_range", self.array_height_range, 0.0)?;
        check_range("utterance_seconds", self.utterance_seconds, 0.0)?;
        ensure!(self.utterance_seconds[0] > 0.0, Config, "utterances must be longer than zero");
        ensure!(
            self.split_fractions.iter().all(|f| *f >= 0.0) && self.split_fractions.iter().sum::<f64>() > 0.0,
            Config,
            "split_fractions must be non-negative and not all zero"
        );
        ensure!(
            self.room_dims_range[0] > 2.0 * self.wall_margin,
            Config,
            "rooms must be larger than twice the wall margin"
        );
        Ok(())
    }

    /// Scenes per split for `count` scenes in total.
    pub fn split_counts(&self, count: usize) -> [usize; 3] {
        let total: f64 = self.split_fractions.iter().sum();
        let train = (count as f64 * self.split_fractions[0] / total).round() as usize;
        let dev = ((count as f64 * self.split_fractions[1] / total).round() as usize).min(count - train.min(count));
        let train = train.min(count);
        [train, dev, count - train - dev]
    }
}

/// Where dry speech comes from.
#[derive(Debug, Clone)]
pub enum CorpusSource {
    /// One subdirectory per speaker, each holding mono WAV files.
    Directory(PathBuf),
    /// `speakers` synthetic voices derived from `seed`.
    Synthetic { speakers: usize, seed: u64 },
}

#[derive(Debug, Clone)]
enum Utterances {
    Files(Vec<PathBuf>),
    Synthetic(SpeakerProfile),
}

#[derive(Debug, Clone)]
struct Speaker {
    id: String,
    utterances: Utterances,
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

fn load_speakers(corpus: &CorpusSource) -> Result<Vec<Speaker>> {
    match corpus {
        CorpusSource::Synthetic { speakers, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..*speakers)
                .map(|i| Speaker {
                    id: format!("syn{i:03}"),
                    utterances: Utterances::Synthetic(SpeakerProfile::random(&mut rng)),
                })
                .collect())
        }
        CorpusSource::Directory(dir) => {
            let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            let mut out = Vec::new();
            for d in dirs {
                let files = wav_files(&d)?;
                if !files.is_empty() {
                    out.push(Speaker {
                        id: d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                        utterances: Utterances::Files(files),
                    });
                }
            }
            Ok(out)
        }
    }
}

/// Speakers for each split, disjoint; every split that receives scenes gets
/// at least two.
fn assign_speakers(mut speakers: Vec<Speaker>, counts: [usize; 3], fractions: [f64; 3], seed: u64) -> Result<[Vec<Speaker>; 3]> {
    let needed: usize = counts.iter().map(|&c| if c > 0 { 2 } else { 0 }).sum();
    ensure!(
        speakers.len() >= needed,
        Validation,
        "{} speakers available, the requested splits need at least {needed}",
        speakers.len()
    );
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let active: Vec<usize> = (0..3).filter(|&s| counts[s] > 0).collect();
    let mut sizes = [0usize; 3];
    for &s in &active {
        sizes[s] = 2;
    }
    let spare = speakers.len() - needed;
    let weight: f64 = active.iter().map(|&s| fractions[s]).sum();
    let mut given = 0;
    for (k, &s) in active.iter().enumerate() {
        let extra = if k + 1 == active.len() {
            spare - given
        } else {
            ((spare as f64 * fractions[s] / weight).floor() as usize).min(spare - given)
        };
        sizes[s] += extra;
        given += extra;
    }
    let mut it = speakers.into_iter();
    Ok(sizes.map(|n| it.by_ref().take(n).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub mixture_path: String,
    pub image_paths: Vec<String>,
    pub noise_path: String,
    pub doas_deg: Vec<f64>,
    pub sir_db: f64,
    pub snr_db: Option<f64>,
    pub room: RoomSpec,
    pub array_center: Point,
    pub source_positions: Vec<Point>,
    pub speakers: Vec<String>,
    pub seed: u64,
}

fn scene_seed(master: u64, index: u64) -> u64 {
    crate::seed::indexed(master, index)
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn draw_spec(gen: &GeneratorConfig, sources: usize, seed: u64, speed_of_sound: f64, rng: &mut impl Rng) -> Result<SceneSpec> {
    for _ in 0..1000 {
        let dims = [0; 3].map(|_| uniform(rng, gen.room_dims_range));
        let room = RoomSpec {
            dims,
            rt60: uniform(rng, gen.rt60_range),
            speed_of_sound,
        };
        if room.reflection_coefficient().is_err() {
            continue;
        }
        let m = gen.wall_margin;
        let h = gen.array_height_range;
        let hz = [h[0].max(m), h[1].min(dims[2] - m)];
        if hz[0] > hz[1] {
            continue;
        }
        let center = [uniform(rng, [m, dims[0] - m]), uniform(rng, [m, dims[1] - m]), uniform(rng, hz)];
        let mut positions = Vec::with_capacity(sources);
        for _ in 0..200 {
            let p = [0, 1, 2].map(|a| uniform(rng, [m, dims[a] - m]));
            let d = distance(&p, &center);
            if d >= gen.distance_range[0] && d <= gen.distance_range[1] {
                positions.push(p);
                if positions.len() == sources {
                    break;
                }
            }
        }
        if positions.len() < sources {
            continue;
        }
        return Ok(SceneSpec {
            room,
            array_center: center,
            source_positions: positions,
            sir_db: uniform(rng, gen.sir_range),
            snr_db: gen.noise.then(|| uniform(rng, gen.snr_range)),
            seed,
        });
    }
    Err(Error::Validation(
        "could not place sources within the configured ranges".into(),
    ))
}

fn load_utterance(speaker: &Speaker, gen: &GeneratorConfig, fs: u32, rng: &mut impl Rng) -> Result<Vec<f64>> {
    match &speaker.utterances {
        Utterances::Synthetic(profile) => {
            let dur = uniform(rng, gen.utterance_seconds);
            Ok(synthesize_utterance(profile, dur, fs, rng))
        }
        Utterances::Files(files) => {
            let path = &files[rng.gen_range(0..files.len())];
            let w = read_wav(path)?;
            ensure!(
                w.sample_rate() == fs,
                Validation,
                "{path:?} is sampled at {} Hz, expected {fs}",
                w.sample_rate()
            );
            Ok(w.into_channels().swap_remove(0))
        }
    }
}

fn load_noises(dir: &Path) -> Result<Vec<PathBuf>> {
    let files = wav_files(dir)?;
    ensure!(!files.is_empty(), Validation, "no WAV files in noise directory {dir:?}");
    Ok(files)
}

fn write_scene(root: &Path, rel_dir: &str, mixture: &MultichannelWave, truth: &SceneTruth) -> Result<(String, Vec<String>, String)> {
    let dir = root.join(rel_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = |name: &str| format!("{rel_dir}/{name}");
    write_wav(root.join(rel("mixture.wav")), mixture, SampleFormat::Float32)?;
    let mut images = Vec::new();
    for (j, img) in truth.images.iter().enumerate() {
        let name = rel(&format!("image_{}.wav", j + 1));
        write_wav(root.join(&name), img, SampleFormat::Float32)?;
        images.push(name);
    }
    write_wav(root.join(rel("noise.wav")), &truth.noise_image, SampleFormat::Float32)?;
    Ok((rel("mixture.wav"), images, rel("noise.wav")))
}

/// Generates `count` two-speaker scenes under `out_dir` and writes
/// `out_dir/manifest.jsonl`. Output depends only on the corpus, the
/// configurations and `seed`.
pub fn generate_dataset(
    corpus: &CorpusSource,
    noise_dir: Option<&Path>,
    gen: &GeneratorConfig,
    scene_cfg: &SceneConfig,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    gen.validate()?;
    scene_cfg.stft.validate()?;
    let counts = gen.split_counts(count);
    let speakers = load_speakers(corpus)?;
    let by_split = assign_speakers(speakers, counts, gen.split_fractions, seed)?;
    let noises = match noise_dir {
        Some(d) if gen.noise => Some(load_noises(d)?),
        _ => None,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut cfg = scene_cfg.clone();
    if let Some(s) = gen.max_rir_seconds {
        cfg.rir.length = Some((s * cfg.stft.sample_rate as f64).ceil() as usize);
    }
    let fs = cfg.stft.sample_rate;

    let jobs: Vec<(usize, Split)> = (0..count)
        .map(|i| {
            let split = if i < counts[0] {
                Split::Train
            } else if i < counts[0] + counts[1] {
                Split::Dev
            } else {
                Split::Test
            };
            (i, split)
        })
        .collect();

    let entries = jobs
        .par_iter()
        .map(|&(i, split)| -> Result<ManifestEntry> {
            let seed = scene_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = &by_split[split as usize];
            let chosen: Vec<&Speaker> = pool.choose_multiple(&mut rng, 2).collect();
            let spec = draw_spec(gen, 2, seed, SPEED_OF_SOUND, &mut rng)?;
            let dry = chosen
                .iter()
                .map(|s| load_utterance(s, gen, fs, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let recording;
            let noise = match &noises {
                Some(files) => {
                    recording = read_wav(&files[rng.gen_range(0..files.len())])?;
                    NoiseInput::Recording(&recording)
                }
                None => NoiseInput::Diffuse,
            };
            let (mixture, truth) = synthesize_scene(&spec, &dry, noise, &cfg)?;
            let id = format!("{}_{i:05}", split.name());
            let (mixture_path, image_paths, noise_path) = write_scene(out_dir, &format!("{}/{id}", split.name()), &mixture, &truth)?;
            Ok(ManifestEntry {
                id,
                split,
                mixture_path,
                image_paths,
                noise_path,
                doas_deg: truth.doas_deg.clone(),
                sir_db: spec.sir_db,
                snr_db: spec.snr_db,
                room: spec.room,
                array_center: spec.array_center,
                source_positions: spec.source_positions,
                speakers: chosen.iter().map(|s| s.id.clone()).collect(),
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let path = out_dir.join("manifest.jsonl");
    let mut text = String::new();
    for e in &entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

/// A scene read back from disk, with masks and VAD recomputed.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub entry: ManifestEntry,
    pub mixture: MultichannelWave,
    pub truth: SceneTruth,
}

pub fn load_scene(root: &Path, entry: &ManifestEntry, cfg: &SceneConfig) -> Result<LoadedScene> {
    let mixture = read_wav(root.join(&entry.mixture_path))?;
    let images = entry
        .image_paths
        .iter()
        .map(|p| read_wav(root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let noise_image = read_wav(root.join(&entry.noise_path))?;
    for w in images.iter().chain([&noise_image]) {
        ensure!(
            w.len() == mixture.len() && w.channel_count() == mixture.channel_count(),
            Validation,
            "scene {} has inconsistent audio files",
            entry.id
        );
    }
    let (ideal, noise_mask) = ideal_masks(&images, &noise_image, &cfg.stft)?;
    let vad = images
        .iter()
        .map(|i| energy_vad(i, &cfg.stft, cfg.vad_threshold_db))
        .collect::<Result<_>>()?;
    let doas_deg = entry
        .source_positions
        .iter()
        .map(|p| doa_of(p, &entry.array_center))
        .collect();
    Ok(LoadedScene {
        entry: entry.clone(),
        mixture,
        truth: SceneTruth {
            images,
            noise_image,
            doas_deg,
            ideal_masks: ideal,
            noise_mask,
            vad,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::RirConfig;

    fn small_gen() -> GeneratorConfig {
        GeneratorConfig {
            room_dims_range: [4.0, 6.0],
            rt60_range: [0.3, 0.4],
            utterance_seconds: [0.6, 0.9],
            max_rir_seconds: Some(0.1),
            split_fractions: [2.0, 1.0, 1.0],
            ..Default::default()
        }
    }

    fn cfg() -> SceneConfig {
        SceneConfig {
            rir: RirConfig {
                max_order: Some(6),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn split_counts_and_speakers() {
        let g = GeneratorConfig::default();
        assert_eq!(g.split_counts(45), [30, 10, 5]);
        assert_eq!(g.split_counts(0), [0, 0, 0]);
        let only_test = GeneratorConfig {
            split_fractions: [0.0, 0.0, 1.0],
            ..Default::default()
        };
        assert_eq!(only_test.split_counts(7), [0, 0, 7]);
        let speakers = load_speakers(&CorpusSource::Synthetic { speakers: 9, seed: 1 }).unwrap();
        let parts = assign_speakers(speakers, [30, 10, 5], g.split_fractions, 3).unwrap();
        assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), 9);
        assert!(parts.iter().all(|p| p.len() >= 2));
        let mut ids: Vec<&str> = parts.iter().flatten().map(|s| s.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 9);
    }

    #[test]
    fn insufficient_speakers() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_dataset(
            &CorpusSource::Synthetic { speakers: 3, seed: 1 },
            None,
            &small_gen(),
            &cfg(),
            4,
            1,
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn empty_and_deterministic() {
        let corpus = CorpusSource::Synthetic { speakers: 6, seed: 2 };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let none = generate_dataset(&corpus, None, &small_gen(), &cfg(), 0, 5, a.path()).unwrap();
        assert!(none.is_empty());
        assert_eq!(fs::read_to_string(a.path().join("manifest.jsonl")).unwrap(), "");
        assert_eq!(fs::read_dir(a.path()).unwrap().count(), 1);

        let ea = generate_dataset(&corpus, None, &small_gen(), &cfg(), 4, 5, a.path()).unwrap();
        generate_dataset(&corpus, None, &small_gen(), &cfg(), 4, 5, b.path()).unwrap();
        let ma = fs::read(a.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, fs::read(b.path().join("manifest.jsonl")).unwrap());
        assert_eq!(load_manifest(&a.path().join("manifest.jsonl")).unwrap(), ea);

        for e in &ea {
            assert_ne!(e.speakers[0], e.speakers[1]);
            for (p, doa) in e.source_positions.iter().zip(&e.doas_deg) {
                assert!((doa_of(p, &e.array_center) - doa).abs() < 1e-9);
                let d = distance(p, &e.array_center);
                assert!((0.5..=5.5).contains(&d));
            }
            let scene = load_scene(a.path(), e, &cfg()).unwrap();
            // float32 storage: decomposition holds to single precision
            for m in 0..4 {
                for t in 0..scene.mixture.len() {
                    let sum: f64 = scene.truth.images.iter().map(|i| i.channel(m)[t]).sum::<f64>()
                        + scene.truth.noise_image.channel(m)[t];
                    assert!((scene.mixture.channel(m)[t] - sum).abs() < 1e-6);
                }
            }
        }
        // speaker-disjoint splits
        let by = |s: Split| -> Vec<String> {
            ea.iter().filter(|e| e.split == s).flat_map(|e| e.speakers.clone()).collect()
        };
        for s in by(Split::Train) {
            assert!(!by(Split::Dev).contains(&s) && !by(Split::Test).contains(&s));
        }
    }
}
