//! Two-speaker deflation: localize, mask and remove the dominant speaker,
//! then localize and mask the remainder; extract both with a rank-1 MWF.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamforming::{mask_based_r1_mwf, BeamformConfig};
use crate::dsp::{istft, stft, write_wav, Mask, MultichannelWave, SampleFormat, Spectrogram, StftConfig};
use crate::error::{ensure, Error, Result};
use crate::eval::{aggregate, evaluate_scene, Aggregates, SceneMetrics, SpeakerEstimate};
use crate::geometry::ArrayGeometry;
use crate::localization::{gcc_phat, gcc_phat_weighted, pool_posterior, DoaGrid, DoaPosterior};
use crate::models::{doa_input, mask_input, output_mask, output_posterior, Networks};
use crate::scene::{load_scene, ManifestEntry, SceneConfig};
use crate::tensor_file;

pub const MASKS_FILE: &str = "masks.bin";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

pub fn speaker_file(j: usize) -> String {
    format!("spk{}.wav", j + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DoaSource {
    Neural,
    GccPhat,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    Neural,
    Oracle,
}

impl DoaSource {
    pub const ALL: [DoaSource; 3] = [DoaSource::Oracle, DoaSource::GccPhat, DoaSource::Neural];

    pub fn name(self) -> &'static str {
        match self {
            DoaSource::Neural => "neural",
            DoaSource::GccPhat => "gcc-phat",
            DoaSource::Oracle => "oracle",
        }
    }
}

impl MaskSource {
    pub const ALL: [MaskSource; 2] = [MaskSource::Oracle, MaskSource::Neural];

    pub fn name(self) -> &'static str {
        match self {
            MaskSource::Neural => "neural",
            MaskSource::Oracle => "oracle",
        }
    }
}

impl fmt::Display for DoaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DoaSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DoaSource::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown DOA source {s:?} (neural, gcc-phat, oracle)")))
    }
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskSource::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask source {s:?} (neural, oracle)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub doa: DoaSource,
    pub mask: MaskSource,
    /// Directory holding the four network checkpoints.
    pub checkpoints: Option<PathBuf>,
    pub geometry: ArrayGeometry,
    pub stft: StftConfig,
    pub beamform: BeamformConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            doa: DoaSource::Neural,
            mask: MaskSource::Neural,
            checkpoints: None,
            geometry: ArrayGeometry::kinect_like(),
            stft: StftConfig::paper_profile(),
            beamform: BeamformConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn needs_networks(&self) -> bool {
        self.doa == DoaSource::Neural || self.mask == MaskSource::Neural
    }

    pub fn needs_oracle(&self) -> bool {
        self.doa == DoaSource::Oracle || self.mask == MaskSource::Oracle
    }

    /// Loads the networks when the configured modes use them.
    pub fn load_networks(&self) -> Result<Option<Networks>> {
        if !self.needs_networks() {
            return Ok(None);
        }
        let dir = self
            .checkpoints
            .as_ref()
            .ok_or_else(|| Error::Config("neural DOA or mask mode needs a checkpoint directory".into()))?;
        Networks::load(dir).map(Some)
    }
}

/// Ground truth available to the oracle modes.
#[derive(Debug, Clone, Copy)]
pub struct OracleInfo<'a> {
    pub doas_deg: &'a [f64],
    pub ideal_masks: &'a [Mask],
}

#[derive(Debug, Clone)]
pub struct SpeakerResult {
    pub doa_deg: Option<f64>,
    pub posterior: Option<DoaPosterior>,
    /// Mask in the mixture's time-frequency frame.
    pub mask: Mask,
    /// Channel-1 estimate, mixture length.
    pub wave: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub doa_source: DoaSource,
    pub mask_source: MaskSource,
    pub doas_deg: Vec<Option<f64>>,
    pub speaker_errors: Vec<Option<String>>,
    /// Bins where the unclamped second-speaker mask left `[0, 1]`.
    pub m2_out_of_range: usize,
    /// Bins where `1 - M1 - M2` had to be clamped.
    pub m3_clamped: usize,
    /// `max |M1 + M2 + M3 - 1|` over bins.
    pub partition_max_error: f64,
    /// Per-speaker count of filter solves that fell back to passthrough.
    pub eigen_fallbacks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub speakers: Vec<SpeakerResult>,
    pub noise_mask: Mask,
    pub diagnostics: Diagnostics,
}

fn nearest_speaker(doas: &[f64], doa: f64) -> usize {
    let mut best = 0;
    for (j, d) in doas.iter().enumerate() {
        if (d - doa).abs() < (doas[best] - doa).abs() {
            best = j;
        }
    }
    best
}

/// A stage's DOA, with the true speaker index when it came from the oracle.
type StageDoa = (f64, Option<usize>);

struct Stage<'a> {
    spec: &'a Spectrogram,
    cfg: &'a PipelineConfig,
    nets: Option<&'a Networks>,
    oracle: Option<OracleInfo<'a>>,
    grid: DoaGrid,
}

impl Stage<'_> {
    fn nets(&self) -> Result<&Networks> {
        self.nets
            .ok_or_else(|| Error::Config("neural mode selected but no networks loaded".into()))
    }

    fn oracle(&self) -> Result<OracleInfo<'_>> {
        self.oracle
            .ok_or_else(|| Error::Config("oracle mode selected but no ground truth given".into()))
    }

    /// DOA posterior of stage 1 (`remainder = None`) or stage 2.
    fn posterior(&self, remainder: Option<&Mask>) -> Result<Option<DoaPosterior>> {
        if !self.cfg.needs_networks() {
            return Ok(None);
        }
        let nets = self.nets()?;
        let net = if remainder.is_none() { &nets.doa1 } else { &nets.doa2 };
        Ok(Some(output_posterior(net.infer(doa_input(self.spec, remainder)?)?)?))
    }

    fn doa(&self, post: Option<&DoaPosterior>, remainder: Option<&Mask>, oracle_index: usize) -> Result<StageDoa> {
        match self.cfg.doa {
            DoaSource::Neural => {
                let post = post.ok_or_else(|| Error::State("neural DOA without posterior".into()))?;
                Ok((pool_posterior(post, &self.grid)?, None))
            }
            DoaSource::GccPhat => {
                let d = match remainder {
                    None => gcc_phat(self.spec, &self.cfg.geometry, &self.grid)?,
                    Some(r) => gcc_phat_weighted(self.spec, &self.cfg.geometry, &self.grid, Some(r))?,
                };
                Ok((d, None))
            }
            DoaSource::Oracle => {
                let o = self.oracle()?;
                let d = o.doas_deg.get(oracle_index).copied().ok_or_else(|| {
                    Error::Validation(format!("oracle has {} DOAs, stage needs {}", o.doas_deg.len(), oracle_index + 1))
                })?;
                Ok((d, Some(oracle_index)))
            }
        }
    }

    fn oracle_speaker(&self, doa: StageDoa) -> Result<usize> {
        let o = self.oracle()?;
        ensure!(
            !o.doas_deg.is_empty() && o.doas_deg.len() == o.ideal_masks.len(),
            Validation,
            "oracle needs one DOA per ideal mask"
        );
        Ok(doa.1.unwrap_or_else(|| nearest_speaker(o.doas_deg, doa.0)))
    }

    fn network_mask(&self, doa: f64, post: Option<&DoaPosterior>, remainder: Option<&Mask>) -> Result<Mask> {
        let nets = self.nets()?;
        let post = post.ok_or_else(|| Error::State("neural mask without posterior".into()))?;
        let net = if remainder.is_none() { &nets.mask1 } else { &nets.mask2 };
        let x = mask_input(self.spec, doa, &self.cfg.geometry, post, remainder)?;
        output_mask(net.infer(x)?)
    }
}

/// Second-speaker and residual masks derived from `M1` and the
/// remainder-relative `M̄2`.
#[derive(Debug, Clone)]
pub struct Partition {
    /// `M̄2 · (1 - M1)`.
    pub m2: Mask,
    /// `1 - M1 - M2`, clamped to `[0, 1]`.
    pub m3: Mask,
    pub m2_out_of_range: usize,
    pub m3_clamped: usize,
    pub partition_max_error: f64,
}

pub fn partition(m1: &Mask, m2_bar: &Mask) -> Result<Partition> {
    let remainder = m1.complement();
    let m2 = m2_bar.zip_with(&remainder, |a, r| a * r)?;
    let m2_out_of_range = m2.values().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    let (m3, m3_clamped) = m1.zip_with(&m2, |a, b| 1.0 - a - b)?.clamped();
    let partition_max_error = m1
        .values()
        .iter()
        .zip(m2.values())
        .zip(m3.values())
        .map(|((a, b), c)| (a + b + c - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(Partition {
        m2,
        m3,
        m2_out_of_range,
        m3_clamped,
        partition_max_error,
    })
}

/// Runs the deflation loop on one mixture.
pub fn separate(
    mixture: &MultichannelWave,
    cfg: &PipelineConfig,
    nets: Option<&Networks>,
    oracle: Option<OracleInfo<'_>>,
) -> Result<SeparationResult> {
    ensure!(
        mixture.channel_count() == cfg.geometry.mic_count(),
        Dimension,
        "mixture has {} channels, array has {} microphones",
        mixture.channel_count(),
        cfg.geometry.mic_count()
    );
    ensure!(
        mixture.sample_rate() == cfg.stft.sample_rate,
        Validation,
        "mixture sample rate {} differs from configured {}",
        mixture.sample_rate(),
        cfg.stft.sample_rate
    );
    if cfg.needs_networks() && nets.is_none() {
        return Err(Error::Config("neural mode selected but no networks loaded".into()));
    }
    if cfg.needs_oracle() && oracle.is_none() {
        return Err(Error::Config("oracle mode selected but no ground truth given".into()));
    }
    let spec = stft(mixture, &cfg.stft)?;
    let (frames, bins) = (spec.frame_count(), spec.bin_count());
    let st = Stage {
        spec: &spec,
        cfg,
        nets,
        oracle,
        grid: DoaGrid::standard(),
    };

    // Steps 1-2: localize and mask the first speaker.
    let post1 = st.posterior(None)?;
    let doa1 = st.doa(post1.as_ref(), None, 0);
    let mut errors = vec![None, None];
    let (m1, first) = match &doa1 {
        Ok(d) => match cfg.mask {
            MaskSource::Neural => (st.network_mask(d.0, post1.as_ref(), None)?, None),
            MaskSource::Oracle => {
                let j = st.oracle_speaker(*d)?;
                (st.oracle()?.ideal_masks[j].clone(), Some(j))
            }
        },
        Err(e) => {
            errors[0] = Some(e.to_string());
            (Mask::filled(frames, bins, 0.0), None)
        }
    };

    // Step 3: remainder.
    let remainder = m1.complement();

    // Steps 4-5: localize and mask the second speaker in the remainder.
    let post2 = st.posterior(Some(&remainder))?;
    let oracle_second = first.map_or(1, |j| usize::from(j == 0));
    let doa2 = st.doa(post2.as_ref(), Some(&remainder), oracle_second);
    let m2_bar = match &doa2 {
        Ok(d) => match cfg.mask {
            MaskSource::Neural => st.network_mask(d.0, post2.as_ref(), Some(&remainder))?,
            MaskSource::Oracle => {
                // Oracle counterpart of the remainder-relative mask.
                let ideal = &st.oracle()?.ideal_masks[st.oracle_speaker(*d)?];
                ideal.zip_with(&remainder, |i, r| if r > 0.0 { (i / r).clamp(0.0, 1.0) } else { 0.0 })?
            }
        },
        Err(e) => {
            errors[1] = Some(e.to_string());
            Mask::filled(frames, bins, 0.0)
        }
    };
    let Partition {
        m2,
        m3,
        m2_out_of_range,
        m3_clamped,
        partition_max_error,
    } = partition(&m1, &m2_bar)?;

    let masks = [m1, m2];
    let extracted: Vec<(Vec<f64>, usize)> = masks
        .par_iter()
        .map(|m| {
            let (est, fallbacks) = mask_based_r1_mwf(&spec, m, &cfg.beamform)?;
            let mut wave = istft(&est, &cfg.stft)?.into_channels().swap_remove(0);
            wave.resize(mixture.len(), 0.0);
            Ok((wave, fallbacks))
        })
        .collect::<Result<_>>()?;

    let doas = [doa1.ok().map(|d| d.0), doa2.ok().map(|d| d.0)];
    let posts = [post1, post2];
    let diagnostics = Diagnostics {
        doa_source: cfg.doa,
        mask_source: cfg.mask,
        doas_deg: doas.to_vec(),
        speaker_errors: errors.clone(),
        m2_out_of_range,
        m3_clamped,
        partition_max_error,
        eigen_fallbacks: extracted.iter().map(|e| e.1).collect(),
    };
    let speakers = masks
        .into_iter()
        .zip(extracted)
        .zip(posts)
        .enumerate()
        .map(|(j, ((mask, (wave, _)), posterior))| SpeakerResult {
            doa_deg: doas[j],
            posterior,
            mask,
            wave,
            error: errors[j].clone(),
        })
        .collect();
    Ok(SeparationResult {
        speakers,
        noise_mask: m3,
        diagnostics,
    })
}

#[derive(Serialize, Deserialize)]
struct MasksHeader {
    labels: Vec<String>,
    frames: usize,
    bins: usize,
}

pub fn write_masks(path: &Path, masks: &[&Mask], labels: &[&str]) -> Result<()> {
    ensure!(masks.len() == labels.len(), Dimension, "one label per mask");
    let (frames, bins) = masks.first().map_or((0, 0), |m| m.shape());
    ensure!(masks.iter().all(|m| m.shape() == (frames, bins)), Dimension, "mask shapes differ");
    let header = MasksHeader {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        frames,
        bins,
    };
    let payload: Vec<f64> = masks.iter().flat_map(|m| m.values().iter().copied()).collect();
    tensor_file::write(path, &header, &payload)
}

pub fn read_masks(path: &Path) -> Result<Vec<Mask>> {
    let (h, payload): (MasksHeader, Vec<f64>) = tensor_file::read(path)?;
    let n = h.frames * h.bins;
    if payload.len() != n * h.labels.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "mask payload does not match header".into(),
        });
    }
    if n == 0 {
        return Ok(h.labels.iter().map(|_| Mask::filled(h.frames, h.bins, 0.0)).collect());
    }
    payload.chunks(n).map(|c| Mask::new(c.to_vec(), h.frames, h.bins)).collect()
}

pub fn read_diagnostics(path: &Path) -> Result<Diagnostics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `spk1.wav`, `spk2.wav`, the masks file and `diagnostics.json`.
pub fn write_outputs(dir: &Path, result: &SeparationResult, sample_rate: u32) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (j, s) in result.speakers.iter().enumerate() {
        write_wav(
            dir.join(speaker_file(j)),
            &MultichannelWave::from_mono(s.wave.clone(), sample_rate),
            SampleFormat::Float32,
        )?;
    }
    let mut masks: Vec<&Mask> = result.speakers.iter().map(|s| &s.mask).collect();
    masks.push(&result.noise_mask);
    let labels: Vec<String> = (1..=masks.len()).map(|j| format!("m{j}")).collect();
    let labels: Vec<&str> = labels.iter().map(String::as_str).collect();
    write_masks(&dir.join(MASKS_FILE), &masks, &labels)?;
    let p = dir.join(DIAGNOSTICS_FILE);
    fs::write(&p, serde_json::to_string_pretty(&result.diagnostics)? + "\n").map_err(|e| Error::io(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub doa: DoaSource,
    pub mask: MaskSource,
    pub aggregates: Aggregates,
    pub scenes: Vec<SceneMetrics>,
    pub partition_max_error: f64,
    pub m2_out_of_range: usize,
    pub m3_clamped: usize,
}

/// Separates and scores every entry under each `(DOA, mask)` mode.
pub fn mode_matrix_run(
    dataset_root: &Path,
    entries: &[ManifestEntry],
    scene_cfg: &SceneConfig,
    base: &PipelineConfig,
    modes: &[(DoaSource, MaskSource)],
    nets: Option<&Networks>,
) -> Result<Vec<ModeSummary>> {
    let uses_nets = modes.iter().any(|(d, m)| *d == DoaSource::Neural || *m == MaskSource::Neural);
    if uses_nets && nets.is_none() {
        return Err(Error::Config("neural modes requested without checkpoints".into()));
    }
    let per_scene: Vec<Vec<(SceneMetrics, Diagnostics)>> = entries
        .par_iter()
        .map(|e| {
            let scene = load_scene(dataset_root, e, scene_cfg)?;
            let oracle = OracleInfo {
                doas_deg: &scene.truth.doas_deg,
                ideal_masks: &scene.truth.ideal_masks,
            };
            modes
                .iter()
                .map(|&(doa, mask)| {
                    let cfg = PipelineConfig { doa, mask, ..base.clone() };
                    let r = separate(&scene.mixture, &cfg, nets, Some(oracle))?;
                    let outputs: Vec<SpeakerEstimate> = r
                        .speakers
                        .iter()
                        .map(|s| SpeakerEstimate {
                            wave: s.wave.clone(),
                            mask: s.mask.clone(),
                            doa_deg: s.doa_deg,
                        })
                        .collect();
                    let m = evaluate_scene(&e.id, &outputs, scene.mixture.channel(0), &scene.truth)?;
                    Ok((m, r.diagnostics))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(modes
        .iter()
        .enumerate()
        .map(|(i, &(doa, mask))| {
            let rows: Vec<&(SceneMetrics, Diagnostics)> = per_scene.iter().map(|v| &v[i]).collect();
            let scenes: Vec<SceneMetrics> = rows.iter().map(|r| r.0.clone()).collect();
            ModeSummary {
                doa,
                mask,
                aggregates: aggregate(&scenes),
                scenes,
                partition_max_error: rows.iter().map(|r| r.1.partition_max_error).fold(0.0, f64::max),
                m2_out_of_range: rows.iter().map(|r| r.1.m2_out_of_range).sum(),
                m3_clamped: rows.iter().map(|r| r.1.m3_clamped).sum(),
            }
        })
        .collect())
}
