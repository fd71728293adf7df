use std::borrow::Cow;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use num_complex::Complex64;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{doa_input, mask_input, output_mask, output_posterior, DoaNetConfig, DoaOutput, MaskNetConfig, Stage};
use crate::dsp::{stft, Mask, Spectrogram};
use crate::error::{ensure, Error, Result};
use crate::geometry::ArrayGeometry;
use crate::localization::{doa_targets, pool_posterior, steering_delays, DoaGrid, DoaPosterior, SpeakerActivity};
use crate::neural::{loss, AdamState, Checkpoint, LossKind, Mode, Model, Tensor};
use crate::scene::{load_scene, ManifestEntry, SceneConfig, Split};
use crate::seed::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Utterances per optimizer step.
    pub batch: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub doa_net: DoaNetConfig,
    pub mask_net: MaskNetConfig,
    /// Probability of perturbing the conditioning DOA of a mask-net example.
    pub p_aug: f64,
    /// Half-width of the uniform DOA perturbation, degrees.
    pub aug_deg: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Spreads each positive DOA label over neighbouring angles with a
    /// Gaussian of this width (degrees); 0 keeps exact nearest-angle labels.
    pub label_sigma_deg: f64,
    /// Probability of training a DOA net on the mirrored scene: conjugated
    /// STFT (negated phase differences) with angles `θ -> 180° - θ`, which
    /// is exact for the direct path on a linear array. 0 disables it.
    pub mirror_prob: f64,
    /// Probability of training the first DOA net on a re-steered scene: each
    /// speaker's image is phase-shifted so its direct path arrives from a
    /// fresh uniform DOA. Exact for the far-field direct path; reflections
    /// move along with it. Costs one stored STFT per training image.
    pub resteer_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 4,
            max_epochs: 40,
            patience: 5,
            doa_net: DoaNetConfig::default(),
            mask_net: MaskNetConfig::default(),
            p_aug: 0.5,
            aug_deg: 10.0,
            grad_clip: Some(5.0),
            label_sigma_deg: 5.0,
            mirror_prob: 0.5,
            resteer_prob: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "lr must be positive");
        ensure!(self.batch > 0, Config, "batch must be positive");
        ensure!((0.0..=1.0).contains(&self.p_aug), Config, "p_aug must lie in [0, 1]");
        ensure!(self.aug_deg >= 0.0, Config, "aug_deg must be nonnegative");
        ensure!(self.label_sigma_deg >= 0.0, Config, "label_sigma_deg must be nonnegative");
        ensure!((0.0..=1.0).contains(&self.mirror_prob), Config, "mirror_prob must lie in [0, 1]");
        ensure!((0.0..=1.0).contains(&self.resteer_prob), Config, "resteer_prob must lie in [0, 1]");
        ensure!(
            self.doa_net.hidden > 0 && self.mask_net.hidden > 0,
            Config,
            "hidden sizes must be positive"
        );
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        Ok(())
    }

    pub fn specs(&self, stage: Stage) -> Vec<crate::neural::LayerSpec> {
        match stage {
            Stage::Doa1 => DoaNetConfig {
                output: DoaOutput::Sigmoid,
                ..self.doa_net.clone()
            }
            .specs(),
            Stage::Doa2 => DoaNetConfig {
                output: DoaOutput::Softmax,
                ..self.doa_net.clone()
            }
            .specs(),
            Stage::Mask1 | Stage::Mask2 => self.mask_net.specs(),
        }
    }

    fn loss_kind(stage: Stage) -> LossKind {
        match stage {
            Stage::Doa1 => LossKind::Bce,
            Stage::Doa2 => LossKind::Ce,
            Stage::Mask1 | Stage::Mask2 => LossKind::Mse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stage: Stage,
    pub epochs: usize,
    pub steps: u64,
    pub initial_dev_loss: f64,
    pub best_dev_loss: f64,
    /// `(train, dev)` loss per epoch.
    pub history: Vec<(f64, f64)>,
    pub stopped_early: bool,
}

struct TrainScene {
    spec: Spectrogram,
    masks: Vec<Mask>,
    vad: Vec<Vec<bool>>,
    doas: Vec<f64>,
    /// Per-speaker image STFTs; only kept when re-steering is enabled.
    images: Vec<Spectrogram>,
}

/// Outputs of the frozen upstream networks for one scene.
#[derive(Default)]
struct Upstream {
    post1: Option<DoaPosterior>,
    doa1: f64,
    /// Speaker claimed by the first stage.
    first: usize,
    m1: Option<Mask>,
    post2: Option<DoaPosterior>,
    doa2: f64,
}

struct Example {
    input: Tensor,
    target: Tensor,
    /// Multiplies the prediction before the loss (equivalent-mask training).
    scale: Option<Vec<f64>>,
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

/// `x + sum_j c_j (exp(-j 2 pi f (tau_c(new_j) - tau_c(old_j))) - 1)`: the
/// mixture with every speaker image moved to `new_doas`.
pub(super) fn resteer(
    mixture: &Spectrogram,
    images: &[Spectrogram],
    old_doas: &[f64],
    new_doas: &[f64],
    geometry: &ArrayGeometry,
) -> Spectrogram {
    let mut spec = mixture.clone();
    let (frames, bins) = (spec.frame_count(), spec.bin_count());
    for ((img, &old), &new) in images.iter().zip(old_doas).zip(new_doas) {
        let (a, b) = (steering_delays(geometry, old), steering_delays(geometry, new));
        for c in 0..spec.channel_count() {
            let dt = b[c] - a[c];
            let rot: Vec<Complex64> = (0..bins)
                .map(|f| Complex64::from_polar(1.0, -2.0 * PI * spec.bin_freq_hz(f) * dt) - 1.0)
                .collect();
            for t in 0..frames {
                let src = img.frame(c, t);
                for ((y, x), r) in spec.frame_mut(c, t).iter_mut().zip(src).zip(&rot) {
                    *y += x * r;
                }
            }
        }
    }
    spec
}

/// The scene's spectrogram and DOAs, re-steered or mirrored about broadside
/// when drawn.
fn augmented_view<'a>(
    scene: &'a TrainScene,
    cfg: &TrainConfig,
    geometry: &ArrayGeometry,
    rng: Option<&mut ChaCha8Rng>,
) -> (Cow<'a, Spectrogram>, Vec<f64>) {
    let Some(rng) = rng else {
        return (Cow::Borrowed(&scene.spec), scene.doas.clone());
    };
    if !scene.images.is_empty() && cfg.resteer_prob > 0.0 && rng.gen::<f64>() < cfg.resteer_prob {
        let doas: Vec<f64> = scene.doas.iter().map(|_| rng.gen_range(0.0..=180.0)).collect();
        return (Cow::Owned(resteer(&scene.spec, &scene.images, &scene.doas, &doas, geometry)), doas);
    }
    let mirror = cfg.mirror_prob > 0.0 && rng.gen::<f64>() < cfg.mirror_prob;
    if !mirror {
        return (Cow::Borrowed(&scene.spec), scene.doas.clone());
    }
    let mut spec = scene.spec.clone();
    spec.data_mut().iter_mut().for_each(|v| *v = v.conj());
    (Cow::Owned(spec), scene.doas.iter().map(|d| 180.0 - d).collect())
}

fn conditioning_doa(doa: f64, cfg: &TrainConfig, rng: Option<&mut ChaCha8Rng>) -> f64 {
    if let Some(rng) = rng {
        if cfg.aug_deg > 0.0 && rng.gen::<f64>() < cfg.p_aug {
            return (doa + rng.gen_range(-cfg.aug_deg..=cfg.aug_deg)).clamp(0.0, 180.0);
        }
    }
    doa
}

/// Gaussian spreading of the angle part of per-frame DOA targets. Rows are
/// renormalized to sum to one when `normalize` (softmax targets).
fn smooth_targets(targets: &mut [f64], grid: &DoaGrid, sigma: f64, normalize: bool) {
    let (classes, angles) = (grid.class_count(), grid.angle_count());
    for row in targets.chunks_mut(classes) {
        let peaks: Vec<usize> = (0..angles).filter(|&k| row[k] >= 1.0).collect();
        if sigma > 0.0 && !peaks.is_empty() {
            for (k, v) in row[..angles].iter_mut().enumerate() {
                *v = peaks
                    .iter()
                    .map(|&p| (-((k as f64 - p as f64).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .fold(0.0, f64::max);
            }
        }
        if normalize {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }
}

fn mask_tensor(m: &Mask) -> Result<Tensor> {
    Tensor::new(vec![m.frame_count(), m.bin_count()], m.values().to_vec())
}

fn build_example(
    stage: Stage,
    scene: &TrainScene,
    up: &Upstream,
    cfg: &TrainConfig,
    geometry: &ArrayGeometry,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Example> {
    let grid = DoaGrid::standard();
    let frames = scene.spec.frame_count();
    let missing = || Error::State(format!("{stage} needs upstream outputs"));
    match stage {
        Stage::Doa1 => {
            let (spec, doas) = augmented_view(scene, cfg, geometry, rng);
            let speakers: Vec<_> = doas
                .iter()
                .zip(&scene.vad)
                .map(|(&doa_deg, vad)| SpeakerActivity { doa_deg, vad })
                .collect();
            let mut target = doa_targets(&speakers, &grid, frames)?;
            smooth_targets(&mut target, &grid, cfg.label_sigma_deg, false);
            Ok(Example {
                input: doa_input(&spec, None)?,
                target: Tensor::new(vec![frames, grid.class_count()], target)?,
                scale: None,
            })
        }
        Stage::Mask1 => {
            let post = up.post1.as_ref().ok_or_else(missing)?;
            let doa = conditioning_doa(up.doa1, cfg, rng);
            let j = nearest_speaker(&scene.doas, doa);
            Ok(Example {
                input: mask_input(&scene.spec, doa, geometry, post, None)?,
                target: mask_tensor(&scene.masks[j])?,
                scale: None,
            })
        }
        Stage::Doa2 => {
            let m1 = up.m1.as_ref().ok_or_else(missing)?;
            let other = 1 - up.first;
            // re-steering would invalidate the upstream mask; images are only
            // kept for the first stage
            let (spec, doas) = augmented_view(scene, cfg, geometry, rng);
            let mut target = doa_targets(
                &[SpeakerActivity {
                    doa_deg: doas[other],
                    vad: &scene.vad[other],
                }],
                &grid,
                frames,
            )?;
            smooth_targets(&mut target, &grid, cfg.label_sigma_deg, true);
            Ok(Example {
                input: doa_input(&spec, Some(&m1.complement()))?,
                target: Tensor::new(vec![frames, grid.class_count()], target)?,
                scale: None,
            })
        }
        Stage::Mask2 => {
            let m1 = up.m1.as_ref().ok_or_else(missing)?;
            let post = up.post2.as_ref().ok_or_else(missing)?;
            let doa = conditioning_doa(up.doa2, cfg, rng);
            let remainder = m1.complement();
            let other = 1 - up.first;
            Ok(Example {
                input: mask_input(&scene.spec, doa, geometry, post, Some(&remainder))?,
                target: mask_tensor(&scene.masks[other])?,
                scale: Some(remainder.into_values()),
            })
        }
    }
}

/// Loss and, in training mode, the parameter gradient of one example.
fn example_loss(model: &Model, ex: Example, kind: LossKind, mode: Mode) -> Result<(f64, Option<Vec<f64>>)> {
    let train = matches!(mode, Mode::Train { .. });
    let (mut pred, tape) = model.forward(ex.input, mode)?;
    if let Some(s) = &ex.scale {
        ensure!(s.len() == pred.len(), Dimension, "loss scale does not match prediction");
        pred.data_mut().iter_mut().zip(s).for_each(|(p, s)| *p *= s);
    }
    let (l, mut dl) = loss(kind, &pred, &ex.target)?;
    if !train {
        return Ok((l, None));
    }
    if let Some(s) = &ex.scale {
        dl.data_mut().iter_mut().zip(s).for_each(|(d, s)| *d *= s);
    }
    Ok((l, Some(model.backward(&tape, dl)?.0)))
}

fn load_scenes(
    root: &Path,
    entries: &[&ManifestEntry],
    scene_cfg: &SceneConfig,
    keep_images: bool,
) -> Result<Vec<TrainScene>> {
    entries
        .par_iter()
        .map(|e| {
            let loaded = load_scene(root, e, scene_cfg)?;
            ensure!(
                loaded.truth.doas_deg.len() == 2,
                Validation,
                "scene {} has {} speakers; training needs 2",
                e.id,
                loaded.truth.doas_deg.len()
            );
            let images = if keep_images {
                loaded
                    .truth
                    .images
                    .iter()
                    .map(|img| stft(img, &scene_cfg.stft))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            Ok(TrainScene {
                spec: stft(&loaded.mixture, &scene_cfg.stft)?,
                masks: loaded.truth.ideal_masks,
                vad: loaded.truth.vad,
                doas: loaded.truth.doas_deg,
                images,
            })
        })
        .collect()
}

/// Runs the frozen networks of the stages before `stage` on every scene.
fn upstream(stage: Stage, scenes: &[TrainScene], nets: &[Option<Model>; 4], geometry: &ArrayGeometry) -> Result<Vec<Upstream>> {
    let grid = DoaGrid::standard();
    let need = |s: Stage| -> Result<&Model> {
        nets[s.index()]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("stage {stage} needs a trained {s} checkpoint")))
    };
    let doa1 = if stage.index() > 0 { Some(need(Stage::Doa1)?) } else { None };
    let mask1 = if stage.index() > 1 { Some(need(Stage::Mask1)?) } else { None };
    let doa2 = if stage.index() > 2 { Some(need(Stage::Doa2)?) } else { None };
    scenes
        .par_iter()
        .map(|s| {
            let mut up = Upstream::default();
            if let Some(net) = doa1 {
                let post = output_posterior(net.infer(doa_input(&s.spec, None)?)?)?;
                up.doa1 = pool_posterior(&post, &grid)?;
                up.first = nearest_speaker(&s.doas, up.doa1);
                up.post1 = Some(post);
            }
            if let (Some(net), Some(post)) = (mask1, &up.post1) {
                up.m1 = Some(output_mask(net.infer(mask_input(&s.spec, up.doa1, geometry, post, None)?)?)?);
            }
            if let (Some(net), Some(m1)) = (doa2, &up.m1) {
                let post = output_posterior(net.infer(doa_input(&s.spec, Some(&m1.complement()))?)?)?;
                up.doa2 = pool_posterior(&post, &grid)?;
                up.post2 = Some(post);
            }
            Ok(up)
        })
        .collect()
}

fn dev_loss(
    stage: Stage,
    model: &Model,
    scenes: &[TrainScene],
    ups: &[Upstream],
    cfg: &TrainConfig,
    geometry: &ArrayGeometry,
) -> Result<f64> {
    let kind = TrainConfig::loss_kind(stage);
    let losses: Vec<f64> = scenes
        .par_iter()
        .zip(ups)
        .map(|(s, u)| {
            let ex = build_example(stage, s, u, cfg, geometry, None)?;
            Ok(example_loss(model, ex, kind, Mode::Eval)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Starts the output bias of a DOA network at the training-set class
/// frequencies (log-odds for sigmoid outputs, log-probabilities for softmax).
/// From a zero bias, the first Adam steps drive every class down at once,
/// which saturates the recurrent layer before any input dependence is learnt.
fn init_prior_bias(stage: Stage, model: &mut Model, scenes: &[TrainScene], ups: &[Upstream]) -> Result<()> {
    let grid = DoaGrid::standard();
    let (mut active, mut silent, mut frames) = (0usize, 0usize, 0usize);
    for (s, u) in scenes.iter().zip(ups) {
        let speakers: Vec<usize> = match stage {
            Stage::Doa1 => (0..s.doas.len()).collect(),
            Stage::Doa2 => vec![1 - u.first],
            _ => return Ok(()),
        };
        for t in 0..s.spec.frame_count() {
            let n = speakers.iter().filter(|&&j| s.vad[j].get(t).copied().unwrap_or(false)).count();
            active += n;
            silent += usize::from(n == 0);
            frames += 1;
        }
    }
    if frames == 0 {
        return Ok(());
    }
    let clamp = |p: f64| p.clamp(1e-6, 1.0 - 1e-6);
    let angle = clamp(active as f64 / (frames * grid.angle_count()) as f64);
    let none = clamp(silent as f64 / frames as f64);
    let (a, b) = match stage {
        Stage::Doa1 => ((angle / (1.0 - angle)).ln(), (none / (1.0 - none)).ln()),
        _ => (angle.ln(), none.ln()),
    };
    let last = model
        .specs()
        .iter()
        .rposition(|l| matches!(l, crate::neural::LayerSpec::Linear { .. }))
        .ok_or_else(|| Error::State("DOA network has no output layer".into()))?;
    let range = model.layer_param_range(last);
    let classes = grid.class_count();
    let bias = &mut model.params_mut()[range.end - classes..range.end];
    bias.iter_mut().for_each(|v| *v = a);
    bias[grid.non_speech_class()] = b;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    stage: Stage,
    epoch: usize,
    best_dev_loss: f64,
    initial_dev_loss: f64,
    bad_epochs: usize,
    history: Vec<(f64, f64)>,
}

#[allow(clippy::too_many_arguments)]
fn fit(
    stage: Stage,
    cfg: &TrainConfig,
    train: &[TrainScene],
    train_up: &[Upstream],
    dev: &[TrainScene],
    dev_up: &[Upstream],
    geometry: &ArrayGeometry,
    out_dir: &Path,
    resume: bool,
    log: &(dyn Fn(&str) + Sync),
) -> Result<FitReport> {
    let kind = TrainConfig::loss_kind(stage);
    let specs = cfg.specs(stage);
    let best_path = stage.checkpoint_path(out_dir);
    let last_path = stage.resume_path(out_dir);
    let init_seed = substream(cfg.seed, "init", stage.index() as u64);

    let (mut model, mut adam, mut state) = if resume && last_path.exists() {
        let last = Checkpoint::load(&last_path)?;
        ensure!(
            last.model.specs() == specs.as_slice(),
            Config,
            "{last_path:?} was trained with a different architecture"
        );
        let meta: ResumeMeta = serde_json::from_value(last.meta.clone())?;
        let adam = last
            .optimizer
            .ok_or_else(|| Error::State(format!("{last_path:?} has no optimizer state")))?;
        ensure!(best_path.exists(), State, "{best_path:?} is missing; cannot resume");
        log(&format!("{stage}: resuming after epoch {} (step {})", meta.epoch, last.step));
        (last.model, adam, meta)
    } else {
        let mut model = Model::new(specs, init_seed)?;
        init_prior_bias(stage, &mut model, train, train_up)?;
        let init = dev_loss(stage, &model, dev, dev_up, cfg, geometry)?;
        ensure!(init.is_finite(), State, "{stage} initial dev loss is not finite");
        let adam = AdamState::new(model.param_count(), cfg.lr);
        let state = ResumeMeta {
            stage,
            epoch: 0,
            best_dev_loss: init,
            initial_dev_loss: init,
            bad_epochs: 0,
            history: Vec::new(),
        };
        log(&format!("{stage}: {} parameters, initial dev loss {init:.5}", model.param_count()));
        save_best(&model, stage, cfg, &state, adam.step, &best_path)?;
        (model, adam, state)
    };

    let mut stopped_early = state.bad_epochs >= cfg.patience;
    while state.epoch < cfg.max_epochs && !stopped_early {
        let epoch = state.epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(substream(cfg.seed, &format!("shuffle/{stage}"), epoch)));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let step = adam.step;
            let results: Vec<(f64, Vec<f64>)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, &format!("aug/{stage}/{step}"), i as u64));
                    let ex = build_example(stage, &train[i], &train_up[i], cfg, geometry, Some(&mut rng))?;
                    let mode = Mode::Train {
                        seed: substream(cfg.seed, &format!("dropout/{stage}/{step}"), i as u64),
                    };
                    let (l, g) = example_loss(&model, ex, kind, mode)?;
                    Ok((l, g.unwrap_or_default()))
                })
                .collect::<Result<_>>()?;
            let mut grads = vec![0.0; model.param_count()];
            for (l, g) in &results {
                epoch_loss += l;
                grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let n = results.len() as f64;
            grads.iter_mut().for_each(|g| *g /= n);
            ensure!(grads.iter().all(|g| g.is_finite()), State, "{stage}: non-finite gradient at step {step}");
            if let Some(c) = cfg.grad_clip {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    grads.iter_mut().for_each(|g| *g *= c / norm);
                }
            }
            adam.step(model.params_mut(), &grads)?;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let dev = dev_loss(stage, &model, dev, dev_up, cfg, geometry)?;
        state.epoch += 1;
        state.history.push((train_loss, dev));
        if dev < state.best_dev_loss {
            state.best_dev_loss = dev;
            state.bad_epochs = 0;
            save_best(&model, stage, cfg, &state, adam.step, &best_path)?;
        } else {
            state.bad_epochs += 1;
        }
        stopped_early = state.bad_epochs >= cfg.patience;
        log(&format!(
            "{stage}: epoch {} train {train_loss:.5} dev {dev:.5} best {:.5}",
            state.epoch, state.best_dev_loss
        ));
        Checkpoint {
            model: model.clone(),
            seed: cfg.seed,
            step: adam.step,
            optimizer: Some(adam.clone()),
            meta: serde_json::to_value(&state)?,
        }
        .save(&last_path)?;
    }
    Ok(FitReport {
        stage,
        epochs: state.epoch,
        steps: adam.step,
        initial_dev_loss: state.initial_dev_loss,
        best_dev_loss: state.best_dev_loss,
        history: state.history,
        stopped_early,
    })
}

fn save_best(model: &Model, stage: Stage, cfg: &TrainConfig, state: &ResumeMeta, step: u64, path: &Path) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        seed: cfg.seed,
        step,
        optimizer: None,
        meta: serde_json::json!({
            "stage": stage,
            "epoch": state.epoch,
            "dev_loss": state.best_dev_loss,
            "train_config": cfg,
        }),
    }
    .save(path)
}

fn split_entries(entries: &[ManifestEntry], split: Split) -> Vec<&ManifestEntry> {
    entries.iter().filter(|e| e.split == split).collect()
}

/// Trains the requested stages in pipeline order, each against frozen
/// checkpoints of the stages before it (trained in this call or already in
/// `out_dir`). Writes `<stage>.ckpt` (best dev loss) and `<stage>.last.ckpt`.
#[allow(clippy::too_many_arguments)]
pub fn train_sequence(
    dataset_root: &Path,
    entries: &[ManifestEntry],
    scene_cfg: &SceneConfig,
    cfg: &TrainConfig,
    stages: &[Stage],
    out_dir: &Path,
    resume: bool,
    log: &(dyn Fn(&str) + Sync),
) -> Result<Vec<FitReport>> {
    cfg.validate()?;
    let train_e = split_entries(entries, Split::Train);
    let dev_e = split_entries(entries, Split::Dev);
    ensure!(
        !train_e.is_empty() && !dev_e.is_empty(),
        Validation,
        "training needs non-empty train and dev splits ({} / {} scenes)",
        train_e.len(),
        dev_e.len()
    );
    let mut stages = stages.to_vec();
    stages.sort_by_key(|s| s.index());
    stages.dedup();
    let first = match stages.first() {
        Some(s) => *s,
        None => return Ok(Vec::new()),
    };
    // Fail on missing upstream checkpoints before any expensive work.
    for s in &Stage::ORDER[..first.index()] {
        let p = s.checkpoint_path(out_dir);
        ensure!(p.exists(), Config, "stage {first} needs a trained {s} checkpoint at {p:?}");
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    log(&format!("loading {} train and {} dev scenes", train_e.len(), dev_e.len()));
    let keep_images = cfg.resteer_prob > 0.0 && first == Stage::Doa1;
    let train = load_scenes(dataset_root, &train_e, scene_cfg, keep_images)?;
    let dev = load_scenes(dataset_root, &dev_e, scene_cfg, false)?;
    let mut reports = Vec::new();
    for stage in stages {
        let mut nets: [Option<Model>; 4] = Default::default();
        for s in &Stage::ORDER[..stage.index()] {
            let p = s.checkpoint_path(out_dir);
            ensure!(p.exists(), Config, "stage {stage} needs a trained {s} checkpoint at {p:?}");
            nets[s.index()] = Some(Checkpoint::load(&p)?.model);
        }
        let train_up = upstream(stage, &train, &nets, &scene_cfg.geometry)?;
        let dev_up = upstream(stage, &dev, &nets, &scene_cfg.geometry)?;
        reports.push(fit(
            stage,
            cfg,
            &train,
            &train_up,
            &dev,
            &dev_up,
            &scene_cfg.geometry,
            out_dir,
            resume,
            log,
        )?);
    }
    Ok(reports)
}

/// Trains a single stage; see [`train_sequence`].
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    dataset_root: &Path,
    entries: &[ManifestEntry],
    scene_cfg: &SceneConfig,
    cfg: &TrainConfig,
    stage: Stage,
    out_dir: &Path,
    resume: bool,
    log: &(dyn Fn(&str) + Sync),
) -> Result<FitReport> {
    let mut r = train_sequence(dataset_root, entries, scene_cfg, cfg, &[stage], out_dir, resume, log)?;
    Ok(r.remove(0))
}
