use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use slogd::dsp::{read_wav, stft};
use slogd::eval::{doa_error, evaluate_split, write_report};
use slogd::localization::{gcc_phat, pool_posterior, DoaGrid};
use slogd::models::{doa_input, output_posterior, train_sequence, Networks, Stage};
use slogd::pipeline::{separate, write_outputs, DoaSource, MaskSource, OracleInfo};
use slogd::scene::{generate_dataset, load_manifest, load_scene, CorpusSource, ManifestEntry, Split};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(slogd::Error::from)? + "\n";
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {path:?}: {e}")))
}

fn manifest(cfg: &RunConfig, data: &Path) -> Result<(PathBuf, Vec<ManifestEntry>), CliError> {
    let root = cfg.under_root(data);
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(CliError::Config(format!("no dataset manifest at {path:?}")));
    }
    let entries = load_manifest(&path)?;
    Ok((root, entries))
}

fn select(entries: &[ManifestEntry], split: Option<Split>) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .cloned()
        .collect()
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let out = cfg.under_root(out);
    let corpus = match &cfg.simulate.corpus_dir {
        Some(dir) if !dir.is_dir() => {
            return Err(CliError::Config(format!("corpus directory {dir:?} does not exist")));
        }
        Some(dir) => CorpusSource::Directory(dir.clone()),
        None => CorpusSource::Synthetic {
            speakers: cfg.simulate.synthetic_speakers,
            seed: slogd::seed::substream(cfg.seed, "speakers", 0),
        },
    };
    if let Some(dir) = cfg.simulate.noise_dir.as_ref().filter(|d| !d.is_dir()) {
        return Err(CliError::Config(format!("noise directory {dir:?} does not exist")));
    }
    let entries = generate_dataset(
        &corpus,
        cfg.simulate.noise_dir.as_deref(),
        &cfg.generator,
        &cfg.scene,
        cfg.simulate.count,
        cfg.seed,
        &out,
    )?;
    cfg.write_resolved(&out)?;
    eprintln!("simulated {} scenes into {}", entries.len(), out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, stages: &[Stage], resume: bool) -> Result<(), CliError> {
    let (root, entries) = manifest(cfg, data)?;
    let out = cfg.under_root(out);
    cfg.write_resolved(&out)?;
    let log = |m: &str| eprintln!("{m}");
    let reports = train_sequence(&root, &entries, &cfg.scene, &cfg.train, stages, &out, resume, &log)?;
    write_json(&out.join("train_report.json"), &reports)
}

fn networks(cfg: &RunConfig, checkpoints: Option<&Path>) -> Result<Option<Networks>, CliError> {
    let mut p = cfg.pipeline.clone();
    if let Some(c) = checkpoints {
        p.checkpoints = Some(c.to_path_buf());
    }
    p.checkpoints = p.checkpoints.map(|c| cfg.under_root(&c));
    Ok(p.load_networks()?)
}

pub enum Input<'a> {
    Wav(&'a Path),
    Dataset { data: &'a Path, split: Option<Split> },
}

pub fn run_separate(cfg: &RunConfig, input: Input<'_>, checkpoints: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let out = cfg.under_root(out);
    let nets = networks(cfg, checkpoints)?;
    let p = &cfg.pipeline;
    match input {
        Input::Wav(path) => {
            if p.needs_oracle() {
                return Err(CliError::Config("oracle modes need a dataset with ground truth".into()));
            }
            let mixture = read_wav(path)?;
            let r = separate(&mixture, p, nets.as_ref(), None)?;
            write_outputs(&out, &r, mixture.sample_rate())?;
            cfg.write_resolved(&out)?;
        }
        Input::Dataset { data, split } => {
            let (root, entries) = manifest(cfg, data)?;
            let chosen = select(&entries, split);
            cfg.write_resolved(&out)?;
            chosen.par_iter().try_for_each(|e| -> Result<(), CliError> {
                let scene = load_scene(&root, e, &cfg.scene)?;
                let oracle = OracleInfo {
                    doas_deg: &scene.truth.doas_deg,
                    ideal_masks: &scene.truth.ideal_masks,
                };
                let r = separate(&scene.mixture, p, nets.as_ref(), Some(oracle))?;
                write_outputs(&out.join(&e.id), &r, scene.mixture.sample_rate())?;
                Ok(())
            })?;
            eprintln!("separated {} scenes into {}", chosen.len(), out.display());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LocalizeRow {
    id: String,
    doa_deg: f64,
    true_doas_deg: Vec<f64>,
    /// Error to the nearest true speaker.
    abs_err_deg: Option<f64>,
}

pub fn localize(
    cfg: &RunConfig,
    input: Input<'_>,
    method: DoaSource,
    checkpoints: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let out = cfg.under_root(out);
    let nets = match method {
        DoaSource::Neural => {
            let p = RunConfig {
                pipeline: slogd::pipeline::PipelineConfig {
                    doa: DoaSource::Neural,
                    mask: MaskSource::Neural,
                    ..cfg.pipeline.clone()
                },
                ..cfg.clone()
            };
            networks(&p, checkpoints)?
        }
        DoaSource::GccPhat => None,
        DoaSource::Oracle => return Err(CliError::Config("localize supports neural and gcc-phat".into())),
    };
    let grid = DoaGrid::standard();
    let estimate = |mixture: &slogd::dsp::MultichannelWave| -> Result<f64, CliError> {
        if mixture.channel_count() != cfg.scene.geometry.mic_count() {
            return Err(CliError::Core(slogd::Error::Dimension(format!(
                "input has {} channels, array has {} microphones",
                mixture.channel_count(),
                cfg.scene.geometry.mic_count()
            ))));
        }
        let spec = stft(mixture, &cfg.scene.stft)?;
        Ok(match &nets {
            Some(n) => pool_posterior(&output_posterior(n.doa1.infer(doa_input(&spec, None)?)?)?, &grid)?,
            None => gcc_phat(&spec, &cfg.scene.geometry, &grid)?,
        })
    };
    let rows: Vec<LocalizeRow> = match input {
        Input::Wav(path) => {
            let doa = estimate(&read_wav(path)?)?;
            vec![LocalizeRow {
                id: path.display().to_string(),
                doa_deg: doa,
                true_doas_deg: Vec::new(),
                abs_err_deg: None,
            }]
        }
        Input::Dataset { data, split } => {
            let (root, entries) = manifest(cfg, data)?;
            select(&entries, split)
                .par_iter()
                .map(|e| -> Result<LocalizeRow, CliError> {
                    let scene = load_scene(&root, e, &cfg.scene)?;
                    let doa = estimate(&scene.mixture)?;
                    let err = e
                        .doas_deg
                        .iter()
                        .map(|&t| doa_error(doa, t))
                        .collect::<slogd::Result<Vec<f64>>>()?
                        .into_iter()
                        .reduce(f64::min);
                    Ok(LocalizeRow {
                        id: e.id.clone(),
                        doa_deg: doa,
                        true_doas_deg: e.doas_deg.clone(),
                        abs_err_deg: err,
                    })
                })
                .collect::<Result<_, _>>()?
        }
    };
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("cannot create {out:?}: {e}")))?;
    cfg.write_resolved(&out)?;
    write_json(&out.join("localize.json"), &rows)
}

pub fn evaluate(
    cfg: &RunConfig,
    results: &Path,
    data: &Path,
    split: Split,
    out: &Path,
    plot_data: bool,
) -> Result<(), CliError> {
    let (root, entries) = manifest(cfg, data)?;
    let results = cfg.under_root(results);
    if !results.is_dir() {
        return Err(CliError::Config(format!("results directory {results:?} does not exist")));
    }
    let out = cfg.under_root(out);
    let report = evaluate_split(&results, &root, &entries, split, &cfg.scene)?;
    write_report(&report, &out, plot_data)?;
    cfg.write_resolved(&out)?;
    if !report.missing.is_empty() {
        eprintln!("{} scenes without outputs: {}", report.missing.len(), report.missing.join(", "));
    }
    let a = &report.aggregates;
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "{} scenes: median SI-SDR {} dB, median improvement {} dB, duplicate rate {}",
        report.scenes.len(),
        show(a.median_si_sdr_db),
        show(a.median_improvement_db),
        show(a.duplicate_rate)
    );
    Ok(())
}
