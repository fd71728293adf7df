//! Signal-level metrics, the duplicate-speaker diagnostic, and split reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, Mask};
use crate::error::{ensure, Error, Result};
use crate::pipeline::{read_diagnostics, read_masks};
use crate::scene::{load_scene, ManifestEntry, SceneConfig, SceneTruth, Split};

/// SI-SDR values are clipped to `±SI_SDR_CAP_DB` so aggregates stay finite.
pub const SI_SDR_CAP_DB: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB over the common prefix of both signals.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let n = estimate.len().min(reference.len());
    let (e, s) = (&estimate[..n], &reference[..n]);
    let ss = dot(s, s);
    if ss <= 0.0 || !ss.is_finite() {
        return Err(Error::UndefinedMetric("SI-SDR reference has no energy".into()));
    }
    let alpha = dot(e, s) / ss;
    let target = alpha * alpha * ss;
    let residual: f64 = s.iter().zip(e).map(|(s, e)| (alpha * s - e).powi(2)).sum();
    let db = if target <= 0.0 {
        -SI_SDR_CAP_DB
    } else if residual <= 0.0 {
        SI_SDR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

fn closest_ideal(mask: &Mask, ideals: &[Mask]) -> Result<usize> {
    let mut best = (0, f64::INFINITY);
    for (j, ideal) in ideals.iter().enumerate() {
        let mse = mask.mse(ideal)?;
        if mse < best.1 {
            best = (j, mse);
        }
    }
    Ok(best.0)
}

/// Whether both estimated masks are closest (in MSE) to the same true mask.
pub fn duplicate_speaker_diag(m1: &Mask, m2: &Mask, ideals: &[Mask]) -> Result<bool> {
    ensure!(!ideals.is_empty(), Dimension, "no ideal masks given");
    Ok(closest_ideal(m1, ideals)? == closest_ideal(m2, ideals)?)
}

/// Absolute DOA error on the half-circle grid (no wraparound).
pub fn doa_error(est_deg: f64, true_deg: f64) -> Result<f64> {
    for v in [est_deg, true_deg] {
        ensure!((0.0..=180.0).contains(&v), Validation, "DOA {v} outside [0, 180]");
    }
    Ok((est_deg - true_deg).abs())
}

/// One separated speaker as seen by the evaluator.
#[derive(Debug, Clone)]
pub struct SpeakerEstimate {
    pub wave: Vec<f64>,
    pub mask: Mask,
    pub doa_deg: Option<f64>,
}

/// Per-scene metrics, indexed by reference speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub id: String,
    /// Output index assigned to each reference speaker.
    pub assignment: Vec<usize>,
    pub si_sdr_db: Vec<f64>,
    pub mixture_si_sdr_db: Vec<f64>,
    pub doa_abs_err_deg: Vec<Option<f64>>,
    pub mask_mse: Vec<f64>,
    pub duplicate_speaker: bool,
}

impl SceneMetrics {
    pub fn improvement_db(&self) -> impl Iterator<Item = f64> + '_ {
        self.si_sdr_db.iter().zip(&self.mixture_si_sdr_db).map(|(a, b)| a - b)
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n <= 1 {
        return vec![(0..n).collect()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Scores separated outputs against the channel-1 spatial images, choosing the
/// output-to-speaker assignment with the highest mean SI-SDR.
pub fn evaluate_scene(id: &str, outputs: &[SpeakerEstimate], mixture_ch1: &[f64], truth: &SceneTruth) -> Result<SceneMetrics> {
    let refs: Vec<&[f64]> = truth.images.iter().map(|w| w.channel(0)).collect();
    ensure!(
        outputs.len() == refs.len(),
        Dimension,
        "{} outputs for {} reference speakers",
        outputs.len(),
        refs.len()
    );
    // sdr[k][j]: output k against reference j
    let sdr: Vec<Vec<f64>> = outputs
        .iter()
        .map(|o| refs.iter().map(|r| si_sdr(&o.wave, r)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in permutations(refs.len()) {
        // perm[j] = output assigned to reference j
        let score: f64 = perm.iter().enumerate().map(|(j, &k)| sdr[k][j]).sum();
        if best.as_ref().is_none_or(|(_, s)| score > *s) {
            best = Some((perm, score));
        }
    }
    let assignment = best.map(|b| b.0).unwrap_or_default();
    let mut m = SceneMetrics {
        id: id.to_string(),
        assignment: assignment.clone(),
        si_sdr_db: Vec::new(),
        mixture_si_sdr_db: Vec::new(),
        doa_abs_err_deg: Vec::new(),
        mask_mse: Vec::new(),
        duplicate_speaker: false,
    };
    for (j, &k) in assignment.iter().enumerate() {
        m.si_sdr_db.push(sdr[k][j]);
        m.mixture_si_sdr_db.push(si_sdr(mixture_ch1, refs[j])?);
        m.doa_abs_err_deg.push(match outputs[k].doa_deg {
            Some(d) => Some(doa_error(d, truth.doas_deg[j])?),
            None => None,
        });
        m.mask_mse.push(outputs[k].mask.mse(&truth.ideal_masks[j])?);
    }
    if outputs.len() >= 2 {
        m.duplicate_speaker = duplicate_speaker_diag(&outputs[0].mask, &outputs[1].mask, &truth.ideal_masks)?;
    }
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub scenes: usize,
    /// Statistics below pool all (scene, speaker) values.
    pub median_si_sdr_db: Option<f64>,
    pub mean_si_sdr_db: Option<f64>,
    pub median_mixture_si_sdr_db: Option<f64>,
    pub median_improvement_db: Option<f64>,
    pub mean_improvement_db: Option<f64>,
    pub median_doa_abs_err_deg: Option<f64>,
    pub mean_doa_abs_err_deg: Option<f64>,
    pub mean_mask_mse: Option<f64>,
    pub duplicate_rate: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn aggregate(scenes: &[SceneMetrics]) -> Aggregates {
    let sdr: Vec<f64> = scenes.iter().flat_map(|s| s.si_sdr_db.iter().copied()).collect();
    let mix: Vec<f64> = scenes.iter().flat_map(|s| s.mixture_si_sdr_db.iter().copied()).collect();
    let imp: Vec<f64> = scenes.iter().flat_map(|s| s.improvement_db()).collect();
    let doa: Vec<f64> = scenes.iter().flat_map(|s| s.doa_abs_err_deg.iter().flatten().copied()).collect();
    let mse: Vec<f64> = scenes.iter().flat_map(|s| s.mask_mse.iter().copied()).collect();
    let dup: Vec<f64> = scenes.iter().map(|s| f64::from(u8::from(s.duplicate_speaker))).collect();
    Aggregates {
        scenes: scenes.len(),
        median_si_sdr_db: median(&sdr),
        mean_si_sdr_db: mean(&sdr),
        median_mixture_si_sdr_db: median(&mix),
        median_improvement_db: median(&imp),
        mean_improvement_db: mean(&imp),
        median_doa_abs_err_deg: median(&doa),
        mean_doa_abs_err_deg: mean(&doa),
        mean_mask_mse: mean(&mse),
        duplicate_rate: mean(&dup),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub scenes: Vec<SceneMetrics>,
    /// Scenes of the split without complete separation outputs.
    pub missing: Vec<String>,
    pub aggregates: Aggregates,
}

/// Loads one scene's separation outputs; `None` when any file is absent.
fn load_outputs(dir: &Path) -> Result<Option<Vec<SpeakerEstimate>>> {
    let masks_path = dir.join(crate::pipeline::MASKS_FILE);
    let diag_path = dir.join(crate::pipeline::DIAGNOSTICS_FILE);
    if !masks_path.exists() || !diag_path.exists() {
        return Ok(None);
    }
    let masks = read_masks(&masks_path)?;
    let diag = read_diagnostics(&diag_path)?;
    let speakers = diag.doas_deg.len();
    ensure!(masks.len() > speakers, Dimension, "{masks_path:?} lacks speaker masks");
    let mut out = Vec::with_capacity(speakers);
    for (j, mask) in masks.into_iter().take(speakers).enumerate() {
        let wav = dir.join(crate::pipeline::speaker_file(j));
        if !wav.exists() {
            return Ok(None);
        }
        out.push(SpeakerEstimate {
            wave: read_wav(&wav)?.channel(0).to_vec(),
            mask,
            doa_deg: diag.doas_deg[j],
        });
    }
    Ok(Some(out))
}

/// Scores every scene of `split` found under `results_dir/<scene id>/`.
pub fn evaluate_split(
    results_dir: &Path,
    dataset_root: &Path,
    entries: &[ManifestEntry],
    split: Split,
    scene_cfg: &SceneConfig,
) -> Result<MetricReport> {
    let chosen: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == split).collect();
    let rows: Vec<Option<SceneMetrics>> = chosen
        .par_iter()
        .map(|e| {
            let Some(outputs) = load_outputs(&results_dir.join(&e.id))? else {
                return Ok(None);
            };
            let scene = load_scene(dataset_root, e, scene_cfg)?;
            evaluate_scene(&e.id, &outputs, scene.mixture.channel(0), &scene.truth).map(Some)
        })
        .collect::<Result<_>>()?;
    let mut scenes = Vec::new();
    let mut missing = Vec::new();
    for (e, row) in chosen.iter().zip(rows) {
        match row {
            Some(m) => scenes.push(m),
            None => missing.push(e.id.clone()),
        }
    }
    let aggregates = aggregate(&scenes);
    Ok(MetricReport {
        split,
        scenes,
        missing,
        aggregates,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-scene CSV, one row per scene and reference speaker.
pub fn report_csv(report: &MetricReport) -> String {
    let mut out = String::from("id,speaker,output,si_sdr_db,mixture_si_sdr_db,improvement_db,doa_abs_err_deg,mask_mse,duplicate_speaker\n");
    for s in &report.scenes {
        for j in 0..s.si_sdr_db.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                s.id,
                j + 1,
                s.assignment[j] + 1,
                s.si_sdr_db[j],
                s.mixture_si_sdr_db[j],
                s.si_sdr_db[j] - s.mixture_si_sdr_db[j],
                fmt_opt(s.doa_abs_err_deg[j]),
                s.mask_mse[j],
                s.duplicate_speaker
            );
        }
    }
    out
}

/// Writes `metrics.csv` and `metrics.json` (and `plot_data.json` on request).
pub fn write_report(report: &MetricReport, out_dir: &Path, plot_data: bool) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("metrics.csv");
    fs::write(&csv, report_csv(report)).map_err(|e| Error::io(&csv, e))?;
    let json = out_dir.join("metrics.json");
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&json, e))?;
    if plot_data {
        let p = out_dir.join("plot_data.json");
        let data = serde_json::json!({
            "si_sdr_db": report.scenes.iter().flat_map(|s| s.si_sdr_db.clone()).collect::<Vec<_>>(),
            "improvement_db": report.scenes.iter().flat_map(|s| s.improvement_db().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "doa_abs_err_deg": report.scenes.iter().flat_map(|s| s.doa_abs_err_deg.iter().flatten().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "mask_mse": report.scenes.iter().flat_map(|s| s.mask_mse.clone()).collect::<Vec<_>>(),
        });
        fs::write(&p, serde_json::to_string_pretty(&data)? + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MultichannelWave;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_sdr_examples() {
        let s = noise(1000, 1);
        assert_eq!(si_sdr(&s, &s).unwrap(), SI_SDR_CAP_DB);
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&twice, &s).unwrap(), SI_SDR_CAP_DB);
        // orthogonal noise of equal power
        let mut n = noise(1000, 2);
        let k = dot(&n, &s) / dot(&s, &s);
        n.iter_mut().zip(&s).for_each(|(n, s)| *n -= k * s);
        let g = (dot(&s, &s) / dot(&n, &n)).sqrt();
        let est: Vec<f64> = s.iter().zip(&n).map(|(s, n)| s + g * n).collect();
        assert!(si_sdr(&est, &s).unwrap().abs() < 1e-9);
        assert!(matches!(si_sdr(&s, &[0.0; 1000]), Err(Error::UndefinedMetric(_))));
        assert_eq!(si_sdr(&[0.0; 1000], &s).unwrap(), -SI_SDR_CAP_DB);
    }

    #[test]
    fn si_sdr_matches_direct_formula() {
        let s = noise(500, 3);
        let e: Vec<f64> = s.iter().zip(noise(500, 4)).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
        let alpha = dot(&e, &s) / dot(&s, &s);
        let t: Vec<f64> = s.iter().map(|v| alpha * v).collect();
        let r: Vec<f64> = t.iter().zip(&e).map(|(t, e)| t - e).collect();
        let expect = 10.0 * (dot(&t, &t) / dot(&r, &r)).log10();
        assert!((si_sdr(&e, &s).unwrap() - expect).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn si_sdr_scale_invariant(a in 0.01f64..100.0, b in 0.01f64..100.0, seed in 0u64..1000) {
            let s = noise(300, seed);
            let e: Vec<f64> = s.iter().zip(noise(300, seed + 1)).map(|(x, y)| x + 0.5 * y).collect();
            let base = si_sdr(&e, &s).unwrap();
            let es: Vec<f64> = e.iter().map(|v| a * v).collect();
            let ss: Vec<f64> = s.iter().map(|v| b * v).collect();
            prop_assert!((si_sdr(&es, &ss).unwrap() - base).abs() < 1e-9);
        }
    }

    fn mask(v: &[f64]) -> Mask {
        Mask::new(v.to_vec(), 1, v.len()).unwrap()
    }

    #[test]
    fn duplicate_diag_examples() {
        let i1 = mask(&[1.0, 0.0, 0.8, 0.1]);
        let i2 = mask(&[0.0, 1.0, 0.1, 0.8]);
        let ideals = [i1.clone(), i2.clone()];
        assert!(!duplicate_speaker_diag(&i1, &i2, &ideals).unwrap());
        assert!(duplicate_speaker_diag(&i1, &i1, &ideals).unwrap());
        let mixed = i1.zip_with(&i2, |a, b| 0.6 * a + 0.4 * b).unwrap();
        assert!(!duplicate_speaker_diag(&mixed, &i2, &ideals).unwrap());
        // relabeling the true speakers does not change the flag
        let swapped = [i2.clone(), i1.clone()];
        assert!(!duplicate_speaker_diag(&mixed, &i2, &swapped).unwrap());
        assert!(duplicate_speaker_diag(&i1, &i1, &swapped).unwrap());
    }

    #[test]
    fn doa_error_examples() {
        assert_eq!(doa_error(45.0, 45.0).unwrap(), 0.0);
        assert_eq!(doa_error(0.0, 180.0).unwrap(), 180.0);
        assert!((doa_error(30.0, 30.9).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(doa_error(-1.0, 3.0), Err(Error::Validation(_))));
        assert!(matches!(doa_error(10.0, 181.0), Err(Error::Validation(_))));
    }

    fn truth_fixture(seed: u64) -> (SceneTruth, Vec<f64>) {
        let s1 = noise(400, seed);
        let s2 = noise(400, seed + 100);
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
        let ideals = vec![mask(&[0.9, 0.1]), mask(&[0.1, 0.9])];
        let truth = SceneTruth {
            images: vec![
                MultichannelWave::from_mono(s1, 16000),
                MultichannelWave::from_mono(s2, 16000),
            ],
            noise_image: MultichannelWave::zeros(1, 400, 16000),
            doas_deg: vec![40.0, 120.0],
            ideal_masks: ideals,
            noise_mask: mask(&[0.0, 0.0]),
            vad: vec![vec![true], vec![true]],
        };
        (truth, mix)
    }

    #[test]
    fn permutation_resolution_is_swap_invariant() {
        let (truth, mix) = truth_fixture(1);
        let est = |j: usize, doa: f64| SpeakerEstimate {
            wave: truth.images[j].channel(0).iter().zip(&mix).map(|(a, m)| 0.8 * a + 0.1 * m).collect(),
            mask: truth.ideal_masks[j].clone(),
            doa_deg: Some(doa),
        };
        let a = evaluate_scene("x", &[est(0, 42.0), est(1, 119.0)], &mix, &truth).unwrap();
        let b = evaluate_scene("x", &[est(1, 119.0), est(0, 42.0)], &mix, &truth).unwrap();
        assert_eq!(a.assignment, vec![0, 1]);
        assert_eq!(b.assignment, vec![1, 0]);
        assert_eq!(a.si_sdr_db, b.si_sdr_db);
        assert_eq!(a.doa_abs_err_deg, vec![Some(2.0), Some(1.0)]);
        assert_eq!(a.doa_abs_err_deg, b.doa_abs_err_deg);
        assert!(!a.duplicate_speaker);
        assert!(a.si_sdr_db.iter().zip(&a.mixture_si_sdr_db).all(|(e, m)| e > m));
    }

    #[test]
    fn aggregates_match_hand_computation() {
        let row = |id: &str, sdr: [f64; 2], mix: [f64; 2], doa: [f64; 2], mse: [f64; 2], dup: bool| SceneMetrics {
            id: id.into(),
            assignment: vec![0, 1],
            si_sdr_db: sdr.to_vec(),
            mixture_si_sdr_db: mix.to_vec(),
            doa_abs_err_deg: doa.iter().map(|&d| Some(d)).collect(),
            mask_mse: mse.to_vec(),
            duplicate_speaker: dup,
        };
        let scenes = vec![
            row("a", [10.0, 4.0], [0.0, -2.0], [1.0, 3.0], [0.01, 0.03], false),
            row("b", [6.0, 2.0], [1.0, 1.0], [0.0, 10.0], [0.02, 0.02], true),
            row("c", [8.0, -1.0], [-1.0, 0.0], [2.0, 4.0], [0.05, 0.01], false),
        ];
        let agg = aggregate(&scenes);
        // sdr sorted: -1 2 4 6 8 10 -> median 5, mean 29/6
        assert_eq!(agg.median_si_sdr_db, Some(5.0));
        assert!((agg.mean_si_sdr_db.unwrap() - 29.0 / 6.0).abs() < 1e-12);
        // mixture sorted: -2 -1 0 0 1 1 -> 0
        assert_eq!(agg.median_mixture_si_sdr_db, Some(0.0));
        // improvements: 10 6 5 1 9 -1 -> sorted -1 1 5 6 9 10 -> 5.5
        assert_eq!(agg.median_improvement_db, Some(5.5));
        // doa: 0 1 2 3 4 10 -> median 2.5, mean 20/6
        assert_eq!(agg.median_doa_abs_err_deg, Some(2.5));
        assert!((agg.mean_doa_abs_err_deg.unwrap() - 20.0 / 6.0).abs() < 1e-12);
        assert!((agg.mean_mask_mse.unwrap() - 0.14 / 6.0).abs() < 1e-12);
        assert!((agg.duplicate_rate.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(aggregate(&[]), Aggregates::default());
    }
}
