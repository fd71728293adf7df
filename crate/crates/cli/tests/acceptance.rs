//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. Exits non-zero if any criterion fails.
//!
//! `SLOGD_ACCEPTANCE_ONLY=1,3,5` restricts the run to a subset;
//! `SLOGD_ACCEPTANCE_WORKDIR=<dir>` keeps the generated datasets, checkpoints
//! and reports instead of using a temporary directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slogd::beamforming::linalg::{cholesky_solve, norm, CMatrix};
use slogd::beamforming::{r1_mwf, update_covariances};
use slogd::dsp::{istft, spectral_frame_energy, stft, Mask, MultichannelWave, Spectrogram, StftConfig};
use slogd::eval::{doa_error, median};
use slogd::geometry::direction;
use slogd::localization::{gcc_phat, pool_posterior, DoaGrid};
use slogd::models::{doa_input, mask_input, output_mask, output_posterior, train_sequence, Networks, Stage, TrainConfig};
use slogd::neural::gradcheck::{check_loss, check_model};
use slogd::neural::{LayerSpec, LossKind, Model, Tensor};
use slogd::pipeline::{mode_matrix_run, DoaSource, MaskSource, ModeSummary, PipelineConfig};
use slogd::scene::{
    generate_dataset, load_manifest, load_scene, synthesize_scene, synthesize_utterance, CorpusSource, GeneratorConfig,
    ManifestEntry, NoiseInput, RoomSpec, SceneConfig, SceneSpec, SpeakerProfile, Split,
};

type Check = Result<String, String>;

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Check {
    let s = elapsed.as_secs_f64();
    if s < limit_s {
        Ok(format!("{detail}; {s:.1} s"))
    } else {
        Err(format!("{detail}; took {s:.1} s, limit {limit_s} s"))
    }
}

fn verdict(pass: bool, detail: String) -> Check {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_wave(rng: &mut ChaCha8Rng) -> MultichannelWave {
    let channels = rng.gen_range(1..=4);
    let len = rng.gen_range(1..=24_000);
    let ch = (0..channels).map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    MultichannelWave::new(ch, 16_000).unwrap()
}

fn dsp_correctness() -> Check {
    let t0 = Instant::now();
    let cfg = StftConfig::paper_profile();
    let window = cfg.window.coefficients(cfg.window_len);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rt, mut worst_parseval) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let w = random_wave(&mut rng);
        let spec = stft(&w, &cfg).map_err(|e| e.to_string())?;
        let back = istft(&spec, &cfg).map_err(|e| e.to_string())?;
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..w.channel_count() {
            for (a, b) in w.channel(c).iter().zip(back.channel(c)) {
                num += (a - b).powi(2);
                den += a * a;
            }
        }
        worst_rt = worst_rt.max((num / den).sqrt());

        // windowed frame energy in the time domain against the one-sided spectrum
        let pad = (cfg.window_len / 2) as isize;
        for c in 0..w.channel_count() {
            let x = w.channel(c);
            for t in 0..spec.frame_count() {
                let start = (t * cfg.hop) as isize - pad;
                let e: f64 = window
                    .iter()
                    .enumerate()
                    .filter_map(|(n, wn)| {
                        let i = start + n as isize;
                        (i >= 0 && (i as usize) < x.len()).then(|| (wn * x[i as usize]).powi(2))
                    })
                    .sum();
                if e > 0.0 {
                    let s = spectral_frame_energy(spec.frame(c, t), cfg.fft_len);
                    worst_parseval = worst_parseval.max((s - e).abs() / e);
                }
            }
        }
    }
    let detail = format!("round-trip rel. error {worst_rt:.2e} (< 1e-6), Parseval rel. error {worst_parseval:.2e} (< 1e-6)");
    if worst_rt >= 1e-6 || worst_parseval >= 1e-6 {
        return Err(detail);
    }
    within(t0.elapsed(), 10.0, detail)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_verification() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(err),
        None => worst.push((name, err)),
    };
    for inst in 0..20u64 {
        let mut u = || rng.gen_range(2..=7usize);
        let (c, t, f, d, h) = (u(), u(), u(), u(), u());
        let cases: Vec<(&'static str, LayerSpec, Vec<usize>)> = vec![
            (
                "conv2d_5x5",
                LayerSpec::Conv2d {
                    in_planes: c,
                    out_planes: 2,
                    kernel_h: 5,
                    kernel_w: 5,
                },
                vec![c, t, f],
            ),
            ("bilstm", LayerSpec::BiLstm { input: d, hidden: h }, vec![t, d]),
            ("linear", LayerSpec::Linear { input: d, output: h }, vec![t, d]),
            ("sigmoid", LayerSpec::Sigmoid, vec![t, d]),
            ("relu", LayerSpec::Relu, vec![t, d]),
            ("maxpool_freq", LayerSpec::MaxPoolFreq { k: 2 }, vec![c, t, f]),
        ];
        for (name, spec, shape) in cases {
            let mut local = ChaCha8Rng::seed_from_u64(1000 + inst);
            let model = Model::new(vec![spec], inst).map_err(|e| e.to_string())?;
            let x = rand_tensor(shape, &mut local);
            record(name, check_model(&model, &x, inst).map_err(|e| e.to_string())?.max_error());
        }
        let (t, k) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let p = Tensor::new(vec![t, k], (0..t * k).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap();
        let binary = Tensor::new(vec![t, k], (0..t * k).map(|_| rng.gen_range(0..2) as f64).collect()).unwrap();
        let soft = Tensor::new(vec![t, k], (0..t * k).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        record("bce", check_loss(LossKind::Bce, &p, &binary).map_err(|e| e.to_string())?);
        record("ce", check_loss(LossKind::Ce, &p, &soft).map_err(|e| e.to_string())?);
        record("mse", check_loss(LossKind::Mse, &p, &soft).map_err(|e| e.to_string())?);
    }
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    let detail = format!("20 instances each, max rel. error: {detail} (< 1e-4)");
    if worst.iter().any(|(_, e)| *e >= 1e-4) {
        return Err(detail);
    }
    within(t0.elapsed(), 120.0, detail)
}

fn random_psd(n: usize, rank: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    let mut m = CMatrix::zeros(n);
    for _ in 0..rank {
        let v: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        m.add_outer_scaled(&v, 1.0);
    }
    m
}

fn r1_mwf_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut diag_err: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..=4);
        let (sigma, mu) = (rng.gen_range(0.1..10.0), rng.gen_range(0.0..5.0));
        let mut e1 = vec![Complex64::new(0.0, 0.0); n];
        e1[0] = Complex64::new(1.0, 0.0);
        let mut sj = CMatrix::outer(&e1);
        sj.scale(sigma);
        let w = r1_mwf(&sj, &CMatrix::identity(n), mu).weights;
        let expect = sigma / (mu + sigma);
        for (i, wi) in w.iter().enumerate() {
            let target = if i == 0 { expect } else { 0.0 };
            diag_err = diag_err.max((wi - target).norm());
        }
    }
    let mut resid: f64 = 0.0;
    for _ in 0..1000 {
        let rank = rng.gen_range(1..=4);
        let sj = random_psd(4, rank, &mut rng);
        let mut sn = random_psd(4, 6, &mut rng);
        sn.add_scaled(&CMatrix::identity(4), 0.1);
        let sol = r1_mwf(&sj, &sn, 1.0);
        let chol = sn.cholesky().ok_or("noise covariance not positive definite")?;
        let lhs = cholesky_solve(&chol, &sj.matvec(&sol.h));
        let rho_h: Vec<Complex64> = sol.h.iter().map(|v| v * sol.eigenvalue).collect();
        let diff: Vec<Complex64> = lhs.iter().zip(&rho_h).map(|(a, b)| a - b).collect();
        resid = resid.max(norm(&diff) / norm(&rho_h));
    }
    verdict(
        diag_err < 1e-10 && resid < 1e-8,
        format!("diagonal case max |W - closed form| {diag_err:.1e} (< 1e-10); eigen residual max {resid:.1e} over 1000 pairs (< 1e-8)"),
    )
}

fn random_spec(channels: usize, frames: usize, bins: usize, rng: &mut ChaCha8Rng) -> Spectrogram {
    let data = (0..channels * frames * bins)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let cfg = StftConfig {
        sample_rate: 16_000,
        window_len: 2 * (bins - 1),
        hop: bins - 1,
        fft_len: 2 * (bins - 1),
        window: Default::default(),
    };
    Spectrogram::from_raw(data, channels, frames, cfg, frames * (bins - 1)).unwrap()
}

fn max_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn outer_scaled(x: &[Complex64], s: f64) -> CMatrix {
    let n = x.len();
    let mut m = CMatrix::zeros(n);
    for r in 0..n {
        for c in 0..n {
            m[(r, c)] = x[r] * x[c].conj() * s;
        }
    }
    m
}

fn covariance_recursion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (frames, bins, ch) = (40, 5, 4);
    let spec = random_spec(ch, frames, bins, &mut rng);
    let mask = Mask::new((0..frames * bins).map(|_| rng.gen_range(0.0..1.0)).collect(), frames, bins).unwrap();
    let snap = |s: &Spectrogram, t: usize, f: usize| -> Vec<Complex64> { (0..ch).map(|c| s.get(c, t, f)).collect() };
    let err = |e: slogd::Error| e.to_string();

    // no memory: each frame's own weighted outer product
    let (sj, sn) = update_covariances(&spec, &mask, 0.0, 0.7).map_err(err)?;
    let mut e_alpha0: f64 = 0.0;
    for t in 0..frames {
        for f in 0..bins {
            let x = snap(&spec, t, f);
            let m = mask.get(t, f);
            e_alpha0 = e_alpha0.max(max_diff(&sj.get(t, f), &outer_scaled(&x, m)));
            e_alpha0 = e_alpha0.max(max_diff(&sn.get(t, f), &outer_scaled(&x, 1.0 - m)));
        }
    }

    // zero mask: the target covariance only decays from its start, the
    // noise covariance is the unmasked recursion
    let alpha = 0.9;
    let zero = Mask::filled(frames, bins, 0.0);
    let (sj, sn) = update_covariances(&spec, &zero, alpha, 0.5).map_err(err)?;
    let mut e_zero: f64 = 0.0;
    for t in 0..frames {
        for f in 0..bins {
            let mut expect = CMatrix::identity(ch);
            expect.scale(0.5 * alpha.powi(t as i32 + 1));
            e_zero = e_zero.max(max_diff(&sj.get(t, f), &expect));
        }
    }
    let mut running = vec![CMatrix::identity(ch); bins];
    running.iter_mut().for_each(|m| m.scale(0.5));
    for t in 0..frames {
        for (f, acc) in running.iter_mut().enumerate() {
            acc.scale(alpha);
            acc.add_scaled(&outer_scaled(&snap(&spec, t, f), 1.0), 1.0 - alpha);
            e_zero = e_zero.max(max_diff(&sn.get(t, f), acc) / acc.frobenius());
        }
    }

    // constant snapshot, full mask, zero start: (1 - alpha^k) x x^H after k frames
    let x: Vec<Vec<Complex64>> = (0..bins)
        .map(|_| (0..ch).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect())
        .collect();
    let mut data = Vec::with_capacity(ch * frames * bins);
    for c in 0..ch {
        for _ in 0..frames {
            for xf in &x {
                data.push(xf[c]);
            }
        }
    }
    let constant = Spectrogram::from_raw(data, ch, frames, spec.config().clone(), spec.signal_len()).unwrap();
    let ones = Mask::filled(frames, bins, 1.0);
    let mut e_geo: f64 = 0.0;
    for alpha in [0.5, 0.9, 0.99] {
        let (sj, sn) = update_covariances(&constant, &ones, alpha, 0.0).map_err(err)?;
        for t in 0..frames {
            for (f, xf) in x.iter().enumerate() {
                let expect = outer_scaled(xf, 1.0 - f64::powi(alpha, t as i32 + 1));
                e_geo = e_geo.max(max_diff(&sj.get(t, f), &expect));
                e_geo = e_geo.max(sn.get(t, f).frobenius());
            }
        }
    }
    verdict(
        e_alpha0 < 1e-12 && e_zero < 1e-12 && e_geo < 1e-9,
        format!(
            "alpha=0 max deviation {e_alpha0:.1e}, zero-mask max deviation {e_zero:.1e} (round-off only, < 1e-12); \
             geometric limit max deviation {e_geo:.1e} (< 1e-9)"
        ),
    )
}

fn gcc_phat_localization() -> Check {
    let t0 = Instant::now();
    let cfg = SceneConfig::default();
    let grid = DoaGrid::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut errors = Vec::new();
    for i in 0..50u64 {
        let dims = [rng.gen_range(6.0..8.0), rng.gen_range(6.0..8.0), 3.0];
        let center = [dims[0] / 2.0, dims[1] / 2.0, 1.5];
        let doa = rng.gen_range(0.0..=180.0);
        let dist = rng.gen_range(1.0..2.5);
        let u = direction(doa);
        let source = [center[0] + dist * u[0], center[1] + dist * u[1], center[2]];
        let spec = SceneSpec {
            room: RoomSpec::new(dims, 0.0),
            array_center: center,
            source_positions: vec![source],
            sir_db: 0.0,
            snr_db: Some(rng.gen_range(20.0..30.0)),
            seed: i,
        };
        let dry = synthesize_utterance(&SpeakerProfile::random(&mut rng), 1.0, 16_000, &mut rng);
        let (mixture, truth) = synthesize_scene(&spec, &[dry], NoiseInput::Diffuse, &cfg).map_err(|e| e.to_string())?;
        let x = stft(&mixture, &cfg.stft).map_err(|e| e.to_string())?;
        let est = gcc_phat(&x, &cfg.geometry, &grid).map_err(|e| e.to_string())?;
        errors.push(doa_error(est, truth.doas_deg[0]).map_err(|e| e.to_string())?);
    }
    let med = median(&errors).unwrap();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let detail = format!("median abs. error {med:.2} deg (<= 2), worst {worst:.1} deg, 50 anechoic scenes");
    if med > 2.0 {
        return Err(detail);
    }
    within(t0.elapsed(), 120.0, detail)
}

/// Runs that feed the mask-algebra and duplicate-speaker criteria.
#[derive(Default)]
struct Runs {
    summaries: Vec<(String, ModeSummary)>,
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.2}"))
}

fn dataset(dir: &Path, gen: &GeneratorConfig, cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<ManifestEntry>, String> {
    let manifest = dir.join("manifest.jsonl");
    if manifest.exists() {
        let entries = load_manifest(&manifest).map_err(|e| e.to_string())?;
        if entries.len() == count {
            return Ok(entries);
        }
    }
    let corpus = CorpusSource::Synthetic { speakers: 40, seed };
    generate_dataset(&corpus, None, gen, cfg, count, seed, dir).map_err(|e| e.to_string())
}

fn oracle_ordering(work: &Path, runs: &mut Runs) -> Check {
    let cfg = SceneConfig::default();
    let gen = GeneratorConfig {
        rt60_range: [0.3, 0.6],
        split_fractions: [0.0, 0.0, 1.0],
        utterance_seconds: [2.0, 3.0],
        ..GeneratorConfig::default()
    };
    let root = work.join("reverberant");
    let entries = dataset(&root, &gen, &cfg, 50, 6)?;
    let modes = [(DoaSource::Oracle, MaskSource::Oracle), (DoaSource::GccPhat, MaskSource::Oracle)];
    let summaries =
        mode_matrix_run(&root, &entries, &cfg, &PipelineConfig::default(), &modes, None).map_err(|e| e.to_string())?;
    let (oracle, gcc) = (&summaries[0].aggregates, &summaries[1].aggregates);
    let (o, g, m) = (
        oracle.median_si_sdr_db.unwrap_or(f64::NAN),
        gcc.median_si_sdr_db.unwrap_or(f64::NAN),
        oracle.median_mixture_si_sdr_db.unwrap_or(f64::NAN),
    );
    let gain = o - m;
    let detail = format!(
        "median SI-SDR oracle/oracle {o:.2} dB > gcc-phat/oracle {g:.2} dB > mixture {m:.2} dB; \
         oracle gain {gain:.2} dB (>= 5; median per-scene improvement {})",
        show(oracle.median_improvement_db)
    );
    for s in summaries {
        runs.summaries.push((format!("reverberant {}/{}", s.doa, s.mask), s));
    }
    verdict(o > g && g > m && gain >= 5.0, detail)
}

fn nearest_error(est: f64, truths: &[f64]) -> f64 {
    truths
        .iter()
        .map(|&t| doa_error(est, t).unwrap_or(f64::INFINITY))
        .fold(f64::INFINITY, f64::min)
}

fn desk_learning(work: &Path, runs: &mut Runs) -> Check {
    let cfg = SceneConfig::default();
    let gen = GeneratorConfig {
        rt60_range: [0.2, 0.4],
        utterance_seconds: [1.5, 2.5],
        ..GeneratorConfig::default()
    };
    let root = work.join("desk");
    let entries = dataset(&root, &gen, &cfg, 200, 7)?;
    let ckpt = work.join("desk_checkpoints");
    let _ = fs::remove_dir_all(&ckpt);
    let tc = TrainConfig { seed: 7, ..TrainConfig::default() };
    let log = |m: &str| eprintln!("  [train] {m}");
    let t0 = Instant::now();
    let reports = train_sequence(&root, &entries, &cfg, &tc, &Stage::ORDER, &ckpt, false, &log).map_err(|e| e.to_string())?;
    let train_s = t0.elapsed().as_secs_f64();
    let nets = Networks::load(&ckpt).map_err(|e| e.to_string())?;
    let grid = DoaGrid::standard();
    let err = |e: slogd::Error| e.to_string();

    // (a) pooled first-stage DOA on the held-out scenes
    let test: Vec<ManifestEntry> = entries.iter().filter(|e| e.split == Split::Test).cloned().collect();
    let mut doa_errors = Vec::new();
    for e in &test {
        let scene = load_scene(&root, e, &cfg).map_err(err)?;
        let x = stft(&scene.mixture, &cfg.stft).map_err(err)?;
        let post = output_posterior(nets.doa1.infer(doa_input(&x, None).map_err(err)?).map_err(err)?).map_err(err)?;
        doa_errors.push(nearest_error(pool_posterior(&post, &grid).map_err(err)?, &e.doas_deg));
    }
    let hits = doa_errors.iter().filter(|&&e| e <= 5.0).count();
    let frac = hits as f64 / test.len().max(1) as f64;

    // (b) first mask network against the constant 0.5 predictor on dev,
    // conditioned on the pooled first-stage DOA as in training
    let (mut net_mse, mut const_mse, mut n) = (0.0, 0.0, 0usize);
    for e in entries.iter().filter(|e| e.split == Split::Dev) {
        let scene = load_scene(&root, e, &cfg).map_err(err)?;
        let x = stft(&scene.mixture, &cfg.stft).map_err(err)?;
        let post = output_posterior(nets.doa1.infer(doa_input(&x, None).map_err(err)?).map_err(err)?).map_err(err)?;
        let doa = pool_posterior(&post, &grid).map_err(err)?;
        let j = (0..e.doas_deg.len())
            .min_by(|&a, &b| (e.doas_deg[a] - doa).abs().total_cmp(&(e.doas_deg[b] - doa).abs()))
            .unwrap_or(0);
        let target = &scene.truth.ideal_masks[j];
        let m1 = output_mask(nets.mask1.infer(mask_input(&x, doa, &cfg.geometry, &post, None).map_err(err)?).map_err(err)?)
            .map_err(err)?;
        net_mse += m1.mse(target).map_err(err)?;
        const_mse += target.values().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / target.values().len() as f64;
        n += 1;
    }
    let (net_mse, const_mse) = (net_mse / n.max(1) as f64, const_mse / n.max(1) as f64);

    // (c) the full neural pipeline against the unprocessed mixture
    let summaries = mode_matrix_run(
        &root,
        &test,
        &cfg,
        &PipelineConfig::default(),
        &[(DoaSource::Neural, MaskSource::Neural)],
        Some(&nets),
    )
    .map_err(err)?;
    let agg = &summaries[0].aggregates;
    let (neural, mix) = (
        agg.median_si_sdr_db.unwrap_or(f64::NAN),
        agg.median_mixture_si_sdr_db.unwrap_or(f64::NAN),
    );
    runs.summaries.push(("desk neural/neural".into(), summaries.into_iter().next().unwrap()));

    let epochs: Vec<String> = reports.iter().map(|r| format!("{} {}", r.stage, r.epochs)).collect();
    let a = frac >= 0.8;
    let b = net_mse < const_mse;
    let c = neural > mix;
    let t = train_s <= 1800.0;
    let detail = format!(
        "(a) {} DOA1 within 5 deg on {hits}/{} test scenes = {:.0}% (>= 80%), median error {:.1} deg; \
         (b) {} mask1 dev MSE {net_mse:.4} vs constant 0.5 {const_mse:.4}; \
         (c) {} neural median SI-SDR {neural:.2} dB vs mixture {mix:.2} dB; \
         training {} {train_s:.0} s (<= 1800; epochs {})",
        pf(a),
        test.len(),
        100.0 * frac,
        median(&doa_errors).unwrap_or(f64::NAN),
        pf(b),
        pf(c),
        pf(t),
        epochs.join(", ")
    );
    verdict(a && b && c && t, detail)
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn mask_algebra(runs: &Runs) -> Check {
    if runs.summaries.is_empty() {
        return Err("no separation runs to inspect".into());
    }
    let mut worst: f64 = 0.0;
    let mut out_of_range = 0;
    let mut scenes = 0;
    for (_, s) in &runs.summaries {
        worst = worst.max(s.partition_max_error);
        out_of_range += s.m2_out_of_range;
        scenes += s.scenes.len();
    }
    let names: Vec<&str> = runs.summaries.iter().map(|(n, _)| n.as_str()).collect();
    verdict(
        worst <= 1e-12 && out_of_range == 0,
        format!(
            "max |M1+M2+M3-1| {worst:.1e} (<= 1e-12), un-clamped M2 outside [0,1]: {out_of_range} values; \
             {scenes} scene runs over [{}]",
            names.join(", ")
        ),
    )
}

fn duplicate_analysis(runs: &Runs) -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut seen_oracle = false;
    for (name, s) in &runs.summaries {
        let rate = s.aggregates.duplicate_rate;
        // nearest-speaker oracle masks behind estimated DOAs may pick the
        // same speaker twice; only the fully oracle run must be clean
        match (s.doa, s.mask, rate) {
            (DoaSource::Oracle, MaskSource::Oracle, Some(r)) => {
                seen_oracle = true;
                ok &= r == 0.0;
            }
            (_, _, Some(r)) => ok &= r.is_finite(),
            (_, _, None) => ok = false,
        }
        parts.push(format!("{name} {}", show(rate.map(|r| 100.0 * r)).replace("n/a", "missing") + "%"));
    }
    verdict(
        ok && seen_oracle,
        format!("duplicate-speaker rate: {} (oracle DOA + oracle masks must be 0%, others finite)", parts.join(", ")),
    )
}

const TINY: &str = r#"
[generator]
utterance_seconds = [0.8, 1.0]
rt60_range = [0.2, 0.4]
"#;

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_slogd"))
        .current_dir(dir)
        .env_remove("SLOGD_OUTPUT_ROOT")
        .args(["--config", "run.toml", "--seed", "13"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism(work: &Path) -> Check {
    let dir = work.join("determinism");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    fs::write(dir.join("run.toml"), TINY).map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        cli(&dir, &["simulate", "--count", "18", "--out", &format!("data_{run}")])?;
        cli(
            &dir,
            &["separate", "--data", &format!("data_{run}"), "--doa", "gcc-phat", "--mask", "oracle", "--out", &format!("sep_{run}")],
        )?;
        cli(
            &dir,
            &["evaluate", "--data", &format!("data_{run}"), "--results", &format!("sep_{run}"), "--out", &format!("report_{run}")],
        )?;
    }
    let mut compared = Vec::new();
    for (a, b) in [
        ("data_a/manifest.jsonl", "data_b/manifest.jsonl"),
        ("report_a/metrics.json", "report_b/metrics.json"),
        ("report_a/metrics.csv", "report_b/metrics.csv"),
    ] {
        let (x, y) = (read(&dir.join(a))?, read(&dir.join(b))?);
        if x != y {
            return Err(format!("{a} and {b} differ"));
        }
        compared.push(format!("{} ({} bytes)", a.split('/').nth(1).unwrap_or(a), x.len()));
    }
    // the separated waveforms, too
    let mut waves = 0;
    for entry in fs::read_dir(dir.join("sep_a")).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.is_dir() {
            for f in ["spk1.wav", "spk2.wav", "masks.bin"] {
                let rel = p.strip_prefix(dir.join("sep_a")).unwrap().join(f);
                if read(&p.join(f))? != read(&dir.join("sep_b").join(&rel))? {
                    return Err(format!("separated output {rel:?} differs"));
                }
                waves += 1;
            }
        }
    }
    Ok(format!("byte-identical reruns: {}, {waves} separation artifacts", compared.join(", ")))
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{p:?}: {e}"))
}

fn main() {
    // cargo passes libtest flags to harness-less targets; only `--list` matters
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let only: Option<Vec<u32>> = std::env::var("SLOGD_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |k: u32| only.as_ref().is_none_or(|o| o.contains(&k));
    let tmp;
    let work: PathBuf = match std::env::var_os("SLOGD_ACCEPTANCE_WORKDIR") {
        Some(d) => PathBuf::from(d),
        None => {
            tmp = tempfile::tempdir().expect("temporary directory");
            tmp.path().to_path_buf()
        }
    };
    fs::create_dir_all(&work).expect("work directory");

    let mut runs = Runs::default();
    let mut results: Vec<(u32, &str, Check)> = Vec::new();
    let mut run = |k: u32, name: &'static str, f: &mut dyn FnMut(&mut Runs) -> Check| {
        if wanted(k) {
            eprintln!("criterion {k}: {name} ...");
            let t0 = Instant::now();
            let r = f(&mut runs);
            eprintln!("criterion {k}: done in {:.1} s", t0.elapsed().as_secs_f64());
            println!("{} {k:>2} {name}: {}", if r.is_ok() { "PASS" } else { "FAIL" }, match &r {
                Ok(d) | Err(d) => d,
            });
            results.push((k, name, r));
        }
    };
    run(1, "dsp correctness", &mut |_| dsp_correctness());
    run(2, "gradient verification", &mut |_| gradient_verification());
    run(3, "r1-mwf algebra", &mut |_| r1_mwf_algebra());
    run(4, "covariance recursion", &mut |_| covariance_recursion());
    run(5, "gcc-phat localization", &mut |_| gcc_phat_localization());
    run(6, "oracle upper-bound ordering", &mut |r| oracle_ordering(&work, r));
    run(7, "desk-scale learning", &mut |r| desk_learning(&work, r));
    run(8, "mask algebra invariants", &mut |r| mask_algebra(r));
    run(9, "deflation error analysis", &mut |r| duplicate_analysis(r));
    run(10, "determinism", &mut |_| determinism(&work));

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
