use std::fs;
use std::path::Path;

use slogd::eval::evaluate_split;
use slogd::pipeline::{
    mode_matrix_run, read_diagnostics, read_masks, separate, write_outputs, DoaSource, MaskSource, OracleInfo,
    PipelineConfig,
};
use slogd::scene::{
    generate_dataset, load_manifest, load_scene, CorpusSource, GeneratorConfig, SceneConfig, Split,
};

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        rt60_range: [0.2, 0.3],
        utterance_seconds: [0.8, 1.0],
        max_rir_seconds: Some(0.1),
        split_fractions: [1.0, 1.0, 2.0],
        ..GeneratorConfig::default()
    }
}

fn dataset(dir: &Path, seed: u64) {
    let corpus = CorpusSource::Synthetic { speakers: 6, seed: 3 };
    generate_dataset(&corpus, None, &small_generator(), &SceneConfig::default(), 8, seed, dir).unwrap();
}

#[test]
fn dataset_generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    dataset(&a, 5);
    dataset(&b, 5);
    dataset(&c, 6);
    let read = |p: &Path| fs::read(p.join("manifest.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));

    let entries = load_manifest(&a.join("manifest.jsonl")).unwrap();
    assert_eq!(entries.len(), 8);
    assert_eq!(entries.iter().filter(|e| e.split == Split::Test).count(), 4);
    let cfg = SceneConfig::default();
    for e in &entries {
        let s = load_scene(&a, e, &cfg).unwrap();
        assert_eq!(s.mixture.channel_count(), 4);
        assert_eq!(s.truth.doas_deg.len(), 2);
        assert!(s.truth.doas_deg.iter().all(|d| (0.0..=180.0).contains(d)));
    }
}

#[test]
fn oracle_modes_separate_and_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, 9);
    let entries = load_manifest(&data.join("manifest.jsonl")).unwrap();
    let test: Vec<_> = entries.iter().filter(|e| e.split == Split::Test).cloned().collect();
    let cfg = SceneConfig::default();
    let base = PipelineConfig::default();

    let runs = mode_matrix_run(
        &data,
        &test,
        &cfg,
        &base,
        &[(DoaSource::Oracle, MaskSource::Oracle), (DoaSource::GccPhat, MaskSource::Oracle)],
        None,
    )
    .unwrap();
    let oracle = &runs[0].aggregates;
    assert_eq!(oracle.scenes, test.len());
    assert_eq!(oracle.duplicate_rate, Some(0.0));
    assert!(oracle.median_improvement_db.unwrap() > 0.0, "{oracle:?}");
    assert!(oracle.median_si_sdr_db.unwrap() > oracle.median_mixture_si_sdr_db.unwrap());
    for r in &runs {
        assert!(r.partition_max_error <= 1e-12);
        assert!(r.aggregates.median_si_sdr_db.unwrap().is_finite());
    }

    // outputs written to disk score the same as in memory
    let pcfg = PipelineConfig { doa: DoaSource::Oracle, mask: MaskSource::Oracle, ..base };
    let out = tmp.path().join("out");
    for e in &test {
        let s = load_scene(&data, e, &cfg).unwrap();
        let oracle = OracleInfo { doas_deg: &s.truth.doas_deg, ideal_masks: &s.truth.ideal_masks };
        let r = separate(&s.mixture, &pcfg, None, Some(oracle)).unwrap();
        write_outputs(&out.join(&e.id), &r, s.mixture.sample_rate()).unwrap();

        let masks = read_masks(&out.join(&e.id).join("masks.bin")).unwrap();
        assert_eq!(masks.len(), 3);
        assert_eq!(masks[0], r.speakers[0].mask);
        assert_eq!(masks[2], r.noise_mask);
        let diag = read_diagnostics(&out.join(&e.id).join("diagnostics.json")).unwrap();
        assert_eq!(diag, r.diagnostics);
    }
    let report = evaluate_split(&out, &data, &entries, Split::Test, &cfg).unwrap();
    assert!(report.missing.is_empty());
    let (a, b) = (report.aggregates.median_si_sdr_db.unwrap(), oracle.median_si_sdr_db.unwrap());
    // wav output is 32-bit float
    assert!((a - b).abs() < 1e-3, "{a} vs {b}");
}
