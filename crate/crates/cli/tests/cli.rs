use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[generator]
split_fractions = [1.0, 1.0, 1.0]
utterance_seconds = [0.5, 0.6]
max_rir_seconds = 0.05
rt60_range = [0.2, 0.3]

[train]
batch = 2
max_epochs = 1
[train.doa_net]
hidden = 4
[train.mask_net]
hidden = 3
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_slogd"))
            .current_dir(self.dir.path())
            .env_remove("SLOGD_OUTPUT_ROOT")
            .args(["--config", "tiny.toml"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn simulate(&self, out: &str, count: usize, seed: u64) {
        self.ok(&["--seed", &seed.to_string(), "simulate", "--count", &count.to_string(), "--out", out]);
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{p:?}: {e}"))
}

#[test]
fn simulate_is_deterministic_and_records_config() {
    let f = Fixture::new();
    f.simulate("a", 4, 7);
    f.simulate("b", 4, 7);
    let a = read(&f.path("a/manifest.jsonl"));
    assert_eq!(a, read(&f.path("b/manifest.jsonl")));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 4);
    f.simulate("c", 4, 8);
    assert_ne!(read(&f.path("a/manifest.jsonl")), read(&f.path("c/manifest.jsonl")));

    let resolved = fs::read_to_string(f.path("a/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 7"));
    // the copy is itself a valid configuration
    let out = Command::new(env!("CARGO_BIN_EXE_slogd"))
        .current_dir(f.dir.path())
        .args(["--config", "a/resolved_config.toml", "simulate", "--count", "4", "--out", "d"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(&f.path("a/manifest.jsonl")), read(&f.path("d/manifest.jsonl")));
}

#[test]
fn simulate_edge_cases() {
    let f = Fixture::new();
    f.simulate("empty", 0, 1);
    assert!(read(&f.path("empty/manifest.jsonl")).is_empty());
    let out = f.run(&["simulate", "--count", "2", "--corpus-dir", "no/such/dir"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/dir"));
}

#[test]
fn config_and_usage_errors_exit_with_one() {
    let f = Fixture::new();
    fs::write(f.path("bad.toml"), "[train]\nlr = -1.0\n").unwrap();
    fs::write(f.path("unknown.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    fs::write(f.path("dup.toml"), "[pipeline.stft]\nhop = 10\n").unwrap();
    for cfg in ["bad.toml", "unknown.toml", "dup.toml", "missing.toml"] {
        let out = Command::new(env!("CARGO_BIN_EXE_slogd"))
            .current_dir(f.dir.path())
            .args(["--config", cfg, "simulate", "--count", "1"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1), "{cfg}");
    }
    assert_eq!(f.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(f.run(&["--jobs", "0", "simulate", "--count", "1"]).status.code(), Some(1));
    assert_eq!(f.run(&["evaluate", "--data", "nowhere"]).status.code(), Some(1));
}

#[test]
fn output_root_comes_from_the_environment() {
    let f = Fixture::new();
    let root = f.path("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_slogd"))
        .current_dir(f.dir.path())
        .env("SLOGD_OUTPUT_ROOT", &root)
        .args(["--config", "tiny.toml", "simulate", "--count", "2", "--out", "data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(root.join("data/manifest.jsonl").exists());
    assert!(!f.path("data").exists());
}

#[test]
fn oracle_separation_and_evaluation() {
    let f = Fixture::new();
    f.simulate("data", 6, 3);
    // no checkpoints needed for gcc-phat DOAs with oracle masks
    f.ok(&["separate", "--data", "data", "--doa", "gcc-phat", "--mask", "oracle", "--out", "gcc"]);
    f.ok(&["separate", "--data", "data", "--doa", "oracle", "--mask", "oracle", "--out", "oracle"]);
    assert!(f.path("oracle/resolved_config.toml").exists());
    let scenes: Vec<String> = fs::read_to_string(f.path("data/manifest.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"test\""))
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(scenes.len(), 2);
    for id in &scenes {
        for file in ["spk1.wav", "spk2.wav", "masks.bin", "diagnostics.json"] {
            assert!(f.path(&format!("oracle/{id}/{file}")).exists());
        }
    }

    f.ok(&["evaluate", "--results", "oracle", "--out", "r1", "--emit-plot-data"]);
    f.ok(&["evaluate", "--results", "oracle", "--out", "r2"]);
    for file in ["metrics.csv", "metrics.json"] {
        assert_eq!(read(&f.path(&format!("r1/{file}"))), read(&f.path(&format!("r2/{file}"))));
    }
    assert!(f.path("r1/plot_data.json").exists());
    let report: serde_json::Value = serde_json::from_slice(&read(&f.path("r1/metrics.json"))).unwrap();
    let agg = &report["aggregates"];
    assert!(agg["median_improvement_db"].as_f64().unwrap() > 0.0, "{agg}");
    assert_eq!(agg["duplicate_rate"].as_f64(), Some(0.0));
    assert!(report["missing"].as_array().unwrap().is_empty());

    // a scene without outputs is listed, not fatal
    fs::remove_dir_all(f.path(&format!("oracle/{}", scenes[0]))).unwrap();
    f.ok(&["evaluate", "--results", "oracle", "--out", "r3"]);
    let report: serde_json::Value = serde_json::from_slice(&read(&f.path("r3/metrics.json"))).unwrap();
    assert_eq!(report["missing"], serde_json::json!([scenes[0]]));
    assert_eq!(report["scenes"].as_array().unwrap().len(), 1);

    // oracle modes need ground truth
    let mix = fs::read_to_string(f.path("data/manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(mix.lines().next().unwrap()).unwrap();
    let wav = f.path("data").join(first["mixture_path"].as_str().unwrap());
    let out = f.run(&["separate", "--input", wav.to_str().unwrap(), "--doa", "oracle", "--mask", "oracle"]);
    assert_eq!(out.status.code(), Some(1));
}

fn write_two_channel(path: &Path) {
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..16_000 {
        let v = ((i as f64 * 0.05).sin() * 8000.0) as i16;
        w.write_sample(v).unwrap();
        w.write_sample(v / 2).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn localize_outputs_and_channel_check() {
    let f = Fixture::new();
    f.simulate("data", 6, 4);
    f.ok(&["localize", "--data", "data", "--split", "all"]);
    let rows: serde_json::Value = serde_json::from_slice(&read(&f.path("localize/localize.json"))).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        let d = r["doa_deg"].as_f64().unwrap();
        assert!((0.0..=180.0).contains(&d));
        assert!(r["abs_err_deg"].as_f64().unwrap() >= 0.0);
    }
    write_two_channel(&f.path("stereo.wav"));
    let out = f.run(&["localize", "--input", "stereo.wav"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_then_separate_with_networks() {
    let f = Fixture::new();
    f.simulate("data", 6, 5);
    let out = f.run(&["train", "--stage", "mask1"]);
    assert_eq!(out.status.code(), Some(1), "ordering must be enforced");

    f.ok(&["train", "--stage", "all"]);
    for s in ["doa1", "mask1", "doa2", "mask2"] {
        assert!(f.path(&format!("checkpoints/{s}.ckpt")).exists());
    }
    assert!(f.path("checkpoints/resolved_config.toml").exists());
    let report: serde_json::Value = serde_json::from_slice(&read(&f.path("checkpoints/train_report.json"))).unwrap();
    let steps_before = report[0]["steps"].as_u64().unwrap();

    f.ok(&["train", "--stage", "doa1", "--resume", "--epochs", "2"]);
    let report: serde_json::Value = serde_json::from_slice(&read(&f.path("checkpoints/train_report.json"))).unwrap();
    assert!(report[0]["steps"].as_u64().unwrap() > steps_before);

    f.ok(&["separate", "--data", "data", "--checkpoints", "checkpoints", "--out", "neural"]);
    f.ok(&["separate", "--data", "data", "--checkpoints", "checkpoints", "--out", "neural2"]);
    f.ok(&["evaluate", "--results", "neural", "--out", "r1"]);
    f.ok(&["evaluate", "--results", "neural2", "--out", "r2"]);
    assert_eq!(read(&f.path("r1/metrics.json")), read(&f.path("r2/metrics.json")));

    f.ok(&["localize", "--data", "data", "--method", "neural", "--checkpoints", "checkpoints"]);

    write_two_channel(&f.path("stereo.wav"));
    let out = f.run(&["separate", "--input", "stereo.wav", "--checkpoints", "checkpoints"]);
    assert_eq!(out.status.code(), Some(1));
}
