//! Run configuration: one TOML file with a section per stage, overridden by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slogd::models::TrainConfig;
use slogd::pipeline::PipelineConfig;
use slogd::scene::{GeneratorConfig, SceneConfig};

use crate::CliError;

/// Overrides `output_root` from the config file.
pub const OUTPUT_ROOT_ENV: &str = "SLOGD_OUTPUT_ROOT";
/// Copy of the resolved configuration written into every output directory.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub count: usize,
    /// Speech corpus with one subdirectory of WAV files per speaker; the
    /// synthetic generator is used when absent.
    pub corpus_dir: Option<PathBuf>,
    pub synthetic_speakers: usize,
    /// Multichannel noise recordings; diffuse noise is synthesized when absent.
    pub noise_dir: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            count: 200,
            corpus_dir: None,
            synthetic_speakers: 40,
            noise_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Base for relative output and artifact paths.
    pub output_root: PathBuf,
    pub simulate: SimulateConfig,
    pub generator: GeneratorConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("."),
            simulate: SimulateConfig::default(),
            generator: GeneratorConfig::default(),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {path:?}: {e}")))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{path:?}: {m}")),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(p) = value.get("pipeline").and_then(|v| v.as_table()) {
            for key in ["geometry", "stft"] {
                if p.contains_key(key) {
                    return Err(CliError::Config(format!("set {key} under [scene], not [pipeline]")));
                }
            }
        }
        value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    /// Applies the environment override and propagates shared settings.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.output_root = PathBuf::from(root);
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.pipeline.geometry = self.scene.geometry.clone();
        self.pipeline.stft = self.scene.stft.clone();
        self.generator.validate()?;
        self.scene.stft.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    /// Relative paths are taken from the output root.
    pub fn under_root(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_root.join(p)
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {dir:?}: {e}")))?;
        let ser = |e: toml::ser::Error| CliError::Runtime(format!("cannot serialize config: {e}"));
        let mut table = toml::Table::try_from(self).map_err(ser)?;
        // Geometry and STFT are shared from [scene]; keep the copy loadable.
        if let Some(p) = table.get_mut("pipeline").and_then(|v| v.as_table_mut()) {
            p.remove("geometry");
            p.remove("stft");
        }
        let text = toml::to_string(&table).map_err(ser)?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, text).map_err(|e| CliError::Runtime(format!("cannot write {p:?}: {e}")))
    }
}
