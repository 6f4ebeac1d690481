//! Run configuration: one TOML document describing scene, front end, methods
//! and outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fov::FovSpec;
use crate::moe::MoeConfig;
use crate::pipeline::{AdaptiveConfig, EvalConfig, HrtfSource, Method, SetupConfig};
use crate::scene::SceneConfig;
use crate::stft::StftConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Where the dry source signal comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Seeded speech-like noise covering the trajectory.
    #[default]
    Synthetic,
    /// Mono WAV (first channel used if there are several).
    Wav { path: PathBuf },
}

/// Steering model used for the directional gain export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatternSteering {
    /// The configured array geometry.
    #[default]
    Physical,
    /// Square unitary steering with one virtual microphone per grid direction.
    Square,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    pub gammas: Vec<f64>,
    pub steering: PatternSteering,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            steering: PatternSteering::Physical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub setup: SetupConfig,
    #[serde(default)]
    pub moe: MoeConfig,
    #[serde(default)]
    pub adaptive: AdaptiveConfig,
    #[serde(default)]
    pub fov: Option<FovSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub pattern: PatternConfig,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Bsm, Method::MoeCompass]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            methods: default_methods(),
            output_dir: default_output_dir(),
            scene: SceneConfig::default(),
            stft: StftConfig::default(),
            setup: SetupConfig::default(),
            moe: MoeConfig::default(),
            adaptive: AdaptiveConfig::default(),
            fov: None,
            eval: EvalConfig::default(),
            source: SourceConfig::default(),
            pattern: PatternConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative source and HRTF paths are taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let SourceConfig::Wav { path } = &mut self.source {
            fix(path);
        }
        if let HrtfSource::File { path } = &mut self.setup.hrtf {
            fix(path);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config(
                "methods must name at least one method".into(),
            ));
        }
        self.scene.validate()?;
        self.stft.validate()?;
        if self.stft.sample_rate != self.scene.sample_rate {
            return Err(Error::Config(format!(
                "stft.sample_rate {} differs from scene.sample_rate {}",
                self.stft.sample_rate, self.scene.sample_rate
            )));
        }
        self.setup.validate()?;
        self.moe.validate()?;
        self.adaptive.validate()?;
        self.eval.validate()?;
        if let Some(fov) = &self.fov {
            fov.validate(&crate::grid::DirectionGrid::horizontal(
                self.setup.grid_size,
            ))?;
        }
        for g in &self.pattern.gammas {
            if !(0.0..=1.0).contains(g) {
                return Err(Error::Config(format!(
                    "pattern.gammas must lie in [0, 1], got {g}"
                )));
            }
        }
        Ok(())
    }

    /// Whether any selected method is a mixture of experts.
    pub fn has_moe(&self) -> bool {
        self.methods.iter().any(|m| m.expert_design().is_some())
    }
}
