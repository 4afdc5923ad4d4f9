//! Run configuration: JSON sections with spec defaults, strict parsing and
//! validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::degrade::DegradationSpec;
use crate::generator::{Layout, ToyGenerator};
use crate::invert::{InvertConfig, InversionMode, LatentSpace, LossWeights, StageSchedule};
use crate::perception::FeatureExtractor;
use crate::{Error, Result};

/// Generator seed and layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub d_z: usize,
    pub d_w: usize,
    pub layers: usize,
    pub classes: usize,
    pub modes: usize,
    pub height: usize,
    pub width: usize,
    pub mode_separation: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let l = Layout::default();
        Self {
            seed: 11,
            d_z: l.d_z,
            d_w: l.d_w,
            layers: l.layers,
            classes: l.classes,
            modes: l.modes,
            height: l.height,
            width: l.width,
            mode_separation: l.mode_separation,
        }
    }
}

impl GeneratorConfig {
    pub fn layout(&self) -> Layout {
        Layout {
            d_z: self.d_z,
            d_w: self.d_w,
            layers: self.layers,
            classes: self.classes,
            modes: self.modes,
            height: self.height,
            width: self.width,
            mode_separation: self.mode_separation,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("generator.d_z", self.d_z),
            ("generator.d_w", self.d_w),
            ("generator.layers", self.layers),
            ("generator.classes", self.classes),
            ("generator.modes", self.modes),
            ("generator.height", self.height),
            ("generator.width", self.width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.mode_separation < 10.0 {
            return Err(Error::Config(format!(
                "generator.mode_separation must be >= 10, got {}",
                self.mode_separation
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(
                "generator resolution must be divisible by 4 for the feature pyramid".into(),
            ));
        }
        Ok(())
    }
}

/// Restoration task names as they appear on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Inpaint,
    Colorize,
    Sr,
    Identity,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inpaint" => Ok(Self::Inpaint),
            "colorize" => Ok(Self::Colorize),
            "sr" => Ok(Self::Sr),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Declarative task description; lowered to a [`DegradationSpec`] at run
/// time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Super-resolution factor.
    pub scale: usize,
    /// Optional mask PNG (nonzero = observed); otherwise a centered
    /// rectangular hole of `mask_coverage` of the area.
    pub mask: Option<PathBuf>,
    pub mask_coverage: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Inpaint,
            scale: 4,
            mask: None,
            mask_coverage: 0.25,
        }
    }
}

impl TaskConfig {
    pub fn to_spec(&self, height: usize, width: usize) -> Result<DegradationSpec> {
        match self.kind {
            TaskKind::Identity => Ok(DegradationSpec::Identity),
            TaskKind::Colorize => Ok(DegradationSpec::Grayscale),
            TaskKind::Sr => Ok(DegradationSpec::Downsample { factor: self.scale }),
            TaskKind::Inpaint => match &self.mask {
                Some(path) => DegradationSpec::mask_from_png(path),
                None => Ok(DegradationSpec::centered_mask(
                    height,
                    width,
                    self.mask_coverage,
                )),
            },
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.kind == TaskKind::Sr {
            if self.scale == 0 {
                return Err(Error::Config("task.scale must be positive".into()));
            }
            if height % self.scale != 0 || width % self.scale != 0 {
                return Err(Error::Config(format!(
                    "task.scale {} does not divide the generator resolution {height}x{width}",
                    self.scale
                )));
            }
        }
        if !(self.mask_coverage > 0.0 && self.mask_coverage < 1.0) {
            return Err(Error::Config(format!(
                "task.mask_coverage must be in (0, 1), got {}",
                self.mask_coverage
            )));
        }
        Ok(())
    }
}

/// Feature extractor settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub seed: u64,
    pub scales: usize,
    pub channels: usize,
    /// Externally supplied backbone weights (JSON manifest path).
    pub weight_file: Option<PathBuf>,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            seed: 5,
            scales: 3,
            channels: 16,
            weight_file: None,
        }
    }
}

/// Inversion-level switches that are not loss weights or schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub latent_space: LatentSpace,
    /// Degrade center images before the selection embedding.
    pub degrade_centers: bool,
    /// Fixed locality radius; derived from the class sample when absent.
    pub locality_radius: Option<f64>,
}

impl Default for InvertSection {
    fn default() -> Self {
        Self {
            latent_space: LatentSpace::WPlus,
            degrade_centers: false,
            locality_radius: None,
        }
    }
}

/// The full configuration file: `{generator, cluster, weights, schedule,
/// task, perception, invert}`. Unknown keys are rejected; missing keys take
/// the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub cluster: ClusterConfig,
    pub weights: LossWeights,
    pub schedule: StageSchedule,
    pub task: TaskConfig,
    pub perception: PerceptionConfig,
    pub invert: InvertSection,
}

impl RunConfig {
    /// Loads and validates a config file. An empty file means all defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = if text.trim().is_empty() {
            RunConfig::default()
        } else {
            serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("config parse error: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Effective config with all defaults applied, for echoing and records.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.cluster.validate()?;
        self.weights.validate()?;
        self.schedule.validate()?;
        self.task.validate(self.generator.height, self.generator.width)?;
        if self.perception.scales == 0 || self.perception.channels == 0 {
            return Err(Error::Config(
                "perception.scales and perception.channels must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn build_generator(&self) -> ToyGenerator {
        ToyGenerator::new(self.generator.seed, self.generator.layout())
    }

    pub fn build_extractor(&self) -> Result<FeatureExtractor> {
        match &self.perception.weight_file {
            Some(path) => FeatureExtractor::from_weight_file(path),
            None => Ok(FeatureExtractor::seeded(
                self.perception.seed,
                self.perception.scales,
                self.perception.channels,
            )),
        }
    }

    pub fn degradation_spec(&self) -> Result<DegradationSpec> {
        self.task
            .to_spec(self.generator.height, self.generator.width)
    }

    /// Lowers the config to the per-run inversion settings.
    pub fn invert_config(&self, mode: InversionMode, run_seed: u64) -> InvertConfig {
        InvertConfig {
            cluster: self.cluster.clone(),
            weights: self.weights,
            schedule: self.schedule,
            mode,
            latent_space: self.invert.latent_space,
            degrade_centers: self.invert.degrade_centers,
            locality_radius: self.invert.locality_radius,
            penalty_override: None,
            seed: run_seed,
        }
    }

    /// Schedule preset matching the large natural-image setup (1000/350,
    /// super-resolution factor 4).
    pub fn preset_complex() -> Self {
        let mut cfg = Self::default();
        cfg.schedule.stage1_iters = 1000;
        cfg.schedule.stage2_iters = 350;
        cfg.task.scale = 4;
        cfg
    }

    /// Schedule preset matching the face setup (500/20, super-resolution
    /// factor 16).
    pub fn preset_face() -> Self {
        let mut cfg = Self::default();
        cfg.schedule.stage1_iters = 500;
        cfg.schedule.stage2_iters = 20;
        cfg.task.scale = 16;
        cfg.generator.height = 64;
        cfg.generator.width = 64;
        cfg
    }
}
