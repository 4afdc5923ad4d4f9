//! Run records: full provenance of one inversion, serialized as JSON next
//! to the image artifacts.
//!
//! Final metrics are computed on the exported 8-bit images, so `eval` can
//! re-derive every number from the artifacts alone. Together with the
//! config snapshot and seeds a record reproduces its run bit-for-bit when
//! executed serially.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::harness::config::RunConfig;
use crate::invert::{InversionMode, InversionResult, OffsetPenalty, Stage1Record, Stage2Record};
use crate::{Result, TOOL_VERSION};

/// Distance triple between a reference image and the restored image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub perceptual: f64,
    pub pixel_mse: f64,
    pub psnr_db: f64,
}

/// Final metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Against the clean ground truth, when known.
    pub vs_clean: Option<PairMetrics>,
    /// Degraded restored image against the observation.
    pub observed: PairMetrics,
    /// Desk-scale Fréchet score of the restored image against the class
    /// centroid images under the base cluster config.
    pub frechet_vs_centers: f64,
    pub offset_norm_l2: f64,
    pub offset_norm_l1: f64,
    pub theta_shift_l2: f64,
}

/// Where the degraded observation came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TargetInfo {
    /// Synthesized from a seeded ground-truth latent.
    Synthetic { seed: u64 },
    /// Loaded from a file; `clean` optionally names a ground-truth image.
    File {
        path: PathBuf,
        clean: Option<PathBuf>,
    },
}

/// Centroid provenance: which center won and the full distance table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidProvenance {
    pub selected: usize,
    pub distances: Vec<f64>,
    pub inertia: f64,
    pub cluster_sizes: Vec<usize>,
}

/// Paths of the exported PNGs, relative to the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub input: String,
    pub degraded: String,
    pub restored: String,
    pub centroid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub created_unix_secs: u64,
    pub run_id: String,
    pub plan_hash: Option<String>,
    pub mode: InversionMode,
    pub run_seed: u64,
    pub class: usize,
    pub config: RunConfig,
    /// Per-run deviations from the config (sweep knobs).
    pub overrides: crate::harness::plan::Overrides,
    pub target: TargetInfo,
    pub centroid: CentroidProvenance,
    pub locality_radius: f64,
    pub stage1: Vec<Stage1Record>,
    pub stage2: Vec<Stage2Record>,
    pub stage1_best_iter: usize,
    pub stage2_best_iter: usize,
    pub metrics: FinalMetrics,
    pub artifacts: ArtifactPaths,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        run_id: &str,
        plan_hash: Option<String>,
        config: &RunConfig,
        overrides: &crate::harness::plan::Overrides,
        run_seed: u64,
        target: TargetInfo,
        result: &InversionResult,
        metrics: FinalMetrics,
        artifacts: ArtifactPaths,
    ) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            created_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            run_id: run_id.to_string(),
            plan_hash,
            mode: result.mode,
            run_seed,
            class: result.class,
            config: config.clone(),
            overrides: overrides.clone(),
            target,
            centroid: CentroidProvenance {
                selected: result.centroid_index,
                distances: result.centroid_distances.clone(),
                inertia: result.cluster_inertia,
                cluster_sizes: result.cluster_sizes.clone(),
            },
            locality_radius: result.locality_radius,
            stage1: result.stage1.clone(),
            stage2: result.stage2.clone(),
            stage1_best_iter: result.stage1_best_iter,
            stage2_best_iter: result.stage2_best_iter,
            metrics,
            artifacts,
            wall_clock_secs: result.wall_clock_secs,
        }
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("record.json");
        let tmp = dir.join("record.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// The metric fields serialized on their own, for byte-level
    /// reproducibility comparisons.
    pub fn metrics_json(&self) -> String {
        serde_json::to_string(&self.metrics).expect("metrics serialize")
    }

    /// Stage-one penalty kind actually used by this run.
    pub fn effective_penalty(&self) -> OffsetPenalty {
        self.overrides.penalty.unwrap_or(match self.mode {
            InversionMode::Cri | InversionMode::AvgInit => OffsetPenalty::L2,
            _ => OffsetPenalty::None,
        })
    }
}
