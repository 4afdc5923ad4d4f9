//! Experiment plans: a list of inversion runs executed serially, each
//! producing a run record plus PNG artifacts under `runs/<id>/`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::CentroidCache;
use crate::degrade;
use crate::generator::{ClassLabel, Generator, LatentZ, ToyGenerator};
use crate::harness::config::{RunConfig, TaskConfig};
use crate::harness::record::{ArtifactPaths, FinalMetrics, PairMetrics, RunRecord, TargetInfo};
use crate::image::ImageTensor;
use crate::invert::{InversionMode, Inverter, OffsetPenalty};
use crate::perception::{frechet_distance, pixel_l2, psnr_from_mse, FeatureExtractor};
use crate::rng::stream;
use crate::{Error, Result};

/// Where one run's degraded observation comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TargetSource {
    /// Ground-truth latent drawn from this seed; the observation is the
    /// degraded synthesis. `off_manifold` blends in a seeded low-frequency
    /// pattern the generator cannot produce, standing in for real inputs
    /// that never lie exactly in the generator's range.
    Synthetic {
        seed: u64,
        #[serde(default)]
        off_manifold: f64,
    },
    /// An existing (already degraded) image file, with an optional clean
    /// reference for evaluation.
    File {
        path: PathBuf,
        #[serde(default)]
        clean: Option<PathBuf>,
    },
}

/// Seeded smooth pattern outside the generator's range: one sinusoidal
/// wave per channel with random orientation and phase.
pub fn off_manifold_pattern(seed: u64, height: usize, width: usize, amplitude: f64) -> ImageTensor {
    let mut r = stream(seed, "target.offmanifold");
    let mut pixels = ndarray::Array3::zeros((height, width, 3));
    for c in 0..3 {
        let kx: f64 = rand::Rng::random_range(&mut r, 0.5..2.0);
        let ky: f64 = rand::Rng::random_range(&mut r, 0.5..2.0);
        let phase: f64 = rand::Rng::random_range(&mut r, 0.0..std::f64::consts::TAU);
        let amp = amplitude * rand::Rng::random_range(&mut r, 0.6..1.0);
        for i in 0..height {
            let y = (i as f64 + 0.5) / height as f64;
            for j in 0..width {
                let x = (j as f64 + 0.5) / width as f64;
                pixels[[i, j, c]] =
                    amp * (std::f64::consts::TAU * (kx * x + ky * y) + phase).sin();
            }
        }
    }
    ImageTensor { pixels }
}

/// Per-entry deviations from the base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub clusters: Option<usize>,
    pub lambda2: Option<f64>,
    pub penalty: Option<OffsetPenalty>,
    pub stage1_iters: Option<usize>,
    pub stage2_iters: Option<usize>,
    pub task: Option<TaskConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub class: usize,
    pub target: TargetSource,
    pub mode: InversionMode,
    /// Run seed for the optimizer-side randomness.
    pub seed: u64,
    #[serde(default)]
    pub overrides: Overrides,
}

/// A serially executed list of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub entries: Vec<PlanEntry>,
}

impl ExperimentPlan {
    pub fn new(entries: Vec<PlanEntry>) -> Self {
        Self {
            output_dir: None,
            entries,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            if !seen.insert(&entry.id) {
                return Err(Error::Config(format!("duplicate run id '{}'", entry.id)));
            }
            if entry.id.is_empty() || entry.id.contains(['/', '\\']) {
                return Err(Error::Config(format!("invalid run id '{}'", entry.id)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization, recorded in every run
    /// record produced from this plan.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Executes every entry serially against one generator/extractor pair,
/// sharing a centroid cache across entries.
pub struct PlanRunner<'a> {
    pub config: &'a RunConfig,
    pub out_root: &'a Path,
    generator: ToyGenerator,
    extractor: FeatureExtractor,
    cache: CentroidCache,
}

impl<'a> PlanRunner<'a> {
    pub fn new(config: &'a RunConfig, out_root: &'a Path) -> Result<Self> {
        let generator = config.build_generator();
        let extractor = config.build_extractor()?;
        let cache = CentroidCache::on_disk(out_root.join("cache").join("centroids"));
        Ok(Self {
            config,
            out_root,
            generator,
            extractor,
            cache,
        })
    }

    pub fn generator(&self) -> &ToyGenerator {
        &self.generator
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn execute(&mut self, plan: &ExperimentPlan) -> Result<Vec<RunRecord>> {
        plan.validate()?;
        let hash = plan.hash();
        let mut records = Vec::with_capacity(plan.entries.len());
        for entry in &plan.entries {
            log::info!("run {} (mode {})", entry.id, entry.mode.as_str());
            records.push(self.run_entry(entry, Some(hash.clone()))?);
        }
        Ok(records)
    }

    /// Runs one entry end-to-end and writes its record and artifacts.
    pub fn run_entry(&mut self, entry: &PlanEntry, plan_hash: Option<String>) -> Result<RunRecord> {
        let cfg = self.config;
        let layout = *self.generator.layout();
        let task = entry
            .overrides
            .task
            .clone()
            .unwrap_or_else(|| cfg.task.clone());
        let spec = task.to_spec(layout.height, layout.width)?;

        let (clean, degraded, target_info) = match &entry.target {
            TargetSource::Synthetic { seed, off_manifold } => {
                let mut r = stream(*seed, "target");
                let z = LatentZ::sample(&mut r, layout.d_z);
                let w = self.generator.map(&z, ClassLabel(entry.class))?;
                let mut clean = self.generator.synthesize(&w)?;
                if *off_manifold > 0.0 {
                    let pattern =
                        off_manifold_pattern(*seed, layout.height, layout.width, *off_manifold);
                    clean
                        .pixels
                        .iter_mut()
                        .zip(pattern.pixels.iter())
                        .for_each(|(v, p)| *v = (*v + p).clamp(0.0, 1.0));
                }
                let degraded = degrade::apply(&spec, &clean)?;
                (Some(clean), degraded, TargetInfo::Synthetic { seed: *seed })
            }
            TargetSource::File { path, clean } => {
                let degraded = ImageTensor::load_png(path)?;
                let clean_img = clean.as_ref().map(|p| ImageTensor::load_png(p)).transpose()?;
                (
                    clean_img,
                    degraded,
                    TargetInfo::File {
                        path: path.clone(),
                        clean: clean.clone(),
                    },
                )
            }
        };

        let mut icfg = cfg.invert_config(entry.mode, entry.seed);
        if let Some(n) = entry.overrides.clusters {
            icfg.cluster.clusters = n;
        }
        if let Some(l2) = entry.overrides.lambda2 {
            icfg.weights.lambda2 = l2;
        }
        if let Some(p) = entry.overrides.penalty {
            icfg.penalty_override = Some(p);
        }
        if let Some(n) = entry.overrides.stage1_iters {
            icfg.schedule.stage1_iters = n;
        }
        if let Some(n) = entry.overrides.stage2_iters {
            icfg.schedule.stage2_iters = n;
        }

        let inverter = Inverter::new(&self.generator, &self.extractor);
        let result = inverter.invert(
            &degraded,
            ClassLabel(entry.class),
            &spec,
            &icfg,
            cfg.generator.seed,
            Some(&mut self.cache),
        )?;

        // Artifacts. Everything metric-bearing is written as 8-bit PNG and
        // the metrics are computed on the quantized images, so `eval` can
        // re-derive them from disk exactly.
        let run_dir = self.out_root.join("runs").join(&entry.id);
        std::fs::create_dir_all(&run_dir)?;
        let rel = |name: &str| format!("runs/{}/{name}", entry.id);

        let input_img = clean.clone().unwrap_or_else(|| degraded.clone());
        input_img.save_png(&run_dir.join("input.png"))?;
        degraded.save_png(&run_dir.join("degraded.png"))?;
        result.restored.save_png(&run_dir.join("restored.png"))?;
        let centroid_img = self.generator.synthesize(&result.w_cen)?;
        centroid_img.save_png(&run_dir.join("centroid.png"))?;

        let restored_q = result.restored.quantized();
        let degraded_q = degraded.quantized();
        let vs_clean = match &clean {
            Some(c) => {
                let cq = c.quantized();
                let mse = pixel_l2(&cq, &restored_q)?;
                Some(PairMetrics {
                    perceptual: self.extractor.perceptual_distance(&cq, &restored_q)?,
                    pixel_mse: mse,
                    psnr_db: psnr_from_mse(mse),
                })
            }
            None => None,
        };
        let deg_restored = degrade::apply(&spec, &restored_q)?;
        let observed_mse = pixel_l2(&degraded_q, &deg_restored)?;
        let observed = PairMetrics {
            perceptual: observed_distance(&self.extractor, &degraded_q, &deg_restored, layout)?,
            pixel_mse: observed_mse,
            psnr_db: psnr_from_mse(observed_mse),
        };

        // Fréchet against the class centroid images under the base cluster
        // config, so scores stay comparable across sweep entries.
        let generator = &self.generator;
        let reference = self.cache.get_or_compute(
            cfg.generator.seed,
            ClassLabel(entry.class),
            &cfg.cluster,
            || crate::cluster::cluster_class(generator, ClassLabel(entry.class), &cfg.cluster),
        )?;
        let ref_images: Vec<ImageTensor> =
            reference.center_images.iter().map(|i| i.quantized()).collect();
        let (mu1, c1) = self.extractor.embed_set(std::slice::from_ref(&restored_q));
        let (mu2, c2) = self.extractor.embed_set(&ref_images);
        let frechet = frechet_distance(&mu1, &c1, &mu2, &c2)?;

        let metrics = FinalMetrics {
            vs_clean,
            observed,
            frechet_vs_centers: frechet,
            offset_norm_l2: result.w_off.norm_l2(),
            offset_norm_l1: result.w_off.norm_l1(),
            theta_shift_l2: result.theta_shift,
        };
        let artifacts = ArtifactPaths {
            input: rel("input.png"),
            degraded: rel("degraded.png"),
            restored: rel("restored.png"),
            centroid: rel("centroid.png"),
        };
        let record = RunRecord::assemble(
            &entry.id,
            plan_hash,
            cfg,
            &entry.overrides,
            entry.seed,
            target_info,
            &result,
            metrics,
            artifacts,
        );
        record.save(&run_dir)?;
        Ok(record)
    }
}

/// Perceptual distance between observation-sized images, upsampling to
/// generator resolution first when the task reduced the resolution.
fn observed_distance(
    extractor: &FeatureExtractor,
    a: &ImageTensor,
    b: &ImageTensor,
    layout: crate::generator::Layout,
) -> Result<f64> {
    if a.dims() == (layout.height, layout.width) {
        extractor.perceptual_distance(a, b)
    } else {
        let ua = crate::image::resize_bilinear(a, layout.height, layout.width);
        let ub = crate::image::resize_bilinear(b, layout.height, layout.width);
        extractor.perceptual_distance(&ua, &ub)
    }
}
