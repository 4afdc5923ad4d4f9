//! Class-conditional latent sampling, k-means clustering and centroid
//! selection.
//!
//! Sampling runs the mapping network on i.i.d. normal latents; clustering
//! operates in the pre-replication style space (identical rows carry no
//! extra information) with k-means++ seeding, Lloyd iterations and
//! lowest-inertia restarts; selection picks the cluster center whose
//! synthesized image is nearest the degraded input in feature space.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::degrade::{self, DegradationSpec};
use crate::generator::{ClassLabel, Generator, LatentW, LatentZ};
use crate::image::{resize_bilinear, ImageTensor};
use crate::perception::FeatureExtractor;
use crate::rng::stream;
use crate::{Error, Result};

/// Sampling and clustering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Number of latent samples drawn per class.
    pub samples: usize,
    /// Number of clusters.
    pub clusters: usize,
    /// Lloyd iteration cap.
    pub kmeans_iters: usize,
    /// Relative center-shift convergence threshold.
    pub tol: f64,
    /// Stream seed for sampling and seeding.
    pub seed: u64,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            clusters: 10,
            kmeans_iters: 100,
            tol: 1e-6,
            seed: 7,
            restarts: 8,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Config("cluster.clusters must be >= 1".into()));
        }
        if self.clusters > self.samples {
            return Err(Error::Config(format!(
                "cluster.clusters ({}) must not exceed cluster.samples ({})",
                self.clusters, self.samples
            )));
        }
        if self.restarts == 0 {
            return Err(Error::Config("cluster.restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cluster centers of one class with their synthesized images.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// `N x d_w` centers in the pre-replication style space.
    pub centers: Array2<f64>,
    /// Synthesized image of each center.
    pub center_images: Vec<ImageTensor>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    pub cluster_sizes: Vec<usize>,
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, i: usize) -> Array1<f64> {
        self.centers.row(i).to_owned()
    }
}

/// Draws `count` mapped latents for a class; deterministic given the seed.
pub fn sample_latents<G: Generator>(
    gen: &G,
    class: ClassLabel,
    count: usize,
    seed: u64,
) -> Result<Vec<LatentW>> {
    let bases = sample_latent_bases(gen, class, count, seed)?;
    Ok(bases
        .rows()
        .into_iter()
        .map(|row| LatentW::from_base(&row.to_owned(), gen.layout().layers))
        .collect())
}

/// Same as [`sample_latents`] but returns the `count x d_w` matrix of
/// pre-replication style vectors, the form clustering consumes.
pub fn sample_latent_bases<G: Generator>(
    gen: &G,
    class: ClassLabel,
    count: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let d_z = gen.layout().d_z;
    let d_w = gen.layout().d_w;
    let mut rng = stream(seed, &format!("latents.class{}", class.0));
    let mut out = Array2::zeros((count, d_w));
    for i in 0..count {
        let z = LatentZ::sample(&mut rng, d_z);
        let w = gen.map_base(&z, class)?;
        out.row_mut(i).assign(&w);
    }
    Ok(out)
}

/// Plain k-means result before images are attached.
pub struct KmeansFit {
    pub centers: Array2<f64>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub inertia_after_seeding: f64,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding and lowest-inertia restarts.
///
/// Empty clusters are re-seeded to the point currently farthest from its
/// assigned center, which strictly lowers the inertia. Deterministic given
/// `(points, cfg.seed)`.
pub fn kmeans(points: &Array2<f64>, cfg: &ClusterConfig) -> Result<KmeansFit> {
    let n = points.shape()[0];
    let k = cfg.clusters;
    if n < k {
        return Err(Error::TooFewPoints { points: n, clusters: k });
    }
    let mut best: Option<KmeansFit> = None;
    for restart in 0..cfg.restarts.max(1) {
        let fit = kmeans_single(points, cfg, restart)?;
        let better = best.as_ref().map(|b| fit.inertia < b.inertia).unwrap_or(true);
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_single(points: &Array2<f64>, cfg: &ClusterConfig, restart: usize) -> Result<KmeansFit> {
    let n = points.shape()[0];
    let d = points.shape()[1];
    let k = cfg.clusters;
    let mut rng = stream(cfg.seed, &format!("kmeans.restart{restart}"));
    let mut centers = seed_plus_plus(points, k, &mut rng);

    let mut assignment = vec![0usize; n];
    let mut dist_to_center = vec![0.0f64; n];
    assign(points, &centers, &mut assignment, &mut dist_to_center);
    let inertia_after_seeding: f64 = dist_to_center.iter().sum();

    let scale = data_scale(points);
    let mut iterations = 0;
    for _ in 0..cfg.kmeans_iters {
        iterations += 1;
        let new_centers = update_centers(points, &assignment, &centers, &dist_to_center, k, d);
        let shift: f64 = centers
            .rows()
            .into_iter()
            .zip(new_centers.rows())
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        centers = new_centers;
        assign(points, &centers, &mut assignment, &mut dist_to_center);
        if shift <= cfg.tol * scale.max(1e-300) {
            break;
        }
    }
    let inertia: f64 = dist_to_center.iter().sum();
    Ok(KmeansFit {
        centers,
        assignment,
        inertia,
        inertia_after_seeding,
        iterations,
    })
}

/// k-means++: first center uniform, the rest sampled with probability
/// proportional to the squared distance to the nearest chosen center.
fn seed_plus_plus(
    points: &Array2<f64>,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Array2<f64> {
    let n = points.shape()[0];
    let d = points.shape()[1];
    let mut centers = Array2::zeros((k, d));
    let first = rand::Rng::random_range(rng, 0..n);
    centers.row_mut(0).assign(&points.row(first));

    let mut best_d2 = vec![f64::INFINITY; n];
    for chosen in 1..k {
        let prev = centers.row(chosen - 1);
        for (i, point) in points.rows().into_iter().enumerate() {
            let d2: f64 = point
                .iter()
                .zip(prev.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
        let total: f64 = best_d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rand::Rng::random_range(rng, 0.0..1.0) * total;
            let mut pick = n - 1;
            for (i, w) in best_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All points coincide with chosen centers.
            rand::Rng::random_range(rng, 0..n)
        };
        centers.row_mut(chosen).assign(&points.row(idx));
    }
    centers
}

fn assign(
    points: &Array2<f64>,
    centers: &Array2<f64>,
    assignment: &mut [usize],
    dist: &mut [f64],
) {
    let k = centers.shape()[0];
    for (i, point) in points.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for c in 0..k {
            let d2: f64 = point
                .iter()
                .zip(centers.row(c).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 < best_d2 {
                best_d2 = d2;
                best = c;
            }
        }
        assignment[i] = best;
        dist[i] = best_d2;
    }
}

fn update_centers(
    points: &Array2<f64>,
    assignment: &[usize],
    old_centers: &Array2<f64>,
    dist_to_center: &[f64],
    k: usize,
    d: usize,
) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, point) in points.rows().into_iter().enumerate() {
        let c = assignment[i];
        counts[c] += 1;
        let mut row = sums.row_mut(c);
        for (s, v) in row.iter_mut().zip(point.iter()) {
            *s += v;
        }
    }
    let mut centers = old_centers.clone();
    // Farthest points, for re-seeding empty clusters.
    let mut order: Vec<usize> = (0..points.shape()[0]).collect();
    order.sort_by(|a, b| dist_to_center[*b].partial_cmp(&dist_to_center[*a]).unwrap());
    let mut next_farthest = 0usize;
    for c in 0..k {
        if counts[c] == 0 {
            let idx = order[next_farthest.min(order.len() - 1)];
            next_farthest += 1;
            centers.row_mut(c).assign(&points.row(idx));
        } else {
            let inv = 1.0 / counts[c] as f64;
            let mut row = centers.row_mut(c);
            for (cv, s) in row.iter_mut().zip(sums.row(c).iter()) {
                *cv = s * inv;
            }
        }
    }
    centers
}

fn data_scale(points: &Array2<f64>) -> f64 {
    let n = points.shape()[0] as f64;
    (points.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
}

/// Clusters the sampled class latents and synthesizes the center images.
pub fn cluster_class<G: Generator>(
    gen: &G,
    class: ClassLabel,
    cfg: &ClusterConfig,
) -> Result<CentroidSet> {
    cfg.validate()?;
    let bases = sample_latent_bases(gen, class, cfg.samples, cfg.seed)?;
    cluster_from_bases(gen, &bases, cfg)
}

/// Clusters an already-sampled base matrix and synthesizes center images.
pub fn cluster_from_bases<G: Generator>(
    gen: &G,
    bases: &Array2<f64>,
    cfg: &ClusterConfig,
) -> Result<CentroidSet> {
    let fit = kmeans(bases, cfg)?;
    centroid_set_from_fit(gen, fit, cfg.clusters)
}

fn centroid_set_from_fit<G: Generator>(
    gen: &G,
    fit: KmeansFit,
    k: usize,
) -> Result<CentroidSet> {
    let mut sizes = vec![0usize; k];
    for a in &fit.assignment {
        sizes[*a] += 1;
    }
    let mut images = Vec::with_capacity(k);
    for c in 0..k {
        let w = LatentW::from_base(&fit.centers.row(c).to_owned(), gen.layout().layers);
        images.push(gen.synthesize(&w)?);
    }
    Ok(CentroidSet {
        centers: fit.centers,
        center_images: images,
        inertia: fit.inertia,
        cluster_sizes: sizes,
    })
}

/// Picks the center whose synthesized image is nearest the degraded input
/// in squared feature distance (channel-normalized features, the same
/// normalization the perceptual metric uses); ties go to the lowest index.
///
/// Center images are embedded as synthesized. With `degrade_centers` the
/// degradation is applied to them first, making the comparison
/// like-for-like at the cost of an extra degradation pass.
pub fn select_centroid(
    degraded: &ImageTensor,
    set: &CentroidSet,
    extractor: &FeatureExtractor,
    spec: &DegradationSpec,
    degrade_centers: bool,
    native_dims: (usize, usize),
    layers: usize,
) -> Result<(usize, LatentW, Vec<f64>)> {
    if set.is_empty() {
        return Err(Error::Config("centroid set is empty".into()));
    }
    let target = extractor.prepare_target(&extractor.embed(&at_native(degraded, native_dims)));
    let mut distances = Vec::with_capacity(set.len());
    for img in &set.center_images {
        let candidate = if degrade_centers {
            at_native(&degrade::apply(spec, img)?, native_dims)
        } else {
            img.clone()
        };
        distances.push(extractor.distance_value(&target, &candidate));
    }
    let mut best = 0usize;
    for (i, d) in distances.iter().enumerate() {
        if *d < distances[best] {
            best = i;
        }
    }
    let w = set.center(best);
    Ok((best, LatentW::from_base(&w, layers), distances))
}

fn at_native(img: &ImageTensor, native_dims: (usize, usize)) -> ImageTensor {
    if img.dims() == native_dims {
        img.clone()
    } else {
        resize_bilinear(img, native_dims.0, native_dims.1)
    }
}

/// Reuses centroid sets across runs: an in-memory map backed by an optional
/// on-disk store. Keys include every input that determines the clustering.
#[derive(Debug, Default)]
pub struct CentroidCache {
    dir: Option<PathBuf>,
    mem: std::collections::HashMap<CentroidKey, CentroidSet>,
}

impl CentroidCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: PathBuf) -> Self {
        Self {
            dir: Some(dir),
            mem: Default::default(),
        }
    }

    pub fn get_or_compute<F>(
        &mut self,
        generator_seed: u64,
        class: ClassLabel,
        cfg: &ClusterConfig,
        compute: F,
    ) -> Result<CentroidSet>
    where
        F: FnOnce() -> Result<CentroidSet>,
    {
        let key = CentroidKey {
            generator_seed,
            class: class.0,
            samples: cfg.samples,
            clusters: cfg.clusters,
            seed: cfg.seed,
        };
        if let Some(hit) = self.mem.get(&key) {
            return Ok(hit.clone());
        }
        let set = compute()?;
        if let Some(dir) = &self.dir {
            save_centroids(dir, &key, &set)?;
        }
        self.mem.insert(key, set.clone());
        Ok(set)
    }

    /// Loads a previously saved set into the in-memory layer, if present.
    pub fn load_from_disk<G: Generator>(
        &mut self,
        generator_seed: u64,
        class: ClassLabel,
        cfg: &ClusterConfig,
        gen: &G,
    ) -> Result<Option<CentroidSet>> {
        let Some(dir) = self.dir.clone() else {
            return Ok(None);
        };
        let key = CentroidKey {
            generator_seed,
            class: class.0,
            samples: cfg.samples,
            clusters: cfg.clusters,
            seed: cfg.seed,
        };
        if let Some(set) = load_centroids(&dir, &key, gen)? {
            self.mem.insert(key, set.clone());
            return Ok(Some(set));
        }
        Ok(None)
    }
}

/// On-disk form: JSON manifest plus a flat little-endian f64 binary of the
/// centers, keyed by the sampling context so sweeps can reuse samples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Hash)]
pub struct CentroidKey {
    pub generator_seed: u64,
    pub class: usize,
    pub samples: usize,
    pub clusters: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CentroidManifest {
    key: CentroidKey,
    d_w: usize,
    inertia: f64,
    cluster_sizes: Vec<usize>,
    data_file: String,
}

impl CentroidKey {
    pub fn file_stem(&self) -> String {
        format!(
            "centroids-g{}-c{}-m{}-n{}-s{}",
            self.generator_seed, self.class, self.samples, self.clusters, self.seed
        )
    }
}

/// Saves a centroid set under `dir`, returning the manifest path.
pub fn save_centroids(dir: &Path, key: &CentroidKey, set: &CentroidSet) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = key.file_stem();
    let manifest = CentroidManifest {
        key: key.clone(),
        d_w: set.centers.shape()[1],
        inertia: set.inertia,
        cluster_sizes: set.cluster_sizes.clone(),
        data_file: format!("{stem}.bin"),
    };
    let mut bytes = Vec::with_capacity(set.centers.len() * 8);
    for v in set.centers.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let bin_path = dir.join(format!("{stem}.bin"));
    std::fs::File::create(&bin_path)?.write_all(&bytes)?;
    let manifest_path = dir.join(format!("{stem}.json"));
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest_path)
}

/// Reloads a centroid set saved by [`save_centroids`]; center images are
/// re-synthesized, which is exact because synthesis is deterministic.
pub fn load_centroids<G: Generator>(
    dir: &Path,
    key: &CentroidKey,
    gen: &G,
) -> Result<Option<CentroidSet>> {
    let manifest_path = dir.join(format!("{}.json", key.file_stem()));
    if !manifest_path.exists() {
        return Ok(None);
    }
    let manifest: CentroidManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if &manifest.key != key {
        return Err(Error::Config(format!(
            "centroid manifest {} does not match the requested key",
            manifest_path.display()
        )));
    }
    let bin_path = dir.join(&manifest.data_file);
    let mut bytes = Vec::new();
    std::fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
    let expected = key.clusters * manifest.d_w * 8;
    if bytes.len() != expected {
        return Err(Error::Config(format!(
            "centroid binary {} has {} bytes, expected {expected}",
            bin_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let centers = Array2::from_shape_vec((key.clusters, manifest.d_w), values)
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut images = Vec::with_capacity(key.clusters);
    for c in 0..key.clusters {
        let w = LatentW::from_base(&centers.row(c).to_owned(), gen.layout().layers);
        images.push(gen.synthesize(&w)?);
    }
    Ok(Some(CentroidSet {
        centers,
        center_images: images,
        inertia: manifest.inertia,
        cluster_sizes: manifest.cluster_sizes,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Layout, ToyGenerator};

    fn toy() -> ToyGenerator {
        ToyGenerator::new(11, Layout::default())
    }

    #[test]
    fn sampling_is_deterministic_and_sized() {
        let gen = toy();
        let a = sample_latents(&gen, ClassLabel(1), 16, 3).unwrap();
        let b = sample_latents(&gen, ClassLabel(1), 16, 3).unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, b);
        let empty = sample_latents(&gen, ClassLabel(1), 0, 3).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn one_mode_class_sample_mean_approaches_the_mode_center() {
        // A single-mode layout: the unconditional mean is the mode center.
        let layout = Layout {
            modes: 1,
            classes: 1,
            ..Layout::default()
        };
        let gen = ToyGenerator::new(21, layout);
        let m = 10_000;
        let bases = sample_latent_bases(&gen, ClassLabel(0), m, 55).unwrap();
        let mean = bases.mean_axis(ndarray::Axis(0)).unwrap();
        let center = gen.mode_center(ClassLabel(0), 0);
        let sigma = gen.coordinate_std();
        let bound = 3.0 / (m as f64).sqrt();
        for j in 0..mean.len() {
            let err = (mean[j] - center[j]).abs();
            assert!(
                err < bound * sigma[j].max(1e-6),
                "coordinate {j}: err {err:.5e} vs bound {:.5e}",
                bound * sigma[j]
            );
        }
    }

    #[test]
    fn kmeans_recovers_planar_fixture_optimum() {
        // Brute force over all 2-partitions of the 4 points gives centers
        // (0, 0.5) and (10, 0.5).
        let points = Array2::from_shape_vec(
            (4, 2),
            vec![0.0, 0.0, 0.0, 1.0, 10.0, 0.0, 10.0, 1.0],
        )
        .unwrap();
        let brute = brute_force_two_means(&points);
        let cfg = ClusterConfig {
            samples: 4,
            clusters: 2,
            seed: 1,
            ..ClusterConfig::default()
        };
        let fit = kmeans(&points, &cfg).unwrap();
        let mut got: Vec<Vec<f64>> = fit
            .centers
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        got.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        for (g, e) in got.iter().zip(brute.iter()) {
            for (x, y) in g.iter().zip(e.iter()) {
                assert!((x - y).abs() < 1e-6, "{got:?} vs {brute:?}");
            }
        }
        assert!(fit.inertia <= fit.inertia_after_seeding + 1e-12);
    }

    fn brute_force_two_means(points: &Array2<f64>) -> Vec<Vec<f64>> {
        let n = points.shape()[0];
        let d = points.shape()[1];
        let mut best = (f64::INFINITY, Vec::new());
        for mask in 1..(1u32 << n) - 1 {
            let mut groups = vec![Vec::new(), Vec::new()];
            for i in 0..n {
                groups[((mask >> i) & 1) as usize].push(i);
            }
            if groups.iter().any(|g| g.is_empty()) {
                continue;
            }
            let mut inertia = 0.0;
            let mut centers = Vec::new();
            for g in &groups {
                let mut mean = vec![0.0; d];
                for &i in g {
                    for j in 0..d {
                        mean[j] += points[[i, j]];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= g.len() as f64;
                }
                for &i in g {
                    for j in 0..d {
                        inertia += (points[[i, j]] - mean[j]).powi(2);
                    }
                }
                centers.push(mean);
            }
            if inertia < best.0 {
                centers.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
                best = (inertia, centers);
            }
        }
        best.1
    }

    #[test]
    fn kmeans_with_one_cluster_returns_the_mean() {
        let gen = toy();
        let bases = sample_latent_bases(&gen, ClassLabel(0), 256, 5).unwrap();
        let cfg = ClusterConfig {
            samples: 256,
            clusters: 1,
            seed: 2,
            ..ClusterConfig::default()
        };
        let fit = kmeans(&bases, &cfg).unwrap();
        let mean = bases.mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in fit.centers.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_with_as_many_clusters_as_points_is_exact() {
        let points = Array2::from_shape_vec(
            (4, 2),
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let cfg = ClusterConfig {
            samples: 4,
            clusters: 4,
            seed: 3,
            ..ClusterConfig::default()
        };
        let fit = kmeans(&points, &cfg).unwrap();
        assert!(fit.inertia < 1e-18);
    }

    #[test]
    fn kmeans_rejects_more_clusters_than_points() {
        let points = Array2::zeros((3, 2));
        let cfg = ClusterConfig {
            samples: 3,
            clusters: 5,
            ..ClusterConfig::default()
        };
        assert!(matches!(
            kmeans(&points, &cfg),
            Err(Error::TooFewPoints { points: 3, clusters: 5 })
        ));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let gen = toy();
        let bases = sample_latent_bases(&gen, ClassLabel(2), 512, 9).unwrap();
        let cfg = ClusterConfig {
            samples: 512,
            clusters: 5,
            seed: 4,
            ..ClusterConfig::default()
        };
        let a = kmeans(&bases, &cfg).unwrap();
        let b = kmeans(&bases, &cfg).unwrap();
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn clustering_with_k_equal_modes_recovers_mode_centers() {
        let gen = toy();
        let class = ClassLabel(1);
        let cfg = ClusterConfig {
            samples: 2000,
            clusters: 3,
            seed: 13,
            ..ClusterConfig::default()
        };
        let set = cluster_class(&gen, class, &cfg).unwrap();
        let tol = 0.05 * gen.min_mode_distance(class);
        for k in 0..3 {
            let truth = gen.mode_center(class, k);
            let best = (0..3)
                .map(|i| {
                    set.centers
                        .row(i)
                        .iter()
                        .zip(truth.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!(best < tol, "mode {k}: nearest center at {best:.4} (tol {tol:.4})");
        }
        assert_eq!(set.cluster_sizes.iter().sum::<usize>(), 2000);
    }

    #[test]
    fn selection_finds_the_exact_center_and_breaks_ties_low() {
        let gen = toy();
        let fx = FeatureExtractor::seeded(5, 3, 16);
        let cfg = ClusterConfig {
            samples: 600,
            clusters: 4,
            seed: 6,
            ..ClusterConfig::default()
        };
        let set = cluster_class(&gen, ClassLabel(0), &cfg).unwrap();
        let (k, _, distances) = select_centroid(
            &set.center_images[2],
            &set,
            &fx,
            &DegradationSpec::Identity,
            false,
            (32, 32),
            6,
        )
        .unwrap();
        assert_eq!(k, 2);
        assert_eq!(distances[2], 0.0);

        // Duplicated center images: the lowest index wins.
        let mut dup = set.clone();
        dup.center_images[3] = dup.center_images[1].clone();
        let (k2, _, _) = select_centroid(
            &dup.center_images[3],
            &dup,
            &fx,
            &DegradationSpec::Identity,
            false,
            (32, 32),
            6,
        )
        .unwrap();
        assert_eq!(k2, 1);
    }

    #[test]
    fn selection_agrees_with_a_brute_force_distance_table() {
        let gen = toy();
        let fx = FeatureExtractor::seeded(5, 3, 16);
        let cfg = ClusterConfig {
            samples: 600,
            clusters: 5,
            seed: 8,
            ..ClusterConfig::default()
        };
        let set = cluster_class(&gen, ClassLabel(3), &cfg).unwrap();
        let spec = DegradationSpec::centered_mask(32, 32, 0.25);
        for t in 0..10 {
            let mut r = crate::rng::stream(700 + t, "sel");
            let z = LatentZ::sample(&mut r, 16);
            let w = gen.map(&z, ClassLabel(3)).unwrap();
            let degraded = degrade::apply(&spec, &gen.synthesize(&w).unwrap()).unwrap();
            let (k, _, distances) =
                select_centroid(&degraded, &set, &fx, &spec, false, (32, 32), 6).unwrap();
            // Brute-force loop oracle.
            let mut best = 0;
            for i in 0..set.len() {
                let d = fx
                    .perceptual_distance(&degraded, &set.center_images[i])
                    .unwrap();
                assert!((d - distances[i]).abs() < 1e-9);
                if d < distances[best] {
                    best = i;
                }
            }
            assert_eq!(k, best);
        }
    }

    #[test]
    fn persistence_round_trips_exactly() {
        let gen = toy();
        let cfg = ClusterConfig {
            samples: 400,
            clusters: 3,
            seed: 10,
            ..ClusterConfig::default()
        };
        let set = cluster_class(&gen, ClassLabel(2), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let key = CentroidKey {
            generator_seed: gen.seed(),
            class: 2,
            samples: 400,
            clusters: 3,
            seed: 10,
        };
        save_centroids(dir.path(), &key, &set).unwrap();
        let loaded = load_centroids(dir.path(), &key, &gen).unwrap().unwrap();
        assert_eq!(loaded.centers, set.centers);
        assert_eq!(loaded.center_images, set.center_images);
        assert_eq!(loaded.cluster_sizes, set.cluster_sizes);

        let missing = CentroidKey { class: 3, ..key };
        assert!(load_centroids(dir.path(), &missing, &gen).unwrap().is_none());
    }
}
