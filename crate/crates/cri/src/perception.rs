//! Perceptual features and distances.
//!
//! The backbone is a frozen pyramid of seeded random convolutional stages, a
//! reproducible stand-in for a pretrained feature network: random-feature
//! distances are a known functional proxy and need no downloaded weights.
//! Externally trained weights can be slotted in through the flat-binary
//! weight file without code changes.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::rng::stream;
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-10;

/// One frozen convolutional stage: 3x3 kernels, tanh activation and frozen
/// per-channel standardization statistics.
#[derive(Debug, Clone)]
struct Stage {
    in_ch: usize,
    out_ch: usize,
    /// Layout `[out][in][3][3]`, flattened.
    kernels: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Frozen multi-scale feature extractor. Immutable after construction and
/// safe for concurrent use.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
}

/// Per-scale raw feature maps of one image.
#[derive(Debug, Clone)]
pub struct FeatureEmbedding {
    pub scales: Vec<Array3<f64>>,
}

impl FeatureEmbedding {
    /// Squared Euclidean distance over all raw feature maps, used for
    /// centroid selection.
    pub fn squared_distance(&self, other: &FeatureEmbedding) -> f64 {
        self.scales
            .iter()
            .zip(other.scales.iter())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }

    /// Compact statistics view: per-scale per-channel spatial means,
    /// concatenated. Keeps set-level covariances desk-sized.
    pub fn pooled_vector(&self) -> Array1<f64> {
        let mut out = Vec::new();
        for map in &self.scales {
            let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
            let norm = 1.0 / (h * w) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += map[[i, j, ch]];
                    }
                }
                out.push(acc * norm);
            }
        }
        Array1::from_vec(out)
    }
}

/// Target-side features with channel-normalized maps precomputed, so loss
/// evaluations against a fixed target skip the normalization each step.
#[derive(Debug, Clone)]
pub struct PreparedTarget {
    normalized: Vec<Array3<f64>>,
}

impl FeatureExtractor {
    /// Builds a pyramid (default 3 scales, 16 channels) from a seed.
    pub fn seeded(seed: u64, scales: usize, channels: usize) -> Self {
        assert!(scales >= 1 && channels >= 1);
        let mut stages = Vec::with_capacity(scales);
        // Spatially correlated noise batch for calibrating the frozen
        // per-channel statistics.
        let stat_res = 32;
        let mut batch: Vec<Array3<f64>> = (0..24)
            .map(|i| smoothed_noise(seed, i, stat_res, stat_res))
            .collect();

        for s in 0..scales {
            let in_ch = if s == 0 { 3 } else { channels };
            let mut r = stream(seed, &format!("extractor.stage{s}"));
            let scale = 1.0 / ((in_ch * 9) as f64).sqrt();
            let kernels: Vec<f64> = crate::rng::normal_vec(&mut r, channels * in_ch * 9)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            let mut stage = Stage {
                in_ch,
                out_ch: channels,
                kernels,
                mean: vec![0.0; channels],
                std: vec![1.0; channels],
            };
            // Freeze standardization statistics from the calibration batch,
            // then push the batch through for the next stage.
            let activations: Vec<Array3<f64>> =
                batch.iter().map(|x| stage.activate(x)).collect();
            let (mean, std) = channel_stats(&activations);
            stage.mean = mean;
            stage.std = std;
            batch = activations
                .into_iter()
                .map(|a| avgpool2(&stage.standardize(&a)))
                .collect();
            stages.push(stage);
        }
        Self { stages }
    }

    pub fn scales(&self) -> usize {
        self.stages.len()
    }

    /// Dimension of [`FeatureEmbedding::pooled_vector`].
    pub fn pooled_dim(&self) -> usize {
        self.stages.iter().map(|s| s.out_ch).sum()
    }

    /// Extracts the per-scale feature maps of an image.
    pub fn embed(&self, img: &ImageTensor) -> FeatureEmbedding {
        let mut x = img.pixels.clone();
        let mut scales = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let f = stage.standardize(&stage.activate_arr(&x));
            x = avgpool2(&f);
            scales.push(f);
        }
        FeatureEmbedding { scales }
    }

    pub fn prepare_target(&self, embedding: &FeatureEmbedding) -> PreparedTarget {
        PreparedTarget {
            normalized: embedding
                .scales
                .iter()
                .map(|m| channel_normalize(m).0)
                .collect(),
        }
    }

    /// Perceptual distance: sum over scales of the mean squared difference
    /// of channel-unit-normalized features. A pseudometric: symmetric,
    /// nonnegative and zero for equal features.
    pub fn perceptual_distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch {
                context: "perceptual_distance".into(),
                expected: format!("{:?}", a.dims()),
                actual: format!("{:?}", b.dims()),
            });
        }
        let ta = self.prepare_target(&self.embed(a));
        Ok(self.distance_value(&ta, b))
    }

    /// Distance from a prepared target to an image, value only.
    pub fn distance_value(&self, target: &PreparedTarget, img: &ImageTensor) -> f64 {
        let emb = self.embed(img);
        emb.scales
            .iter()
            .zip(target.normalized.iter())
            .map(|(f, t)| {
                let (u, _) = channel_normalize(f);
                mean_sq_diff(&u, t)
            })
            .sum()
    }

    /// Distance from a prepared target plus its gradient with respect to the
    /// image. The backward pass runs through normalization, the frozen
    /// standardization, tanh, the convolutions and the pooling chain.
    pub fn distance_with_grad(
        &self,
        target: &PreparedTarget,
        img: &ImageTensor,
    ) -> (f64, Array3<f64>) {
        let n = self.stages.len();
        // Forward with tape.
        let mut inputs: Vec<Array3<f64>> = Vec::with_capacity(n);
        let mut acts: Vec<Array3<f64>> = Vec::with_capacity(n);
        let mut feats: Vec<Array3<f64>> = Vec::with_capacity(n);
        let mut x = img.pixels.clone();
        for stage in &self.stages {
            inputs.push(x.clone());
            let act = stage.activate_arr(&x);
            let f = stage.standardize(&act);
            x = avgpool2(&f);
            acts.push(act);
            feats.push(f);
        }

        let mut value = 0.0;
        let mut scale_grads: Vec<Array3<f64>> = Vec::with_capacity(n);
        for s in 0..n {
            let (u, norms) = channel_normalize(&feats[s]);
            let t = &target.normalized[s];
            let count = u.len() as f64;
            let mut du = Array3::zeros(u.raw_dim());
            let mut acc = 0.0;
            {
                let du_flat = du.as_slice_mut().unwrap();
                for (idx, (uv, tv)) in u.iter().zip(t.iter()).enumerate() {
                    let d = uv - tv;
                    acc += d * d;
                    du_flat[idx] = 2.0 * d / count;
                }
            }
            value += acc / count;
            scale_grads.push(channel_normalize_vjp(&u, &norms, &du));
        }

        // Back down the pyramid: each stage receives its own distance
        // gradient plus the pooled gradient from the stage above.
        let mut carry: Option<Array3<f64>> = None;
        for s in (0..n).rev() {
            let mut df = scale_grads[s].clone();
            if let Some(up) = carry.take() {
                df += &avgpool2_vjp(&up, feats[s].shape()[0], feats[s].shape()[1]);
            }
            let stage = &self.stages[s];
            // standardize: f = (act - mean) / std
            let mut dact = df;
            for ((_, _, c), v) in dact.indexed_iter_mut() {
                *v /= stage.std[c];
            }
            // tanh
            for (v, a) in dact.iter_mut().zip(acts[s].iter()) {
                *v *= 1.0 - a * a;
            }
            // conv transpose back to the stage input
            carry = Some(conv3x3_vjp_input(&dact, stage, inputs[s].shape()[2]));
        }
        (value, carry.expect("at least one stage"))
    }

    /// Mean and unbiased covariance of the pooled embeddings of an image
    /// set. A single-image set gets a zero covariance.
    pub fn embed_set(&self, images: &[ImageTensor]) -> (DVector<f64>, DMatrix<f64>) {
        assert!(!images.is_empty(), "embed_set needs at least one image");
        let dim = self.pooled_dim();
        let vecs: Vec<Array1<f64>> = images
            .iter()
            .map(|img| self.embed(img).pooled_vector())
            .collect();
        let n = vecs.len();
        let mut mean = DVector::zeros(dim);
        for v in &vecs {
            for (i, x) in v.iter().enumerate() {
                mean[i] += x;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        if n > 1 {
            for v in &vecs {
                let d = DVector::from_iterator(dim, v.iter().cloned()) - &mean;
                cov += &d * d.transpose();
            }
            cov /= (n - 1) as f64;
        }
        (mean, cov)
    }

    /// Writes the stage weights and statistics as little-endian f32 plus a
    /// JSON shape manifest.
    pub fn save_weights(&self, manifest_path: &Path) -> Result<()> {
        let data_name = manifest_path
            .file_stem()
            .map(|s| format!("{}.bin", s.to_string_lossy()))
            .unwrap_or_else(|| "weights.bin".into());
        let manifest = WeightManifest {
            data_file: data_name.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| StageShape {
                    in_channels: s.in_ch,
                    out_channels: s.out_ch,
                    kernel: 3,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(manifest_path, json)?;
        let mut buf = Vec::new();
        for s in &self.stages {
            for v in s.kernels.iter().chain(s.mean.iter()).chain(s.std.iter()) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let data_path = manifest_path.with_file_name(data_name);
        let mut f = std::fs::File::create(data_path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads externally supplied weights from a manifest written by
    /// [`FeatureExtractor::save_weights`] (or any tool following the same
    /// layout: per stage, kernels then mean then std, flat little-endian f32).
    pub fn from_weight_file(manifest_path: &Path) -> Result<Self> {
        let manifest: WeightManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
        let data_path = manifest_path.with_file_name(&manifest.data_file);
        let mut bytes = Vec::new();
        std::fs::File::open(&data_path)?.read_to_end(&mut bytes)?;
        let expected: usize = manifest
            .stages
            .iter()
            .map(|s| s.out_channels * s.in_channels * s.kernel * s.kernel + 2 * s.out_channels)
            .sum::<usize>()
            * 4;
        if bytes.len() != expected {
            return Err(Error::Config(format!(
                "weight file {} has {} bytes, manifest implies {expected}",
                data_path.display(),
                bytes.len()
            )));
        }
        let mut floats = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
        let mut stages = Vec::new();
        for shape in &manifest.stages {
            let k = shape.out_channels * shape.in_channels * shape.kernel * shape.kernel;
            let kernels: Vec<f64> = floats.by_ref().take(k).collect();
            let mean: Vec<f64> = floats.by_ref().take(shape.out_channels).collect();
            let std: Vec<f64> = floats.by_ref().take(shape.out_channels).collect();
            stages.push(Stage {
                in_ch: shape.in_channels,
                out_ch: shape.out_channels,
                kernels,
                mean,
                std,
            });
        }
        Ok(Self { stages })
    }
}

#[derive(Serialize, Deserialize)]
struct WeightManifest {
    data_file: String,
    stages: Vec<StageShape>,
}

#[derive(Serialize, Deserialize)]
struct StageShape {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Stage {
    fn activate(&self, x: &Array3<f64>) -> Array3<f64> {
        self.activate_arr(x)
    }

    /// tanh(conv3x3(x)) with zero padding.
    fn activate_arr(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        assert_eq!(x.shape()[2], self.in_ch, "stage input channels");
        let mut out = Array3::zeros((h, w, self.out_ch));
        for o in 0..self.out_ch {
            let base = o * self.in_ch * 9;
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..self.in_ch {
                        let kb = base + ci * 9;
                        for di in 0..3usize {
                            let ii = i as isize + di as isize - 1;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for dj in 0..3usize {
                                let jj = j as isize + dj as isize - 1;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += self.kernels[kb + di * 3 + dj]
                                    * x[[ii as usize, jj as usize, ci]];
                            }
                        }
                    }
                    out[[i, j, o]] = acc.tanh();
                }
            }
        }
        out
    }

    fn standardize(&self, act: &Array3<f64>) -> Array3<f64> {
        let mut out = act.clone();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// Adjoint of the 3x3 same-padding convolution with respect to its input,
/// with the tanh derivative already folded into `upstream`.
fn conv3x3_vjp_input(upstream: &Array3<f64>, stage: &Stage, in_ch: usize) -> Array3<f64> {
    let (h, w) = (upstream.shape()[0], upstream.shape()[1]);
    let mut grad = Array3::zeros((h, w, in_ch));
    for o in 0..stage.out_ch {
        let base = o * stage.in_ch * 9;
        for i in 0..h {
            for j in 0..w {
                let g = upstream[[i, j, o]];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..in_ch {
                    let kb = base + ci * 9;
                    for di in 0..3usize {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..3usize {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            grad[[ii as usize, jj as usize, ci]] +=
                                g * stage.kernels[kb + di * 3 + dj];
                        }
                    }
                }
            }
        }
    }
    grad
}

fn avgpool2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((oh, ow, c));
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                out[[i, j, ch]] = 0.25
                    * (x[[2 * i, 2 * j, ch]]
                        + x[[2 * i, 2 * j + 1, ch]]
                        + x[[2 * i + 1, 2 * j, ch]]
                        + x[[2 * i + 1, 2 * j + 1, ch]]);
            }
        }
    }
    out
}

fn avgpool2_vjp(upstream: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let c = upstream.shape()[2];
    let mut grad = Array3::zeros((in_h, in_w, c));
    for i in 0..upstream.shape()[0] {
        for j in 0..upstream.shape()[1] {
            for ch in 0..c {
                let g = 0.25 * upstream[[i, j, ch]];
                grad[[2 * i, 2 * j, ch]] = g;
                grad[[2 * i, 2 * j + 1, ch]] = g;
                grad[[2 * i + 1, 2 * j, ch]] = g;
                grad[[2 * i + 1, 2 * j + 1, ch]] = g;
            }
        }
    }
    grad
}

/// Unit-normalizes the channel vector at every spatial position.
/// Returns the normalized map and the per-position norms.
fn channel_normalize(map: &Array3<f64>) -> (Array3<f64>, ndarray::Array2<f64>) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = map.clone();
    let mut norms = ndarray::Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                let v = map[[i, j, ch]];
                s += v * v;
            }
            let n = (s + NORM_EPS).sqrt();
            norms[[i, j]] = n;
            for ch in 0..c {
                out[[i, j, ch]] /= n;
            }
        }
    }
    (out, norms)
}

fn channel_normalize_vjp(
    normalized: &Array3<f64>,
    norms: &ndarray::Array2<f64>,
    upstream: &Array3<f64>,
) -> Array3<f64> {
    let (h, w, c) = (
        normalized.shape()[0],
        normalized.shape()[1],
        normalized.shape()[2],
    );
    let mut grad = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let n = norms[[i, j]];
            let mut dot = 0.0;
            for ch in 0..c {
                dot += upstream[[i, j, ch]] * normalized[[i, j, ch]];
            }
            for ch in 0..c {
                grad[[i, j, ch]] = (upstream[[i, j, ch]] - normalized[[i, j, ch]] * dot) / n;
            }
        }
    }
    grad
}

fn mean_sq_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let count = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / count
}

fn channel_stats(batch: &[Array3<f64>]) -> (Vec<f64>, Vec<f64>) {
    let c = batch[0].shape()[2];
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut count = vec![0usize; c];
    for map in batch {
        for ((_, _, ch), v) in map.indexed_iter() {
            mean[ch] += v;
            count[ch] += 1;
        }
    }
    for ch in 0..c {
        mean[ch] /= count[ch] as f64;
    }
    for map in batch {
        for ((_, _, ch), v) in map.indexed_iter() {
            let d = v - mean[ch];
            var[ch] += d * d;
        }
    }
    let std = var
        .iter()
        .zip(count.iter())
        .map(|(v, n)| (v / *n as f64).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

/// Spatially correlated noise for statistic calibration.
fn smoothed_noise(seed: u64, index: usize, h: usize, w: usize) -> Array3<f64> {
    let mut r = stream(seed, &format!("extractor.stats.{index}"));
    let mut img = Array3::zeros((h, w, 3));
    for v in img.iter_mut() {
        *v = rand::Rng::random_range(&mut r, 0.0..1.0);
    }
    // One 3x3 box blur pass adds local correlation.
    let mut out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i32..=1 {
                    for dj in -1i32..=1 {
                        let ii = i as i32 + di;
                        let jj = j as i32 + dj;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc += img[[ii as usize, jj as usize, c]];
                            cnt += 1.0;
                        }
                    }
                }
                out[[i, j, c]] = acc / cnt;
            }
        }
    }
    out
}

/// Mean squared pixel difference.
pub fn pixel_l2(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            context: "pixel_l2".into(),
            expected: format!("{:?}", a.dims()),
            actual: format!("{:?}", b.dims()),
        });
    }
    let count = a.pixels.len() as f64;
    Ok(a.pixels
        .iter()
        .zip(b.pixels.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / count)
}

/// Gradient of [`pixel_l2`] with respect to its second argument.
pub fn pixel_l2_grad(target: &ImageTensor, img: &ImageTensor) -> Array3<f64> {
    let count = img.pixels.len() as f64;
    let mut grad = img.pixels.clone();
    for (g, t) in grad.iter_mut().zip(target.pixels.iter()) {
        *g = 2.0 * (*g - t) / count;
    }
    grad
}

/// Peak signal-to-noise ratio in dB with peak 1.0, capped at 99 dB for
/// MSE below 1e-10.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(pixel_l2(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Fréchet distance between two Gaussians:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
///
/// The matrix square root comes from the eigendecomposition of the
/// symmetrized product `sqrt(S1) S2 sqrt(S1)`.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let dim = mu1.len();
    if mu2.len() != dim || cov1.shape() != (dim, dim) || cov2.shape() != (dim, dim) {
        return Err(Error::ShapeMismatch {
            context: "frechet_distance".into(),
            expected: format!("dim {dim}"),
            actual: format!(
                "mu2 {} cov1 {:?} cov2 {:?}",
                mu2.len(),
                cov1.shape(),
                cov2.shape()
            ),
        });
    }
    let sqrt1 = psd_sqrt(cov1)?;
    psd_check(cov2)?;
    let inner = &sqrt1 * cov2 * &sqrt1;
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let eig = inner_sym.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    // sqrt has unbounded slope at 0: rounding noise in near-null
    // eigenvalues would otherwise leak into the trace.
    let clip = max_ev * 1e-12;
    let mut tr_sqrt = 0.0;
    for ev in eig.eigenvalues.iter() {
        if *ev < -1e-8 {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: *ev });
        }
        if *ev > clip {
            tr_sqrt += ev.sqrt();
        }
    }
    let dmu = mu1 - mu2;
    let value = dmu.dot(&dmu) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    // Rounding can leave a tiny negative residue for identical Gaussians.
    Ok(if value < 0.0 && value > -1e-9 { 0.0 } else { value })
}

fn psd_check(cov: &DMatrix<f64>) -> Result<()> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-8 {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
    }
    Ok(())
}

fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-8 {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
    }
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let clip = max_ev * 1e-12;
    let d = DMatrix::from_diagonal(
        &eig.eigenvalues.map(|v| if v > clip { v.sqrt() } else { 0.0 }),
    );
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::seeded(5, 3, 16)
    }

    fn random_image(seed: u64) -> ImageTensor {
        let mut r = rng::stream(seed, "test.perception");
        let data = rng::normal_vec(&mut r, 32 * 32 * 3);
        ImageTensor {
            pixels: Array3::from_shape_vec((32, 32, 3), data)
                .unwrap()
                .mapv(|v| 0.5 + 0.3 * v.tanh()),
        }
    }

    #[test]
    fn distance_to_self_is_zero() {
        let fx = extractor();
        let x = random_image(1);
        assert_eq!(fx.perceptual_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn distance_is_symmetric() {
        let fx = extractor();
        for s in 0..10 {
            let x = random_image(2 * s + 10);
            let y = random_image(2 * s + 11);
            let d_xy = fx.perceptual_distance(&x, &y).unwrap();
            let d_yx = fx.perceptual_distance(&y, &x).unwrap();
            assert!(d_xy >= 0.0);
            assert!((d_xy - d_yx).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_decreases_along_the_path_to_the_target() {
        let fx = extractor();
        let x = random_image(40);
        let y = random_image(41);
        let at = |t: f64| {
            let pixels = &x.pixels + &((&y.pixels - &x.pixels) * t);
            ImageTensor { pixels }
        };
        let d0 = fx.perceptual_distance(&x, &at(0.0)).unwrap();
        let d_half = fx.perceptual_distance(&x, &at(0.5)).unwrap();
        let d1 = fx.perceptual_distance(&x, &at(1.0)).unwrap();
        assert_eq!(d0, 0.0);
        assert!(d0 < d_half && d_half < d1, "{d0} {d_half} {d1}");
    }

    #[test]
    fn distance_gradient_matches_finite_differences() {
        let fx = extractor();
        let target_img = random_image(50);
        let target = fx.prepare_target(&fx.embed(&target_img));
        let x = random_image(51);
        let (_, grad) = fx.distance_with_grad(&target, &x);
        let h = 1e-5;
        let mut pr = rng::stream(52, "probe");
        for probe in 0..10 {
            let i = pr.random_range(0..32);
            let j = pr.random_range(0..32);
            let c = pr.random_range(0..3);
            let mut plus = x.clone();
            plus.pixels[[i, j, c]] += h;
            let mut minus = x.clone();
            minus.pixels[[i, j, c]] -= h;
            let fd = (fx.distance_value(&target, &plus) - fx.distance_value(&target, &minus))
                / (2.0 * h);
            let analytic = grad[[i, j, c]];
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "probe {probe}: analytic {analytic:.6e} fd {fd:.6e}"
            );
        }
    }

    #[test]
    fn pixel_l2_fixtures_and_oracle() {
        let zeros = ImageTensor::zeros(8, 8);
        let ones = ImageTensor::constant(8, 8, 1.0);
        assert_eq!(pixel_l2(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(pixel_l2(&zeros, &ones).unwrap(), 1.0);

        let a = random_image(60);
        let b = random_image(61);
        // Naive double-loop oracle.
        let mut acc = 0.0;
        for i in 0..32 {
            for j in 0..32 {
                for c in 0..3 {
                    let d = a.pixels[[i, j, c]] - b.pixels[[i, j, c]];
                    acc += d * d;
                }
            }
        }
        let oracle = acc / (32.0 * 32.0 * 3.0);
        assert!((pixel_l2(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn psnr_spot_values() {
        let x = random_image(70);
        assert_eq!(psnr(&x, &x).unwrap(), 99.0);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert_eq!(psnr_from_mse(1.0), 0.0);
    }

    #[test]
    fn frechet_matches_one_dimensional_closed_form() {
        let one = |m: f64, s: f64| {
            (
                DVector::from_vec(vec![m]),
                DMatrix::from_vec(1, 1, vec![s * s]),
            )
        };
        let (m1, c1) = one(0.0, 1.0);
        let (m2, c2) = one(2.0, 1.0);
        assert!((frechet_distance(&m1, &c1, &m2, &c2).unwrap() - 4.0).abs() < 1e-10);
        let (m3, c3) = one(0.0, 1.0);
        let (m4, c4) = one(0.0, 2.0);
        assert!((frechet_distance(&m3, &c3, &m4, &c4).unwrap() - 1.0).abs() < 1e-10);

        let mut r = rng::stream(80, "frechet");
        for _ in 0..100 {
            let mu1: f64 = r.random_range(-3.0..3.0);
            let mu2: f64 = r.random_range(-3.0..3.0);
            let s1: f64 = r.random_range(0.1..2.5);
            let s2: f64 = r.random_range(0.1..2.5);
            let (a, ca) = one(mu1, s1);
            let (b, cb) = one(mu2, s2);
            let closed = (mu1 - mu2).powi(2) + s1 * s1 + s2 * s2 - 2.0 * s1 * s2;
            let got = frechet_distance(&a, &ca, &b, &cb).unwrap();
            assert!((got - closed).abs() < 1e-8, "{got} vs {closed}");
        }
    }

    #[test]
    fn frechet_zero_for_identical_gaussians() {
        let fx = extractor();
        let imgs: Vec<ImageTensor> = (0..4).map(|i| random_image(90 + i)).collect();
        let (mu, cov) = fx.embed_set(&imgs);
        let d = frechet_distance(&mu, &cov, &mu, &cov).unwrap();
        assert!(d.abs() < 1e-8, "{d}");
    }

    #[test]
    fn frechet_rejects_indefinite_input() {
        let mu = DVector::zeros(2);
        let bad = DMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1.0]);
        let good = DMatrix::identity(2, 2);
        assert!(matches!(
            frechet_distance(&mu, &bad, &mu, &good),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
        assert!(matches!(
            frechet_distance(&mu, &good, &mu, &bad),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn embed_set_statistics() {
        let fx = extractor();
        let img = random_image(100);
        // Repeated image: zero covariance.
        let (_, cov) = fx.embed_set(&[img.clone(), img.clone(), img.clone()]);
        assert!(cov.iter().all(|v| v.abs() < 1e-18));

        // Two-image set: mean matches the hand-computed average.
        let other = random_image(101);
        let (mu, _) = fx.embed_set(&[img.clone(), other.clone()]);
        let va = fx.embed(&img).pooled_vector();
        let vb = fx.embed(&other).pooled_vector();
        for i in 0..mu.len() {
            assert!((mu[i] - 0.5 * (va[i] + vb[i])).abs() < 1e-12);
        }

        // Permutation invariance.
        let (mu2, cov2) = fx.embed_set(&[other, img]);
        let (_, cov1) = fx.embed_set(&[random_image(100), random_image(101)]);
        assert_eq!(mu, mu2);
        assert_eq!(cov1, cov2);
    }

    #[test]
    fn weight_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("extractor.json");
        let fx = extractor();
        fx.save_weights(&manifest).unwrap();
        let loaded = FeatureExtractor::from_weight_file(&manifest).unwrap();
        // f32 storage: distances agree to f32 precision.
        let x = random_image(110);
        let y = random_image(111);
        let a = fx.perceptual_distance(&x, &y).unwrap();
        let b = loaded.perceptual_distance(&x, &y).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}
