//! Conditional generator interface and the procedural toy generator.
//!
//! The toy generator is built deterministically from a single 64-bit seed.
//! Its mapping network sends a normal latent `z` and a class label to a
//! style vector whose class-conditional distribution is multi-modal by
//! construction: each class owns `K` mode directions, the active mode is the
//! one whose direction has the largest dot product with `z`, and the mode
//! offsets are mutually separated by a fixed multiple of the intra-mode
//! standard deviation. Synthesis renders one smooth Gaussian blob per style
//! row through a logistic squash, so the whole image map has closed-form
//! gradients with respect to both the latent and the synthesis parameters.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::rng::{normal_vec, stream};
use crate::{Error, Result};

/// Readout slots produced per style row.
const READOUT: usize = 7;
const R_CX: usize = 0;
const R_CY: usize = 1;
const R_LOG_SIGMA: usize = 2;
const R_COLOR: usize = 3; // 3, 4, 5
const R_AMP: usize = 6;

/// Shape of a generator: latent sizes, layer count, class/mode structure and
/// output resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub d_z: usize,
    pub d_w: usize,
    pub layers: usize,
    pub classes: usize,
    pub modes: usize,
    pub height: usize,
    pub width: usize,
    /// Minimum pairwise mode separation as a multiple of the intra-mode
    /// standard deviation. Must be at least 10 for the latent distribution
    /// to count as multi-modal here.
    pub mode_separation: f64,
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            d_z: 16,
            d_w: 32,
            layers: 6,
            classes: 4,
            modes: 3,
            height: 32,
            width: 32,
            mode_separation: 12.0,
        }
    }
}

/// A normal input latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ {
    pub values: Array1<f64>,
}

impl LatentZ {
    pub fn new(values: Array1<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(d_z: usize) -> Self {
        Self {
            values: Array1::zeros(d_z),
        }
    }

    /// Draws a standard-normal latent from the given stream.
    pub fn sample(rng: &mut rand_chacha::ChaCha8Rng, d_z: usize) -> Self {
        Self {
            values: Array1::from_vec(normal_vec(rng, d_z)),
        }
    }
}

/// A class index standing for the one-hot conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel(pub usize);

/// A per-layer stack of style vectors (`layers x d_w`).
///
/// An element of the shared style space has all rows identical; the extended
/// space lets every layer carry its own row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentW {
    pub rows: Array2<f64>,
}

impl LatentW {
    pub fn new(rows: Array2<f64>) -> Self {
        Self { rows }
    }

    pub fn zeros(layers: usize, d_w: usize) -> Self {
        Self {
            rows: Array2::zeros((layers, d_w)),
        }
    }

    /// Replicates a single style vector across all layers.
    pub fn from_base(base: &Array1<f64>, layers: usize) -> Self {
        let d_w = base.len();
        let mut rows = Array2::zeros((layers, d_w));
        for mut row in rows.rows_mut() {
            row.assign(base);
        }
        Self { rows }
    }

    pub fn layers(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn d_w(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|v| v.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        self.rows.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.rows.iter().map(|v| v.abs()).sum()
    }

    pub fn added(&self, other: &LatentW) -> LatentW {
        LatentW {
            rows: &self.rows + &other.rows,
        }
    }

    /// Euclidean distance to another element.
    pub fn distance(&self, other: &LatentW) -> f64 {
        self.rows
            .iter()
            .zip(other.rows.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a hash over the raw bit patterns, for cheap mutation checks.
    pub fn content_hash(&self) -> u64 {
        hash_bits(self.rows.iter())
    }
}

fn hash_bits<'a>(values: impl Iterator<Item = &'a f64>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for byte in v.to_bits().to_le_bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// One named block of trainable values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// All trainable synthesis parameters, as an ordered collection of named
/// blocks. Snapshots are deep value copies and round-trip exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub blocks: Vec<ParamBlock>,
}

impl GeneratorParams {
    pub fn flat_len(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for block in &self.blocks {
            out.extend_from_slice(&block.values);
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::ShapeMismatch {
                context: "GeneratorParams::set_from_flat".into(),
                expected: self.flat_len().to_string(),
                actual: flat.len().to_string(),
            });
        }
        let mut offset = 0;
        for block in &mut self.blocks {
            let n = block.values.len();
            block.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Checks that another instance has the same block names and shapes.
    pub fn validate_compatible(&self, other: &GeneratorParams) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::CorruptSnapshot(format!(
                "block count {} != {}",
                other.blocks.len(),
                self.blocks.len()
            )));
        }
        for (a, b) in self.blocks.iter().zip(other.blocks.iter()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::CorruptSnapshot(format!(
                    "block '{}' {:?} incompatible with '{}' {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        Ok(())
    }

    /// Euclidean distance to another parameter set of the same layout.
    pub fn l2_distance(&self, other: &GeneratorParams) -> f64 {
        self.blocks
            .iter()
            .zip(other.blocks.iter())
            .flat_map(|(a, b)| a.values.iter().zip(b.values.iter()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn content_hash(&self) -> u64 {
        hash_bits(self.blocks.iter().flat_map(|b| b.values.iter()))
    }
}

/// A conditional generator: mapping plus synthesis with closed-form
/// gradients. Mapping and synthesis are pure; parameter mutation via
/// [`Generator::restore`] or [`Generator::set_params_flat`] is single-writer.
pub trait Generator: Send + Sync {
    fn layout(&self) -> &Layout;

    /// Maps a latent and class to the shared pre-replication style vector.
    fn map_base(&self, z: &LatentZ, class: ClassLabel) -> Result<Array1<f64>>;

    /// Maps a latent and class to a style element with identical rows.
    fn map(&self, z: &LatentZ, class: ClassLabel) -> Result<LatentW> {
        Ok(LatentW::from_base(
            &self.map_base(z, class)?,
            self.layout().layers,
        ))
    }

    /// Renders an image from per-layer style vectors.
    fn synthesize(&self, w: &LatentW) -> Result<ImageTensor>;

    /// Backward pass of [`Generator::synthesize`]: given an upstream
    /// gradient on the image, returns gradients with respect to the style
    /// rows and the flattened trainable parameters.
    fn synthesize_grad(&self, w: &LatentW, upstream: &Array3<f64>)
        -> Result<(Array2<f64>, Vec<f64>)>;

    fn params(&self) -> &GeneratorParams;

    /// Deep value copy of the trainable parameters.
    fn snapshot(&self) -> GeneratorParams {
        self.params().clone()
    }

    /// Restores a snapshot; synthesis afterwards is bit-identical to
    /// snapshot time.
    fn restore(&mut self, snapshot: &GeneratorParams) -> Result<()>;

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()>;
}

/// The deterministic, analytically differentiable toy generator.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    layout: Layout,
    seed: u64,
    // Frozen mapping network.
    a1: Array2<f64>,
    b1: Array1<f64>,
    a2: Array2<f64>,
    b2: Array1<f64>,
    class_embed: Array2<f64>,
    /// Per class: `modes x d_z` unit direction rows.
    mode_dirs: Vec<Array2<f64>>,
    /// Per class: `modes x d_w` offset rows.
    mode_offsets: Vec<Array2<f64>>,
    // Calibration statistics of the squash part `a2 tanh(a1 z + b1)`,
    // measured once at construction from a seeded batch.
    squash_mean: Array1<f64>,
    coord_std: Array1<f64>,
    total_std: f64,
    // Trainable synthesis parameters.
    params: GeneratorParams,
}

impl ToyGenerator {
    pub fn new(seed: u64, layout: Layout) -> Self {
        assert!(layout.modes >= 1 && layout.classes >= 1 && layout.layers >= 1);
        assert!(
            layout.mode_separation >= 10.0,
            "mode separation below 10x intra-mode std is not multi-modal enough"
        );
        let d_z = layout.d_z;
        let d_w = layout.d_w;

        let a1 = matrix_normal(seed, "map.a1", d_w, d_z, 1.0 / (d_z as f64).sqrt());
        let b1 = vector_normal(seed, "map.b1", d_w, 0.5);
        let a2 = matrix_normal(seed, "map.a2", d_w, d_w, 0.4 / (d_w as f64).sqrt());
        let b2 = vector_normal(seed, "map.b2", d_w, 0.3);
        let class_embed = matrix_normal(seed, "map.class", layout.classes, d_w, 0.5);

        let mode_dirs = (0..layout.classes)
            .map(|c| sample_spread_directions(seed, c, layout.modes, d_z))
            .collect::<Vec<_>>();

        // Calibrate the squash part before placing mode offsets: their
        // required separation is a multiple of the measured intra-mode std.
        let (squash_mean, coord_std, total_std) =
            calibrate_squash(&a1, &b1, &a2, seed, d_z, d_w);

        let mode_offsets = (0..layout.classes)
            .map(|c| {
                sample_separated_offsets(
                    seed,
                    c,
                    layout.modes,
                    d_w,
                    layout.mode_separation * total_std,
                )
            })
            .collect::<Vec<_>>();

        let mut gen = Self {
            layout,
            seed,
            a1,
            b1,
            a2,
            b2,
            class_embed,
            mode_dirs,
            mode_offsets,
            squash_mean,
            coord_std,
            total_std,
            params: GeneratorParams { blocks: Vec::new() },
        };
        gen.params = gen.build_synthesis_params();
        gen
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Published center of a mode: offset plus the shared affine constant
    /// (class embedding, output bias and the calibrated squash mean).
    pub fn mode_center(&self, class: ClassLabel, mode: usize) -> Array1<f64> {
        &self.squash_mean + &self.b2 + &self.class_embed.row(class.0) + &self.mode_offsets[class.0].row(mode)
    }

    /// Pairwise minimum distance between the published mode centers of a class.
    pub fn min_mode_distance(&self, class: ClassLabel) -> f64 {
        let k = self.layout.modes;
        let mut min = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let ca = self.mode_center(class, a);
                let cb = self.mode_center(class, b);
                let d = (&ca - &cb).iter().map(|v| v * v).sum::<f64>().sqrt();
                min = min.min(d);
            }
        }
        min
    }

    /// Per-coordinate standard deviation of the squash part, measured at
    /// construction.
    pub fn coordinate_std(&self) -> &Array1<f64> {
        &self.coord_std
    }

    /// Total intra-mode standard deviation `sqrt(sum per-coordinate var)`.
    pub fn intra_mode_std(&self) -> f64 {
        self.total_std
    }

    /// Index of the mode cone containing `z`: the direction with the largest
    /// dot product, ties broken by the lowest index.
    pub fn mode_index(&self, z: &LatentZ, class: ClassLabel) -> usize {
        let dirs = &self.mode_dirs[class.0];
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for k in 0..self.layout.modes {
            let dot: f64 = dirs
                .row(k)
                .iter()
                .zip(z.values.iter())
                .map(|(a, b)| a * b)
                .sum();
            if dot > best_dot {
                best_dot = dot;
                best = k;
            }
        }
        best
    }

    fn build_synthesis_params(&self) -> GeneratorParams {
        let d_w = self.layout.d_w;
        // Scale style readouts relative to the typical style norm so the
        // logistic squashes stay responsive across modes.
        let rms_w = self.calibrate_style_rms();
        let row_scale = |target: f64| target / rms_w;
        let swings = [
            row_scale(1.6), // cx
            row_scale(1.6), // cy
            row_scale(0.35), // log sigma
            row_scale(1.6), // r
            row_scale(1.6), // g
            row_scale(1.6), // b
            row_scale(0.5), // amp
        ];

        let mut blocks = Vec::new();
        for l in 0..self.layout.layers {
            let mut weights = vec![0.0; READOUT * d_w];
            let mut r = stream(self.seed, &format!("synth.readout_w.layer{l}"));
            for (idx, v) in weights.iter_mut().enumerate() {
                let row = idx / d_w;
                *v = swings[row] * r.sample::<f64, _>(StandardNormal);
            }
            blocks.push(ParamBlock {
                name: format!("layer{l}.readout_w"),
                shape: vec![READOUT, d_w],
                values: weights,
            });

            let mut rb = stream(self.seed, &format!("synth.readout_b.layer{l}"));
            let mut bias = vec![0.0; READOUT];
            bias[R_CX] = 1.1 * rb.sample::<f64, _>(StandardNormal);
            bias[R_CY] = 1.1 * rb.sample::<f64, _>(StandardNormal);
            bias[R_LOG_SIGMA] = (0.20_f64).ln() + 0.25 * rb.sample::<f64, _>(StandardNormal);
            for c in 0..3 {
                bias[R_COLOR + c] = 0.9 * rb.sample::<f64, _>(StandardNormal);
            }
            bias[R_AMP] = 1.1 + 0.35 * rb.sample::<f64, _>(StandardNormal);
            blocks.push(ParamBlock {
                name: format!("layer{l}.readout_b"),
                shape: vec![READOUT],
                values: bias,
            });
        }
        blocks.push(ParamBlock {
            name: "bias".into(),
            shape: vec![1],
            values: vec![-1.1],
        });
        GeneratorParams { blocks }
    }

    /// Root-mean-square style norm over a seeded batch across all classes.
    fn calibrate_style_rms(&self) -> f64 {
        let mut r = stream(self.seed, "calibrate.style_rms");
        let per_class = 512;
        let mut acc = 0.0;
        let mut count = 0usize;
        for class in 0..self.layout.classes {
            for _ in 0..per_class {
                let z = LatentZ::sample(&mut r, self.layout.d_z);
                let w = self
                    .map_base(&z, ClassLabel(class))
                    .expect("calibration map");
                acc += w.iter().map(|v| v * v).sum::<f64>();
                count += 1;
            }
        }
        (acc / count as f64).sqrt()
    }

    fn readout(&self, layer: usize, w_row: ndarray::ArrayView1<'_, f64>) -> [f64; READOUT] {
        let weights = &self.params.blocks[2 * layer].values;
        let bias = &self.params.blocks[2 * layer + 1].values;
        let d_w = self.layout.d_w;
        let mut u = [0.0; READOUT];
        for (slot, out) in u.iter_mut().enumerate() {
            let mut acc = bias[slot];
            let row = &weights[slot * d_w..(slot + 1) * d_w];
            for (a, b) in row.iter().zip(w_row.iter()) {
                acc += a * b;
            }
            *out = acc;
        }
        u
    }

    fn output_bias(&self) -> f64 {
        self.params.blocks[2 * self.layout.layers].values[0]
    }
}

/// Numerically stable logistic function.
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// One rendered blob, derived from a style row readout.
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    color: [f64; 3],
    amp: f64,
}

impl Blob {
    fn from_readout(u: [f64; READOUT]) -> Self {
        Self {
            cx: logistic(u[R_CX]),
            cy: logistic(u[R_CY]),
            sigma: u[R_LOG_SIGMA].exp(),
            color: [
                logistic(u[R_COLOR]),
                logistic(u[R_COLOR + 1]),
                logistic(u[R_COLOR + 2]),
            ],
            amp: u[R_AMP],
        }
    }

    fn falloff(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

impl Generator for ToyGenerator {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn map_base(&self, z: &LatentZ, class: ClassLabel) -> Result<Array1<f64>> {
        if class.0 >= self.layout.classes {
            return Err(Error::InvalidClass {
                index: class.0,
                count: self.layout.classes,
            });
        }
        if z.values.len() != self.layout.d_z {
            return Err(Error::ShapeMismatch {
                context: "map_base".into(),
                expected: format!("z of length {}", self.layout.d_z),
                actual: z.values.len().to_string(),
            });
        }
        if !z.values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidLatent("non-finite z".into()));
        }

        let hidden = {
            let mut h = self.b1.clone();
            for (i, hv) in h.iter_mut().enumerate() {
                for (a, zv) in self.a1.row(i).iter().zip(z.values.iter()) {
                    *hv += a * zv;
                }
                *hv = hv.tanh();
            }
            h
        };
        let mut w = self.b2.clone();
        for (i, wv) in w.iter_mut().enumerate() {
            for (a, hv) in self.a2.row(i).iter().zip(hidden.iter()) {
                *wv += a * hv;
            }
        }
        let mode = self.mode_index(z, class);
        w += &self.class_embed.row(class.0);
        w += &self.mode_offsets[class.0].row(mode);
        Ok(w)
    }

    fn synthesize(&self, w: &LatentW) -> Result<ImageTensor> {
        self.check_latent(w)?;
        let (h, wd) = (self.layout.height, self.layout.width);
        let blobs: Vec<Blob> = (0..self.layout.layers)
            .map(|l| Blob::from_readout(self.readout(l, w.rows.row(l))))
            .collect();
        let bias = self.output_bias();

        let mut pixels = Array3::zeros((h, wd, 3));
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            for j in 0..wd {
                let x = (j as f64 + 0.5) / wd as f64;
                let mut pre = [bias; 3];
                for blob in &blobs {
                    let g = blob.amp * blob.falloff(x, y);
                    for c in 0..3 {
                        pre[c] += g * blob.color[c];
                    }
                }
                for c in 0..3 {
                    pixels[[i, j, c]] = logistic(pre[c]);
                }
            }
        }
        Ok(ImageTensor { pixels })
    }

    fn synthesize_grad(
        &self,
        w: &LatentW,
        upstream: &Array3<f64>,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_latent(w)?;
        let (h, wd) = (self.layout.height, self.layout.width);
        if upstream.shape() != [h, wd, 3] {
            return Err(Error::ShapeMismatch {
                context: "synthesize_grad".into(),
                expected: format!("{h}x{wd}x3"),
                actual: format!("{:?}", upstream.shape()),
            });
        }
        let layers = self.layout.layers;
        let d_w = self.layout.d_w;
        let blobs: Vec<Blob> = (0..layers)
            .map(|l| Blob::from_readout(self.readout(l, w.rows.row(l))))
            .collect();
        let bias = self.output_bias();

        // Accumulate gradients on the readout vector of each layer plus the
        // scalar output bias, then pull them back through the affine
        // readouts once.
        let mut du = vec![[0.0; READOUT]; layers];
        let mut dbias = 0.0;
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            for j in 0..wd {
                let x = (j as f64 + 0.5) / wd as f64;
                let mut pre = [bias; 3];
                let mut falloffs = Vec::with_capacity(layers);
                for blob in &blobs {
                    let f = blob.falloff(x, y);
                    falloffs.push(f);
                    for c in 0..3 {
                        pre[c] += blob.amp * f * blob.color[c];
                    }
                }
                let mut dpre = [0.0; 3];
                for c in 0..3 {
                    let out = logistic(pre[c]);
                    dpre[c] = upstream[[i, j, c]] * out * (1.0 - out);
                    dbias += dpre[c];
                }
                for (l, blob) in blobs.iter().enumerate() {
                    let f = falloffs[l];
                    let mut dg = 0.0; // gradient on amp * falloff
                    for c in 0..3 {
                        dg += dpre[c] * blob.color[c];
                        // color slot: pre = .. + amp * f * color_c
                        du[l][R_COLOR + c] += dpre[c]
                            * blob.amp
                            * f
                            * blob.color[c]
                            * (1.0 - blob.color[c]);
                    }
                    du[l][R_AMP] += dg * f;
                    let dfall = dg * blob.amp;
                    let dx = x - blob.cx;
                    let dy = y - blob.cy;
                    let s2 = blob.sigma * blob.sigma;
                    // d falloff / d cx = falloff * (x - cx) / sigma^2
                    let dcx = dfall * f * dx / s2;
                    let dcy = dfall * f * dy / s2;
                    du[l][R_CX] += dcx * blob.cx * (1.0 - blob.cx);
                    du[l][R_CY] += dcy * blob.cy * (1.0 - blob.cy);
                    // d falloff / d sigma = falloff * r^2 / sigma^3, and
                    // d sigma / d u = sigma.
                    du[l][R_LOG_SIGMA] += dfall * f * (dx * dx + dy * dy) / s2;
                }
            }
        }

        let mut grad_w = Array2::zeros((layers, d_w));
        let mut grad_params = vec![0.0; self.params.flat_len()];
        let mut offset = 0;
        for l in 0..layers {
            let weights = &self.params.blocks[2 * l].values;
            for slot in 0..READOUT {
                let g = du[l][slot];
                let row = &weights[slot * d_w..(slot + 1) * d_w];
                for k in 0..d_w {
                    grad_w[[l, k]] += g * row[k];
                    grad_params[offset + slot * d_w + k] = g * w.rows[[l, k]];
                }
            }
            offset += READOUT * d_w;
            grad_params[offset..offset + READOUT].copy_from_slice(&du[l]);
            offset += READOUT;
        }
        grad_params[offset] = dbias;
        Ok((grad_w, grad_params))
    }

    fn params(&self) -> &GeneratorParams {
        &self.params
    }

    fn restore(&mut self, snapshot: &GeneratorParams) -> Result<()> {
        self.params.validate_compatible(snapshot)?;
        self.params = snapshot.clone();
        Ok(())
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.params.set_from_flat(flat)
    }
}

impl ToyGenerator {
    fn check_latent(&self, w: &LatentW) -> Result<()> {
        if w.rows.shape() != [self.layout.layers, self.layout.d_w] {
            return Err(Error::ShapeMismatch {
                context: "synthesize".into(),
                expected: format!("{}x{}", self.layout.layers, self.layout.d_w),
                actual: format!("{:?}", w.rows.shape()),
            });
        }
        if !w.is_finite() {
            return Err(Error::InvalidLatent("non-finite style vector".into()));
        }
        Ok(())
    }
}

fn matrix_normal(seed: u64, label: &str, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut r = stream(seed, label);
    Array2::from_shape_vec((rows, cols), normal_vec(&mut r, rows * cols))
        .expect("shape")
        .mapv(|v| v * std)
}

fn vector_normal(seed: u64, label: &str, len: usize, std: f64) -> Array1<f64> {
    let mut r = stream(seed, label);
    Array1::from_vec(normal_vec(&mut r, len)).mapv(|v| v * std)
}

/// K unit directions with pairwise |dot| <= 0.5 so every mode cone keeps a
/// healthy share of the latent mass.
fn sample_spread_directions(seed: u64, class: usize, k: usize, d_z: usize) -> Array2<f64> {
    let mut r = stream(seed, &format!("map.mode_dirs.class{class}"));
    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while dirs.len() < k {
        attempts += 1;
        let mut v = Array1::from_vec(normal_vec(&mut r, d_z));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.mapv_inplace(|x| x / norm);
        let ok = dirs.iter().all(|d| {
            let dot: f64 = d.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            dot.abs() <= 0.5
        });
        if ok || attempts > 1000 {
            dirs.push(v);
        }
    }
    let mut out = Array2::zeros((k, d_z));
    for (i, d) in dirs.iter().enumerate() {
        out.row_mut(i).assign(d);
    }
    out
}

/// K mode offsets scaled so the minimum pairwise distance equals
/// `separation` exactly.
fn sample_separated_offsets(
    seed: u64,
    class: usize,
    k: usize,
    d_w: usize,
    separation: f64,
) -> Array2<f64> {
    let mut r = stream(seed, &format!("map.mode_offsets.class{class}"));
    let mut raw = Array2::from_shape_vec((k, d_w), normal_vec(&mut r, k * d_w)).expect("shape");
    if k < 2 {
        return raw;
    }
    let mut min = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = raw
                .row(a)
                .iter()
                .zip(raw.row(b).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min = min.min(d);
        }
    }
    let scale = separation / min;
    raw.mapv_inplace(|v| v * scale);
    raw
}

/// Mean, per-coordinate std and total std of the squash part over a large
/// seeded batch.
fn calibrate_squash(
    a1: &Array2<f64>,
    b1: &Array1<f64>,
    a2: &Array2<f64>,
    seed: u64,
    d_z: usize,
    d_w: usize,
) -> (Array1<f64>, Array1<f64>, f64) {
    let samples = 32_768;
    let mut r = stream(seed, "calibrate.squash");
    let mut sum = Array1::<f64>::zeros(d_w);
    let mut sum_sq = Array1::<f64>::zeros(d_w);
    let mut h = vec![0.0; d_w];
    for _ in 0..samples {
        let z = normal_vec(&mut r, d_z);
        for i in 0..d_w {
            let mut acc = b1[i];
            for (a, zv) in a1.row(i).iter().zip(z.iter()) {
                acc += a * zv;
            }
            h[i] = acc.tanh();
        }
        for i in 0..d_w {
            let mut acc = 0.0;
            for (a, hv) in a2.row(i).iter().zip(h.iter()) {
                acc += a * hv;
            }
            sum[i] += acc;
            sum_sq[i] += acc * acc;
        }
    }
    let n = samples as f64;
    let mean = sum.mapv(|v| v / n);
    let var = &sum_sq / n - &mean.mapv(|v| v * v);
    let coord_std = var.mapv(|v| v.max(0.0).sqrt());
    let total_std = var.iter().map(|v| v.max(0.0)).sum::<f64>().sqrt();
    (mean, coord_std, total_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy() -> ToyGenerator {
        ToyGenerator::new(11, Layout::default())
    }

    #[test]
    fn mapping_is_deterministic() {
        let gen = toy();
        let mut r = rng::stream(3, "z");
        let z = LatentZ::sample(&mut r, 16);
        let a = gen.map(&z, ClassLabel(1)).unwrap();
        let b = gen.map(&z, ClassLabel(1)).unwrap();
        assert_eq!(a, b);
        let other = ToyGenerator::new(11, Layout::default());
        assert_eq!(other.map(&z, ClassLabel(1)).unwrap(), a);
    }

    #[test]
    fn zero_latent_takes_the_affine_constant_path() {
        let gen = toy();
        let z = LatentZ::zeros(16);
        let w = gen.map_base(&z, ClassLabel(0)).unwrap();
        // All mode dots are zero, so the tie-break picks mode 0.
        assert_eq!(gen.mode_index(&z, ClassLabel(0)), 0);
        let mut expected = gen.b2.clone();
        let mut h = gen.b1.clone();
        h.mapv_inplace(f64::tanh);
        for i in 0..32 {
            for (a, hv) in gen.a2.row(i).iter().zip(h.iter()) {
                expected[i] += a * hv;
            }
        }
        expected += &gen.class_embed.row(0);
        expected += &gen.mode_offsets[0].row(0);
        assert_eq!(w, expected);
    }

    #[test]
    fn invalid_class_is_rejected() {
        let gen = toy();
        let z = LatentZ::zeros(16);
        assert!(matches!(
            gen.map(&z, ClassLabel(4)),
            Err(Error::InvalidClass { index: 4, count: 4 })
        ));
    }

    #[test]
    fn mode_cones_separate_mapped_samples() {
        // Two latents from distinct cones map at least 5x the median
        // intra-mode pairwise distance apart.
        let gen = toy();
        let class = ClassLabel(2);
        let mut r = rng::stream(17, "mode_population");
        let per_mode = 300;
        let mut buckets: Vec<Vec<Array1<f64>>> = vec![Vec::new(); 3];
        while buckets.iter().any(|b| b.len() < per_mode) {
            let z = LatentZ::sample(&mut r, 16);
            let k = gen.mode_index(&z, class);
            if buckets[k].len() < per_mode {
                buckets[k].push(gen.map_base(&z, class).unwrap());
            }
        }
        let dist = |a: &Array1<f64>, b: &Array1<f64>| -> f64 {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut intra = Vec::new();
        for bucket in &buckets {
            for i in 0..bucket.len() {
                for j in i + 1..bucket.len() {
                    intra.push(dist(&bucket[i], &bucket[j]));
                }
            }
        }
        intra.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_intra = intra[intra.len() / 2];

        let mut min_inter = f64::INFINITY;
        for a in 0..3 {
            for b in a + 1..3 {
                for x in &buckets[a] {
                    for y in &buckets[b] {
                        min_inter = min_inter.min(dist(x, y));
                    }
                }
            }
        }
        assert!(
            min_inter > 5.0 * median_intra,
            "min inter {min_inter:.3} vs 5x median intra {:.3}",
            5.0 * median_intra
        );
    }

    #[test]
    fn mode_offsets_satisfy_declared_separation() {
        let gen = toy();
        for c in 0..4 {
            let min = gen.min_mode_distance(ClassLabel(c));
            assert!(
                min >= gen.layout.mode_separation * gen.intra_mode_std() * 0.99,
                "class {c}: min mode distance {min:.3}"
            );
        }
    }

    #[test]
    fn synthesis_is_pure_and_shape_checked() {
        let gen = toy();
        let mut r = rng::stream(5, "z");
        let z = LatentZ::sample(&mut r, 16);
        let w = gen.map(&z, ClassLabel(0)).unwrap();
        let a = gen.synthesize(&w).unwrap();
        let b = gen.synthesize(&w).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (32, 32));
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));

        let bad = LatentW::zeros(3, 32);
        assert!(matches!(gen.synthesize(&bad), Err(Error::ShapeMismatch { .. })));
        let mut nan = w.clone();
        nan.rows[[0, 0]] = f64::NAN;
        assert!(matches!(gen.synthesize(&nan), Err(Error::InvalidLatent(_))));
    }

    #[test]
    fn zero_amplitude_readouts_give_a_constant_image() {
        let mut gen = toy();
        let mut flat = gen.params().to_flat();
        // Zero every amp readout row and bias slot.
        let d_w = 32;
        let per_layer = READOUT * d_w + READOUT;
        for l in 0..6 {
            let base = l * per_layer;
            for k in 0..d_w {
                flat[base + R_AMP * d_w + k] = 0.0;
            }
            flat[base + READOUT * d_w + R_AMP] = 0.0;
        }
        gen.set_params_flat(&flat).unwrap();
        let mut r = rng::stream(5, "z");
        let z = LatentZ::sample(&mut r, 16);
        let w = gen.map(&z, ClassLabel(0)).unwrap();
        let img = gen.synthesize(&w).unwrap();
        let expected = logistic(gen.output_bias());
        for v in img.pixels.iter() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn replicated_and_broadcast_storage_synthesize_identically() {
        let gen = toy();
        let mut r = rng::stream(9, "z");
        let z = LatentZ::sample(&mut r, 16);
        let base = gen.map_base(&z, ClassLabel(1)).unwrap();
        let replicated = LatentW::from_base(&base, 6);
        let broadcast = LatentW::new(
            ndarray::Array2::from_shape_fn((6, 32), |(_, j)| base[j]),
        );
        assert_eq!(
            gen.synthesize(&replicated).unwrap(),
            gen.synthesize(&broadcast).unwrap()
        );
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut gen = toy();
        let mut r = rng::stream(5, "z");
        let z = LatentZ::sample(&mut r, 16);
        let w = gen.map(&z, ClassLabel(0)).unwrap();
        let before = gen.synthesize(&w).unwrap();
        let snap = gen.snapshot();
        assert_eq!(snap, snap.clone()); // snapshot of snapshot

        let mut flat = gen.params().to_flat();
        for v in flat.iter_mut() {
            *v += 0.05;
        }
        gen.set_params_flat(&flat).unwrap();
        assert_ne!(gen.synthesize(&w).unwrap(), before);

        gen.restore(&snap).unwrap();
        assert_eq!(gen.synthesize(&w).unwrap(), before);
    }

    #[test]
    fn restore_rejects_incompatible_snapshots() {
        let mut gen = toy();
        let mut snap = gen.snapshot();
        snap.blocks[0].shape = vec![1, 1];
        assert!(matches!(gen.restore(&snap), Err(Error::CorruptSnapshot(_))));
        let mut renamed = gen.snapshot();
        renamed.blocks[1].name = "nope".into();
        assert!(matches!(gen.restore(&renamed), Err(Error::CorruptSnapshot(_))));
    }

    #[test]
    fn synthesis_gradients_match_finite_differences() {
        let gen = toy();
        let mut r = rng::stream(23, "probe");
        let z = LatentZ::sample(&mut r, 16);
        let w = gen.map(&z, ClassLabel(3)).unwrap();
        let h = 1e-5;

        // d pixel / d w entry at randomly probed positions.
        for probe in 0..20 {
            let mut pr = rng::stream(100 + probe, "probe.idx");
            let i = pr.random_range(0..32);
            let j = pr.random_range(0..32);
            let c = pr.random_range(0..3);
            let l = pr.random_range(0..6);
            let k = pr.random_range(0..32);

            let mut upstream = Array3::zeros((32, 32, 3));
            upstream[[i, j, c]] = 1.0;
            let (grad_w, _) = gen.synthesize_grad(&w, &upstream).unwrap();

            let mut wp = w.clone();
            wp.rows[[l, k]] += h;
            let mut wm = w.clone();
            wm.rows[[l, k]] -= h;
            let fd = (gen.synthesize(&wp).unwrap().pixels[[i, j, c]]
                - gen.synthesize(&wm).unwrap().pixels[[i, j, c]])
                / (2.0 * h);
            let analytic = grad_w[[l, k]];
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "probe {probe}: analytic {analytic:.6e} fd {fd:.6e}"
            );
        }
    }

    #[test]
    fn synthesis_param_gradients_match_finite_differences() {
        let mut gen = toy();
        let mut r = rng::stream(29, "probe");
        let z = LatentZ::sample(&mut r, 16);
        let w = gen.map(&z, ClassLabel(2)).unwrap();
        // Scalar objective: sum of all pixels.
        let upstream = Array3::from_elem((32, 32, 3), 1.0);
        let (_, grad_p) = gen.synthesize_grad(&w, &upstream).unwrap();
        let flat = gen.params().to_flat();
        let h = 1e-5;
        let mut pr = rng::stream(31, "probe.param");
        for probe in 0..20 {
            let idx = pr.random_range(0..flat.len());
            let mut plus = flat.clone();
            plus[idx] += h;
            gen.set_params_flat(&plus).unwrap();
            let fp: f64 = gen.synthesize(&w).unwrap().pixels.iter().sum();
            let mut minus = flat.clone();
            minus[idx] -= h;
            gen.set_params_flat(&minus).unwrap();
            let fm: f64 = gen.synthesize(&w).unwrap().pixels.iter().sum();
            gen.set_params_flat(&flat).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let analytic = grad_p[idx];
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "probe {probe} at {idx}: analytic {analytic:.6e} fd {fd:.6e}"
            );
        }
    }
}
