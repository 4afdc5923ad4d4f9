//! Linear degradation operators: inpainting masks, grayscale, box
//! downsampling, and identity.
//!
//! Every operator is exactly linear, so the adjoint used during gradient
//! flow is the matrix transpose and [`adjoint_check`] can verify linearity
//! to rounding error.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::image::ImageTensor;
use crate::{Error, Result};

/// Rec. 601 luma weights for the red and green channels; blue carries the
/// remainder so that equal channels map to themselves bit-exactly.
const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;

/// A declarative description of the degradation `D(.)` applied to images.
#[derive(Debug, Clone, PartialEq)]
pub enum DegradationSpec {
    Identity,
    /// Elementwise product with a binary mask (1 = observed, 0 = hole).
    Mask(Array2<f64>),
    /// Rec. 601 luma replicated to all three channels.
    Grayscale,
    /// Non-overlapping `s x s` box average; output is `(H/s) x (W/s)`.
    Downsample { factor: usize },
}

impl DegradationSpec {
    /// Centered rectangular hole covering `coverage` of the image area.
    pub fn centered_mask(height: usize, width: usize, coverage: f64) -> Self {
        let mut mask = Array2::from_elem((height, width), 1.0);
        let hole_h = ((height as f64) * coverage.sqrt()).round() as usize;
        let hole_w = ((width as f64) * coverage.sqrt()).round() as usize;
        let top = (height - hole_h) / 2;
        let left = (width - hole_w) / 2;
        for i in top..top + hole_h {
            for j in left..left + hole_w {
                mask[[i, j]] = 0.0;
            }
        }
        DegradationSpec::Mask(mask)
    }

    /// Loads a mask from a grayscale PNG; nonzero pixels are observed.
    pub fn mask_from_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let mut mask = Array2::zeros((h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            mask[[y as usize, x as usize]] = if px.0[0] != 0 { 1.0 } else { 0.0 };
        }
        Ok(DegradationSpec::Mask(mask))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DegradationSpec::Identity => "identity",
            DegradationSpec::Mask(_) => "mask",
            DegradationSpec::Grayscale => "grayscale",
            DegradationSpec::Downsample { .. } => "downsample",
        }
    }

    /// Output dimensions for an input of `(h, w)`.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            DegradationSpec::Downsample { factor } => (h / factor, w / factor),
            _ => (h, w),
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        match self {
            DegradationSpec::Mask(mask) => {
                if mask.shape() != [h, w] {
                    return Err(Error::InvalidSpec(format!(
                        "mask is {:?} but image is {h}x{w}",
                        mask.shape()
                    )));
                }
            }
            DegradationSpec::Downsample { factor } => {
                if *factor == 0 {
                    return Err(Error::InvalidSpec("downsample factor must be positive".into()));
                }
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "downsample factor {factor} does not divide image dims {h}x{w}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Applies the degradation to an image.
pub fn apply(spec: &DegradationSpec, img: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = img.dims();
    spec.validate(h, w)?;
    let out = match spec {
        DegradationSpec::Identity => img.pixels.clone(),
        DegradationSpec::Mask(mask) => {
            let mut out = img.pixels.clone();
            for i in 0..h {
                for j in 0..w {
                    let m = mask[[i, j]];
                    for c in 0..3 {
                        out[[i, j, c]] *= m;
                    }
                }
            }
            out
        }
        DegradationSpec::Grayscale => {
            let mut out = Array3::zeros((h, w, 3));
            for i in 0..h {
                for j in 0..w {
                    let y = luma(
                        img.pixels[[i, j, 0]],
                        img.pixels[[i, j, 1]],
                        img.pixels[[i, j, 2]],
                    );
                    for c in 0..3 {
                        out[[i, j, c]] = y;
                    }
                }
            }
            out
        }
        DegradationSpec::Downsample { factor } => {
            let s = *factor;
            let (oh, ow) = (h / s, w / s);
            let norm = 1.0 / (s * s) as f64;
            let mut out = Array3::zeros((oh, ow, 3));
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..3 {
                        let mut sum = 0.0;
                        for di in 0..s {
                            for dj in 0..s {
                                sum += img.pixels[[i * s + di, j * s + dj, c]];
                            }
                        }
                        out[[i, j, c]] = sum * norm;
                    }
                }
            }
            out
        }
    };
    Ok(ImageTensor { pixels: out })
}

/// Luma evaluated as `b + wr*(r-b) + wg*(g-b)`, which equals
/// `0.299 r + 0.587 g + 0.114 b` but maps `r = g = b` to itself exactly.
fn luma(r: f64, g: f64, b: f64) -> f64 {
    b + LUMA_R * (r - b) + LUMA_G * (g - b)
}

/// Adjoint of [`apply`]: pulls a gradient on the degraded image back to a
/// gradient on the input image.
pub fn vjp(spec: &DegradationSpec, upstream: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    match spec {
        DegradationSpec::Identity => upstream.clone(),
        DegradationSpec::Mask(mask) => {
            let mut grad = upstream.clone();
            for i in 0..in_h {
                for j in 0..in_w {
                    let m = mask[[i, j]];
                    for c in 0..3 {
                        grad[[i, j, c]] *= m;
                    }
                }
            }
            grad
        }
        DegradationSpec::Grayscale => {
            let mut grad = Array3::zeros((in_h, in_w, 3));
            for i in 0..in_h {
                for j in 0..in_w {
                    let gy: f64 = (0..3).map(|c| upstream[[i, j, c]]).sum();
                    grad[[i, j, 0]] = LUMA_R * gy;
                    grad[[i, j, 1]] = LUMA_G * gy;
                    grad[[i, j, 2]] = (1.0 - LUMA_R - LUMA_G) * gy;
                }
            }
            grad
        }
        DegradationSpec::Downsample { factor } => {
            let s = *factor;
            let norm = 1.0 / (s * s) as f64;
            let mut grad = Array3::zeros((in_h, in_w, 3));
            let oh = upstream.shape()[0];
            let ow = upstream.shape()[1];
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..3 {
                        let g = upstream[[i, j, c]] * norm;
                        for di in 0..s {
                            for dj in 0..s {
                                grad[[i * s + di, j * s + dj, c]] = g;
                            }
                        }
                    }
                }
            }
            grad
        }
    }
}

/// Linearity residual `max |D(img + eps p) - D(img) - eps D(p)| / eps`.
///
/// All supported operators are linear, so the residual is rounding noise.
pub fn adjoint_check(
    spec: &DegradationSpec,
    img: &ImageTensor,
    perturbation: &ImageTensor,
) -> Result<f64> {
    let eps = 1e-3;
    let mut bumped = img.clone();
    bumped
        .pixels
        .iter_mut()
        .zip(perturbation.pixels.iter())
        .for_each(|(v, p)| *v += eps * p);
    let lhs = apply(spec, &bumped)?;
    let base = apply(spec, img)?;
    let dp = apply(spec, perturbation)?;
    let residual = lhs
        .pixels
        .iter()
        .zip(base.pixels.iter())
        .zip(dp.pixels.iter())
        .map(|((l, b), d)| (l - b - eps * d).abs())
        .fold(0.0_f64, f64::max);
    Ok(residual / eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::Array3;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut r = rng::stream(seed, "test.degrade");
        let data = rng::normal_vec(&mut r, h * w * 3);
        ImageTensor {
            pixels: Array3::from_shape_vec((h, w, 3), data)
                .unwrap()
                .mapv(|v| 0.5 + 0.4 * v.tanh()),
        }
    }

    #[test]
    fn identity_mask_is_identity() {
        let img = random_image(1, 8, 8);
        let spec = DegradationSpec::Mask(Array2::from_elem((8, 8), 1.0));
        assert_eq!(apply(&spec, &img).unwrap(), img);
    }

    #[test]
    fn grayscale_of_white_is_white() {
        let img = ImageTensor::constant(4, 4, 1.0);
        let out = apply(&DegradationSpec::Grayscale, &img).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn grayscale_is_exactly_idempotent() {
        let img = random_image(2, 16, 16);
        let once = apply(&DegradationSpec::Grayscale, &img).unwrap();
        let twice = apply(&DegradationSpec::Grayscale, &once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mask_is_exactly_idempotent() {
        let img = random_image(3, 16, 16);
        let spec = DegradationSpec::centered_mask(16, 16, 0.25);
        let once = apply(&spec, &img).unwrap();
        let twice = apply(&spec, &once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn downsample_grid_fixture() {
        // 4x4 grid 1..16 row-major, factor 2, replicated over channels.
        let mut pixels = Array3::zeros((4, 4, 3));
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    pixels[[i, j, c]] = (i * 4 + j + 1) as f64;
                }
            }
        }
        let out = apply(&DegradationSpec::Downsample { factor: 2 }, &ImageTensor { pixels })
            .unwrap();
        let expected = [[3.5, 5.5], [11.5, 13.5]];
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    assert_eq!(out.pixels[[i, j, c]], expected[i][j]);
                }
            }
        }
    }

    #[test]
    fn downsample_matches_direct_mean_oracle() {
        let img = random_image(4, 8, 8);
        let out = apply(&DegradationSpec::Downsample { factor: 2 }, &img).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..3 {
                    let mean = (img.pixels[[2 * i, 2 * j, c]]
                        + img.pixels[[2 * i, 2 * j + 1, c]]
                        + img.pixels[[2 * i + 1, 2 * j, c]]
                        + img.pixels[[2 * i + 1, 2 * j + 1, c]])
                        / 4.0;
                    assert!((out.pixels[[i, j, c]] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linearity_residual_is_rounding_noise() {
        let img = random_image(5, 8, 8);
        let p = random_image(6, 8, 8);
        for spec in [
            DegradationSpec::Identity,
            DegradationSpec::Grayscale,
            DegradationSpec::Downsample { factor: 2 },
            DegradationSpec::centered_mask(8, 8, 0.25),
        ] {
            let res = adjoint_check(&spec, &img, &p).unwrap();
            assert!(res < 1e-10, "{}: residual {res}", spec.kind());
        }
    }

    #[test]
    fn vjp_is_the_exact_adjoint() {
        // <D x, y> == <x, D^T y> for each operator.
        let x = random_image(7, 8, 8);
        for spec in [
            DegradationSpec::Identity,
            DegradationSpec::Grayscale,
            DegradationSpec::Downsample { factor: 4 },
            DegradationSpec::centered_mask(8, 8, 0.25),
        ] {
            let dx = apply(&spec, &x).unwrap();
            let (oh, ow) = spec.output_dims(8, 8);
            let y = random_image(8, oh, ow);
            let dty = vjp(&spec, &y.pixels, 8, 8);
            let lhs: f64 = dx.pixels.iter().zip(y.pixels.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.pixels.iter().zip(dty.iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{}: {lhs} vs {rhs}", spec.kind());
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let img = random_image(9, 8, 8);
        let bad_mask = DegradationSpec::Mask(Array2::from_elem((4, 4), 1.0));
        assert!(matches!(apply(&bad_mask, &img), Err(Error::InvalidSpec(_))));
        let bad_scale = DegradationSpec::Downsample { factor: 3 };
        assert!(matches!(apply(&bad_scale, &img), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn centered_mask_covers_requested_area() {
        let DegradationSpec::Mask(mask) = DegradationSpec::centered_mask(32, 32, 0.25) else {
            panic!("expected mask");
        };
        let holes = mask.iter().filter(|v| **v == 0.0).count();
        assert_eq!(holes, 256); // 16x16 hole in a 32x32 image
    }
}
