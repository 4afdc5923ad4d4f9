//! RGB image tensors with linear intensities in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[2] != 3 {
            return Err(Error::ShapeMismatch {
                context: "ImageTensor::new".into(),
                expected: "H x W x 3".into(),
                actual: format!("{:?}", pixels.shape()),
            });
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidLatent("non-finite pixel value".into()));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            pixels: Array3::from_elem((height, width, 3), value),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Quantizes to 8-bit and back, exactly mirroring a PNG round-trip.
    pub fn quantized(&self) -> ImageTensor {
        let q = self.pixels.mapv(|v| {
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            f64::from(byte) / 255.0
        });
        ImageTensor { pixels: q }
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dims();
        let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
        for (i, j, px) in buf.enumerate_pixels_mut().map(|(x, y, p)| (y as usize, x as usize, p)) {
            let at = |c: usize| (self.pixels[[i, j, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            *px = Rgb([at(0), at(1), at(2)]);
        }
        buf.save(path)?;
        Ok(())
    }

    /// Reads an 8-bit RGB PNG (other formats are converted to RGB).
    pub fn load_png(path: &Path) -> Result<ImageTensor> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[[y as usize, x as usize, c]] = f64::from(px.0[c]) / 255.0;
            }
        }
        Ok(ImageTensor { pixels })
    }
}

/// Bilinear resize to `(out_h, out_w)`.
///
/// Output pixel centers are mapped into the source grid with the half-pixel
/// convention, so the operator is linear in the input and has an exact
/// adjoint ([`resize_bilinear_vjp`]).
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    let (in_h, in_w) = img.dims();
    let mut out = Array3::zeros((out_h, out_w, 3));
    for i in 0..out_h {
        let (i0, i1, ti) = sample_coords(i, out_h, in_h);
        for j in 0..out_w {
            let (j0, j1, tj) = sample_coords(j, out_w, in_w);
            for c in 0..3 {
                let v00 = img.pixels[[i0, j0, c]];
                let v01 = img.pixels[[i0, j1, c]];
                let v10 = img.pixels[[i1, j0, c]];
                let v11 = img.pixels[[i1, j1, c]];
                out[[i, j, c]] = (1.0 - ti) * ((1.0 - tj) * v00 + tj * v01)
                    + ti * ((1.0 - tj) * v10 + tj * v11);
            }
        }
    }
    ImageTensor { pixels: out }
}

/// Adjoint of [`resize_bilinear`]: scatters an upstream gradient on the
/// resized image back onto the source grid.
pub fn resize_bilinear_vjp(
    upstream: &Array3<f64>,
    in_h: usize,
    in_w: usize,
) -> Array3<f64> {
    let out_h = upstream.shape()[0];
    let out_w = upstream.shape()[1];
    let mut grad = Array3::zeros((in_h, in_w, 3));
    for i in 0..out_h {
        let (i0, i1, ti) = sample_coords(i, out_h, in_h);
        for j in 0..out_w {
            let (j0, j1, tj) = sample_coords(j, out_w, in_w);
            for c in 0..3 {
                let g = upstream[[i, j, c]];
                grad[[i0, j0, c]] += (1.0 - ti) * (1.0 - tj) * g;
                grad[[i0, j1, c]] += (1.0 - ti) * tj * g;
                grad[[i1, j0, c]] += ti * (1.0 - tj) * g;
                grad[[i1, j1, c]] += ti * tj * g;
            }
        }
    }
    grad
}

fn sample_coords(out_idx: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let pos = (out_idx as f64 + 0.5) * scale - 0.5;
    let clamped = pos.clamp(0.0, (in_len - 1) as f64);
    let lo = clamped.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, clamped - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut r = rng::stream(seed, "test.image");
        let data = rng::normal_vec(&mut r, h * w * 3);
        let pixels = Array3::from_shape_vec((h, w, 3), data)
            .unwrap()
            .mapv(|v| 0.5 + 0.2 * v.tanh());
        ImageTensor { pixels }
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = random_image(1, 16, 12);
        img.save_png(&path).unwrap();
        let loaded = ImageTensor::load_png(&path).unwrap();
        assert_eq!(loaded, img.quantized());
    }

    #[test]
    fn resize_identity_when_dims_match() {
        let img = random_image(2, 8, 8);
        let out = resize_bilinear(&img, 8, 8);
        assert_eq!(out, img);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = ImageTensor::constant(4, 4, 0.37);
        let out = resize_bilinear(&img, 16, 16);
        for v in out.pixels.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_vjp_matches_linearity() {
        // <A x, y> == <x, A^T y> for the adjoint pair.
        let x = random_image(3, 8, 8);
        let y = random_image(4, 16, 16);
        let ax = resize_bilinear(&x, 16, 16);
        let aty = resize_bilinear_vjp(&y.pixels, 8, 8);
        let lhs: f64 = ax.pixels.iter().zip(y.pixels.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.pixels.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "lhs={lhs} rhs={rhs}");
    }
}
