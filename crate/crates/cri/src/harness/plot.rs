//! Minimal deterministic PNG line plots.
//!
//! A thin renderer over the CSV data: axes, tick marks, numeric tick labels
//! from a small built-in digit font, one polyline with point markers. Plots
//! are for eyeballing sweeps; the CSVs stay the source of truth.

use std::path::Path;

use ndarray::Array3;

use crate::image::ImageTensor;
use crate::Result;

const WIDTH: usize = 640;
const HEIGHT: usize = 440;
const MARGIN_LEFT: usize = 80;
const MARGIN_RIGHT: usize = 30;
const MARGIN_TOP: usize = 30;
const MARGIN_BOTTOM: usize = 50;

/// 3x5 glyphs for digits, minus, and dot. Row-major bits.
fn glyph(ch: char) -> Option<[u8; 15]> {
    let g = match ch {
        '0' => [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1],
        '1' => [0, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1],
        '2' => [1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1],
        '3' => [1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 1],
        '4' => [1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 0, 1],
        '5' => [1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1],
        '6' => [1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1],
        '7' => [1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0],
        '8' => [1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1],
        '9' => [1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1],
        '-' => [0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0],
        '.' => [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0],
        _ => return None,
    };
    Some(g)
}

struct Canvas {
    pixels: Array3<f64>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            pixels: Array3::from_elem((HEIGHT, WIDTH, 3), 1.0),
        }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [f64; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < WIDTH && (y as usize) < HEIGHT {
            for c in 0..3 {
                self.pixels[[y as usize, x as usize, c]] = rgb[c];
            }
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [f64; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = x0 + t * (x1 - x0);
            let y = y0 + t * (y1 - y0);
            self.put(x.round() as i64, y.round() as i64, rgb);
        }
    }

    fn dot(&mut self, x: f64, y: f64, rgb: [f64; 3]) {
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                if dx * dx + dy * dy <= 4 {
                    self.put(x.round() as i64 + dx, y.round() as i64 + dy, rgb);
                }
            }
        }
    }

    /// Draws text (digits, dot, minus) at 2x scale; other chars advance.
    fn text(&mut self, x: i64, y: i64, s: &str, rgb: [f64; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(g) = glyph(ch) {
                for (i, bit) in g.iter().enumerate() {
                    if *bit == 1 {
                        let gx = (i % 3) as i64;
                        let gy = (i / 3) as i64;
                        for sy in 0..2 {
                            for sx in 0..2 {
                                self.put(cx + gx * 2 + sx, y + gy * 2 + sy, rgb);
                            }
                        }
                    }
                }
            }
            cx += 8;
        }
    }

    fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * 8 - 2
    }
}

/// Renders a single series as a line-with-markers plot and writes the PNG.
pub fn line_plot(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut canvas = Canvas::new();
    let axis = [0.25, 0.25, 0.25];
    let series = [0.10, 0.25, 0.65];

    let x0 = MARGIN_LEFT as f64;
    let x1 = (WIDTH - MARGIN_RIGHT) as f64;
    let y0 = (HEIGHT - MARGIN_BOTTOM) as f64;
    let y1 = MARGIN_TOP as f64;
    canvas.line(x0, y0, x1, y0, axis);
    canvas.line(x0, y0, x0, y1, axis);

    if points.is_empty() {
        return ImageTensor { pixels: canvas.pixels }.save_png(path);
    }

    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymin -= 0.5 * ymin.abs().max(1e-6);
        ymax += 0.5 * ymax.abs().max(1e-6);
    }
    let pad = 0.07 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            x0 + (x - xmin) / (xmax - xmin) * (x1 - x0),
            y0 - (y - ymin) / (ymax - ymin) * (y0 - y1),
        )
    };

    // X ticks at the data points, y ticks at quartiles.
    for (x, _) in points {
        let (px, _) = to_px(*x, ymin);
        canvas.line(px, y0, px, y0 + 5.0, axis);
        let label = format_tick(*x);
        canvas.text(
            px as i64 - Canvas::text_width(&label) / 2,
            y0 as i64 + 10,
            &label,
            axis,
        );
    }
    for q in 0..=4 {
        let y = ymin + (ymax - ymin) * q as f64 / 4.0;
        let (_, py) = to_px(xmin, y);
        canvas.line(x0 - 5.0, py, x0, py, axis);
        let label = format_tick(y);
        canvas.text(
            x0 as i64 - 10 - Canvas::text_width(&label),
            py as i64 - 5,
            &label,
            axis,
        );
    }

    let mut sorted: Vec<(f64, f64)> = points.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for pair in sorted.windows(2) {
        let (ax, ay) = to_px(pair[0].0, pair[0].1);
        let (bx, by) = to_px(pair[1].0, pair[1].1);
        canvas.line(ax, ay, bx, by, series);
    }
    for (x, y) in &sorted {
        let (px, py) = to_px(*x, *y);
        canvas.dot(px, py, series);
    }

    ImageTensor { pixels: canvas.pixels }.save_png(path)
}

fn format_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 && v.abs() < 1e6 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_png_with_plot_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.png");
        line_plot(&path, &[(1.0, 0.5), (5.0, 0.3), (10.0, 0.25), (15.0, 0.26)]).unwrap();
        let img = ImageTensor::load_png(&path).unwrap();
        assert_eq!(img.dims(), (440, 640));
        // Some non-white pixels were drawn.
        assert!(img.pixels.iter().any(|v| *v < 0.9));
    }

    #[test]
    fn identical_input_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let pts = [(1.0, 0.4), (2.0, 0.2)];
        line_plot(&a, &pts).unwrap();
        line_plot(&b, &pts).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
