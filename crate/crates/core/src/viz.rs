//! Heatmap rendering: attribution vector → patch grid → bilinear upsample →
//! min-max normalize → jet colormap → blended overlay.
//!
//! The jet colormap is piecewise linear in each channel. Breakpoints are
//! `(position, value)` pairs over `[0, 1]`:
//!
//! | channel | breakpoints |
//! |---------|-------------|
//! | red     | (0, 0), (0.35, 0), (0.66, 1), (0.89, 1), (1, 0.5) |
//! | green   | (0, 0), (0.125, 0), (0.375, 1), (0.64, 1), (0.91, 0), (1, 0) |
//! | blue    | (0, 0.5), (0.11, 1), (0.34, 1), (0.65, 0), (1, 0) |
//!
//! The normalized mask is quantized to `round(255·mask)` before lookup, and
//! channel values are scaled to bytes with `round(255·v)`.

use std::path::Path;

use crate::attribution::{AttributionMap, Method};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::write_bytes;
use crate::model::ForwardRecord;
use crate::scalar::Scalar;
use crate::tensor::{bilinear_upsample, Tensor};

/// Blend weight of the heatmap in the overlay.
pub const ALPHA: f64 = 0.5;

const JET_R: &[(f64, f64)] = &[(0.0, 0.0), (0.35, 0.0), (0.66, 1.0), (0.89, 1.0), (1.0, 0.5)];
const JET_G: &[(f64, f64)] = &[(0.0, 0.0), (0.125, 0.0), (0.375, 1.0), (0.64, 1.0), (0.91, 0.0), (1.0, 0.0)];
const JET_B: &[(f64, f64)] = &[(0.0, 0.5), (0.11, 1.0), (0.34, 1.0), (0.65, 0.0), (1.0, 0.0)];

fn piecewise(table: &[(f64, f64)], x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    for w in table.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    table[table.len() - 1].1
}

/// Jet color of the byte level `level` (0..=255).
pub fn jet(level: u8) -> [u8; 3] {
    let x = level as f64 / 255.0;
    let byte = |t| (piecewise(t, x) * 255.0).round().clamp(0.0, 255.0) as u8;
    [byte(JET_R), byte(JET_G), byte(JET_B)]
}

/// Rescales to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if values.is_empty() || !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// A rendered attribution at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Normalized mask, `height × width`, values in `[0, 1]`.
    pub mask: Tensor<f64>,
    /// Jet-colored mask, interleaved RGB bytes.
    pub colormapped: Vec<u8>,
    /// Heatmap blended over the image, interleaved RGB bytes.
    pub overlay: Vec<u8>,
}

impl Heatmap {
    /// Mask quantized to bytes, for a grayscale PNG.
    pub fn mask_bytes(&self) -> Vec<u8> {
        self.mask.data().iter().map(|&m| quantize(m)).collect()
    }
}

fn quantize(m: f64) -> u8 {
    (m * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Image as interleaved RGB bytes; single-channel images are replicated.
pub fn image_rgb<T: Scalar>(img: &ImageTensor<T>) -> Result<Vec<u8>> {
    let bytes = img.to_interleaved_u8();
    match img.channels() {
        3 => Ok(bytes),
        1 => Ok(bytes.iter().flat_map(|&v| [v, v, v]).collect()),
        c => Err(Error::Shape(format!("cannot render a {c}-channel image"))),
    }
}

/// Renders a grid of patch scores over `img`.
pub fn render_grid<T: Scalar>(img: &ImageTensor<T>, patch_size: usize, grid: &Tensor<T>) -> Result<Heatmap> {
    let (gh, gw) = match grid.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("heatmap grid must be 2-D, got {s:?}"))),
    };
    let (height, width) = (img.height(), img.width());
    if gh * patch_size != height || gw * patch_size != width {
        return Err(Error::Dimension {
            op: "generate_vis",
            left: vec![gh * patch_size, gw * patch_size],
            right: vec![height, width],
        });
    }
    let up = bilinear_upsample(&grid.cast::<f64>(), patch_size)?;
    let mask = Tensor::new(vec![height, width], min_max_normalize(up.data()))?;
    let colormapped: Vec<u8> = mask.data().iter().flat_map(|&m| jet(quantize(m))).collect();
    let base = image_rgb(img)?;
    let overlay = colormapped
        .iter()
        .zip(&base)
        .map(|(&h, &i)| (ALPHA * h as f64 + (1.0 - ALPHA) * i as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(Heatmap {
        width,
        height,
        mask,
        colormapped,
        overlay,
    })
}

/// Renders an attribution map over `img` with patch size `p`.
pub fn generate_vis<T: Scalar>(img: &ImageTensor<T>, p: usize, map: &AttributionMap<T>) -> Result<Heatmap> {
    let (gh, gw) = map.grid;
    if p == 0 || img.height() / p != gh || img.width() / p != gw {
        return Err(Error::Shape(format!(
            "{}-entry attribution does not fit a {}×{} image at patch size {p}",
            map.len(),
            img.height(),
            img.width()
        )));
    }
    render_grid(img, p, &map.grid_tensor())
}

/// One heatmap per head from the CLS row of layer `layer`'s attention.
pub fn per_head_attention_maps<T: Scalar>(
    img: &ImageTensor<T>,
    record: &ForwardRecord<T>,
    layer: usize,
) -> Result<Vec<Heatmap>> {
    let cfg = &record.config;
    let a = record
        .attention
        .get(layer)
        .ok_or_else(|| Error::Parameter(format!("layer {layer} out of range for {} layers", record.attention.len())))?;
    let (gh, gw) = cfg.grid();
    let s = cfg.seq_len();
    (0..cfg.heads)
        .map(|h| {
            let row = &a.data()[h * s * s + 1..h * s * s + s];
            let grid = Tensor::new(vec![gh, gw], row.to_vec())?;
            render_grid(img, cfg.patch_size, &grid)
        })
        .collect()
}

/// Panels side by side, separated by white gutters.
pub fn montage(panels: &[&[u8]], width: usize, height: usize, gutter: usize) -> Result<(usize, Vec<u8>)> {
    if panels.iter().any(|p| p.len() != width * height * 3) {
        return Err(Error::Shape("montage panels must share one RGB size".into()));
    }
    let n = panels.len();
    let total = n * width + n.saturating_sub(1) * gutter;
    let mut out = vec![255u8; total * height * 3];
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i * (width + gutter);
        for y in 0..height {
            let dst = (y * total + x0) * 3;
            out[dst..dst + width * 3].copy_from_slice(&panel[y * width * 3..(y + 1) * width * 3]);
        }
    }
    Ok((total, out))
}

/// File name `<stem>.<method>.<class>.png`.
pub fn output_name(stem: &str, method: Method, class: usize) -> String {
    format!("{stem}.{method}.{class}.png")
}

/// PNG bytes of an 8-bit image.
pub fn encode_png(width: usize, height: usize, pixels: &[u8], color: image::ExtendedColorType) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(pixels, width as u32, height as u32, color)
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })?;
    Ok(out)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_bytes(path, &encode_png(width, height, rgb, image::ExtendedColorType::Rgb8)?)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_bytes(path, &encode_png(width, height, gray, image::ExtendedColorType::L8)?)
}

/// One curve of a perturbation plot.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

// 3×5 glyphs, one row per u8 (low three bits, MSB left).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '%' => [5, 1, 2, 4, 5],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

struct Canvas {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = (y as usize * self.width + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&color);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        for (i, c) in s.chars().enumerate() {
            let Some(rows) = glyph(c) else { continue };
            for (r, bits) in rows.iter().enumerate() {
                for b in 0..3 {
                    if bits >> (2 - b) & 1 == 1 {
                        self.put(x + i as i64 * 4 + b, y + r as i64, color);
                    }
                }
            }
        }
    }
}

/// Renders score-versus-fraction curves (x: fraction of top patches masked,
/// y: score, scaled to the data range) with a color swatch per curve in
/// legend order.
pub fn render_curves(curves: &[Curve], width: usize, height: usize) -> (usize, usize, Vec<u8>) {
    let mut c = Canvas::new(width, height);
    let (left, right, top, bottom) = (44i64, width as i64 - 12, 10i64, height as i64 - 20);
    let black = [0, 0, 0];
    let grey = [200, 200, 200];
    let x_max = curves
        .iter()
        .flat_map(|cv| cv.fractions.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let (lo, hi) = curves
        .iter()
        .flat_map(|cv| cv.scores.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let (lo, hi) = if hi - lo > 1e-12 {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else if lo.is_finite() {
        (lo - 0.5, lo + 0.5)
    } else {
        (0.0, 1.0)
    };
    let px = |k: f64| left + ((k / x_max) * (right - left) as f64).round() as i64;
    let py = |s: f64| bottom - (((s - lo) / (hi - lo)).clamp(0.0, 1.0) * (bottom - top) as f64).round() as i64;
    for t in [0.25, 0.5, 0.75, 1.0] {
        let v = lo + t * (hi - lo);
        c.line((left, py(v)), (right, py(v)), grey);
    }
    c.line((left, top), (left, bottom), black);
    c.line((left, bottom), (right, bottom), black);
    for t in [0.0, 0.5, 1.0] {
        let v = lo + t * (hi - lo);
        c.line((left - 3, py(v)), (left, py(v)), black);
        c.text(2, py(v) + if t == 1.0 { 1 } else { -2 }, &format!("{v:.3}"), black);
    }
    if let Some(first) = curves.first() {
        for &k in &first.fractions {
            c.line((px(k), bottom), (px(k), bottom + 3), black);
            let label = format!("{}%", (k * 100.0).round() as i64);
            c.text(px(k) - 4, bottom + 6, &label, black);
        }
    }
    for (i, cv) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> = cv.fractions.iter().zip(&cv.scores).map(|(&k, &s)| (px(k), py(s))).collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], color);
        }
        for &(x, y) in &pts {
            for d in -1..=1 {
                c.put(x + d, y, color);
                c.put(x, y + d, color);
            }
        }
        let sy = top + 2 + i as i64 * 6;
        for dy in 0..4 {
            c.line((right - 10, sy + dy), (right - 2, sy + dy), color);
        }
    }
    (c.width, c.height, c.rgb)
}
