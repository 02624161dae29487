//! Training-time augmentation: random rotation, shift, zoom, shear and
//! horizontal flip for the classifier; flip only (with box mirroring) for
//! the detector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Out-of-bounds samples take the value of the nearest edge pixel.
    #[default]
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_deg_max: f64,
    pub shift_frac: f64,
    pub zoom_frac: f64,
    pub shear_frac: f64,
    pub hflip_prob: f64,
    pub fill_mode: FillMode,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg_max: 10.0,
            shift_frac: 0.05,
            zoom_frac: 0.30,
            shear_frac: 0.20,
            hflip_prob: 0.5,
            fill_mode: FillMode::Nearest,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No geometric change and no flips.
    pub fn identity() -> Self {
        Self {
            rotation_deg_max: 0.0,
            shift_frac: 0.0,
            zoom_frac: 0.0,
            shear_frac: 0.0,
            hflip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [
            self.rotation_deg_max,
            self.shift_frac,
            self.zoom_frac,
            self.shear_frac,
        ];
        if fracs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "augmentation ranges must be finite and non-negative".into(),
            ));
        }
        if self.zoom_frac >= 1.0 {
            return Err(Error::Config("zoom_frac must be below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "hflip_prob {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        Ok(())
    }
}

/// 2x3 affine map from source pixel coordinates to destination
/// coordinates, with pixel centers at integer positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translate(tx: f64, ty: f64) -> Self {
        Affine([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    pub fn linear(a: f64, b: f64, c: f64, d: f64) -> Self {
        Affine([[a, b, 0.0], [c, d, 0.0]])
    }

    pub fn rotate(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Self::linear(c, -s, s, c)
    }

    /// Shear along x: `x' = x + k * y`.
    pub fn shear_x(k: f64) -> Self {
        Self::linear(1.0, k, 0.0, 1.0)
    }

    pub fn scale(s: f64) -> Self {
        Self::linear(s, 0.0, 0.0, s)
    }

    /// Mirror about the vertical center line of a `width`-pixel image.
    pub fn hflip(width: usize) -> Self {
        Affine([[-1.0, 0.0, width as f64 - 1.0], [0.0, 1.0, 0.0]])
    }

    /// `self` applied after `first`.
    pub fn then_after(&self, first: &Affine) -> Affine {
        let a = &self.0;
        let b = &first.0;
        let mut out = [[0.0; 3]; 2];
        for r in 0..2 {
            out[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            out[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            out[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine(out)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn inverse(&self) -> Result<Affine> {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::Input("affine matrix is singular".into()));
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        let tx = -(a * m[0][2] + b * m[1][2]);
        let ty = -(c * m[0][2] + d * m[1][2]);
        Ok(Affine([[a, b, tx], [c, d, ty]]))
    }
}

/// Parameters of one random draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDraw {
    pub angle_deg: f64,
    pub shear: f64,
    pub zoom: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip: bool,
}

impl AffineDraw {
    /// Composition center -> rotate -> shear -> zoom -> shift (flip excluded).
    pub fn matrix(&self, width: usize, height: usize) -> Affine {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let steps = [
            Affine::translate(-cx, -cy),
            Affine::rotate(self.angle_deg.to_radians()),
            Affine::shear_x(self.shear),
            Affine::scale(self.zoom),
            Affine::translate(cx + self.shift_x, cy + self.shift_y),
        ];
        steps
            .iter()
            .fold(Affine::IDENTITY, |acc, step| step.then_after(&acc))
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

/// Draws rotation, shear, zoom, shift and the flip flag; returns the affine
/// (without the flip) together with the draw.
pub fn sample_affine<R: Rng + ?Sized>(
    config: &AugmentConfig,
    width: usize,
    height: usize,
    rng: &mut R,
) -> (Affine, AffineDraw) {
    let draw = AffineDraw {
        angle_deg: symmetric(rng, config.rotation_deg_max),
        shear: symmetric(rng, config.shear_frac),
        zoom: 1.0 + symmetric(rng, config.zoom_frac),
        shift_x: symmetric(rng, config.shift_frac * width as f64),
        shift_y: symmetric(rng, config.shift_frac * height as f64),
        flip: config.hflip_prob > 0.0 && rng.gen_bool(config.hflip_prob),
    };
    (draw.matrix(width, height), draw)
}

/// Inverse-mapped bilinear resampling of an `H x W x 1` image.
pub fn apply_affine(image: &Tensor<f32>, matrix: &Affine, fill: FillMode) -> Result<Tensor<f32>> {
    let &[h, w, 1] = image.shape() else {
        return Err(Error::Dimension(format!(
            "augmentation expects an H x W x 1 image, got {:?}",
            image.shape()
        )));
    };
    let inv = matrix.inverse()?;
    let FillMode::Nearest = fill;
    let src = image.data();
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::image(h, w, out)
}

/// Mirrors pixel boxes horizontally: `x_min' = width - x_max`.
pub fn flip_boxes(boxes: &[Rect], width: f64, height: f64) -> Result<Vec<Rect>> {
    boxes
        .iter()
        .map(|b| {
            if !b.is_valid() || !b.within(width, height) {
                return Err(Error::Input(format!(
                    "box {b:?} outside {width}x{height} image"
                )));
            }
            Ok(Rect::new(width - b.x_max, b.y_min, width - b.x_min, b.y_max))
        })
        .collect()
}

/// Full classifier augmentation of one image.
pub fn augment_image<R: Rng + ?Sized>(image: &Tensor<f32>, config: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    let (w, h) = (image.width(), image.height());
    let (m, draw) = sample_affine(config, w, h, rng);
    let m = if draw.flip {
        m.then_after(&Affine::hflip(w))
    } else {
        m
    };
    if m == Affine::IDENTITY {
        return Ok(image.clone());
    }
    apply_affine(image, &m, config.fill_mode)
}

/// Detector augmentation: horizontal flip with probability `hflip_prob`,
/// applied to the image and its boxes together.
pub fn augment_detection<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    boxes: &[Rect],
    hflip_prob: f64,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<Rect>)> {
    if hflip_prob > 0.0 && rng.gen_bool(hflip_prob) {
        let (w, h) = (image.width(), image.height());
        let flipped = apply_affine(image, &Affine::hflip(w), FillMode::Nearest)?;
        Ok((flipped, flip_boxes(boxes, w as f64, h as f64)?))
    } else {
        Ok((image.clone(), boxes.to_vec()))
    }
}
