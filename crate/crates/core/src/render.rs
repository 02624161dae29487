//! PNG rendering: verdict overlays and simple line plots, drawn with a
//! built-in 5x7 bitmap font so output bytes depend on nothing external.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::fusion::FusedVerdict;
use crate::geometry::Rect;
use crate::tensor::Tensor;

pub type Color = Rgb<u8>;

pub const WHITE: Color = Rgb([255, 255, 255]);
pub const BLACK: Color = Rgb([0, 0, 0]);
pub const RED: Color = Rgb([230, 40, 40]);
pub const YELLOW: Color = Rgb([240, 200, 40]);
pub const GREEN: Color = Rgb([40, 170, 70]);
pub const BLUE: Color = Rgb([40, 90, 220]);
pub const GRAY: Color = Rgb([150, 150, 150]);

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;
const ADVANCE: u32 = 6;

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '.' => [0, 0, 0, 0, 0, 0b01100, 0b01100],
        ',' => [0, 0, 0, 0, 0b01100, 0b00100, 0b01000],
        ':' => [0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0],
        '-' => [0, 0, 0, 0b11111, 0, 0, 0],
        '=' => [0, 0, 0b11111, 0, 0b11111, 0, 0],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '/' => [0, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0],
        '%' => [0b11000, 0b11001, 0b00010, 0b00100, 0b01000, 0b10011, 0b00011],
        '_' => [0, 0, 0, 0, 0, 0, 0b11111],
        '@' => [0b01110, 0b10001, 0b10111, 0b10101, 0b10111, 0b10000, 0b01110],
        ' ' => [0; 7],
        _ => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0, 0b00100],
    }
}

/// RGB raster with clipped drawing primitives.
pub struct Canvas {
    pub image: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32, background: Color) -> Self {
        Self {
            image: RgbImage::from_pixel(width, height, background),
        }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn put(&mut self, x: i64, y: i64, color: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.width() && (y as u32) < self.height() {
            self.image.put_pixel(x as u32, y as u32, color);
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Color) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.put(x, y, color);
            }
        }
    }

    /// Outline with inclusive corners.
    pub fn stroke_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Color) {
        for x in x0..=x1 {
            self.put(x, y0, color);
            self.put(x, y1, color);
        }
        for y in y0..=y1 {
            self.put(x0, y, color);
            self.put(x1, y, color);
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Color) {
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

    /// Draws `text` with its top-left corner at `(x, y)`.
    pub fn text(&mut self, x: i64, y: i64, text: &str, color: Color) {
        for (i, c) in text.chars().enumerate() {
            let rows = glyph(c);
            let ox = x + (i as u32 * ADVANCE) as i64;
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        self.put(ox + col as i64, y + r as i64, color);
                    }
                }
            }
        }
    }

    pub fn text_width(text: &str) -> u32 {
        (text.chars().count() as u32 * ADVANCE).saturating_sub(1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.image
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e),
            })
    }
}

const HEADER_H: u32 = 2 * (GLYPH_H + 4) + 2;
const MIN_OVERLAY_WIDTH: u32 = 256;

/// Grayscale image upscaled to RGB with a two-line header (class
/// probabilities, verdict and rule) and one labeled rectangle per
/// detection; detections below `tau_det` are drawn in yellow.
pub fn overlay(image: &Tensor<f32>, verdict: &FusedVerdict) -> Result<Canvas> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 1 || image.is_empty() {
        return Err(Error::Dimension(format!("overlay expects an HxWx1 image, got {shape:?}")));
    }
    let (h, w) = (image.height() as u32, image.width() as u32);
    let scale = MIN_OVERLAY_WIDTH.div_ceil(w).max(1);
    let mut canvas = Canvas::new(w * scale, h * scale + HEADER_H, BLACK);
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = image.data()[((y / scale) * w + x / scale) as usize];
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            canvas.image.put_pixel(x, y + HEADER_H, Rgb([g, g, g]));
        }
    }
    let line1 = format!("P(YES) {:.3}  P(NO) {:.3}", verdict.p_yes, verdict.p_no);
    let rule = verdict
        .rule_trace
        .last()
        .map_or("-".to_string(), |f| format!("{:?}", f.rule));
    let line2 = format!("{} ({rule})", verdict.verdict.to_string().to_uppercase());
    canvas.text(3, 3, &line1, WHITE);
    let verdict_color = match verdict.verdict {
        crate::fusion::Verdict::Positive => RED,
        crate::fusion::Verdict::Negative => GREEN,
        crate::fusion::Verdict::Discordant => YELLOW,
    };
    canvas.text(3, 3 + (GLYPH_H + 4) as i64, &line2, verdict_color);

    let tau_det = verdict.rule_trace.last().map_or(0.5, |f| f.tau_det);
    let s = scale as f64;
    for d in &verdict.detections {
        let Rect {
            x_min,
            y_min,
            x_max,
            y_max,
        } = d.bbox;
        let color = if d.confidence >= tau_det { RED } else { YELLOW };
        let (x0, y0) = ((x_min * s).round() as i64, (y_min * s).round() as i64 + HEADER_H as i64);
        let x1 = ((x_max * s).round() as i64 - 1).max(x0);
        let y1 = ((y_max * s).round() as i64 - 1 + HEADER_H as i64).max(y0);
        canvas.stroke_rect(x0, y0, x1, y1, color);
        canvas.stroke_rect(x0 - 1, y0 - 1, x1 + 1, y1 + 1, color);
        let label = format!("{:.2}", d.confidence);
        let ly = if y0 - (GLYPH_H as i64 + 3) >= HEADER_H as i64 {
            y0 - (GLYPH_H as i64 + 3)
        } else {
            y1 + 3
        };
        canvas.text(x0, ly, &label, color);
    }
    Ok(canvas)
}

pub fn render_overlay(image: &Tensor<f32>, verdict: &FusedVerdict, path: &Path) -> Result<()> {
    overlay(image, verdict)?.save(path)
}

/// One named polyline of a [`LinePlot`].
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: Color,
}

/// Axes, ticks, legend and series on a white background.
#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; derived from the data when `None`.
    pub y_range: Option<(f64, f64)>,
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN_L: i64 = 48;
const MARGIN_R: i64 = 16;
const MARGIN_T: i64 = 28;
const MARGIN_B: i64 = 36;

fn tick_label(v: f64) -> String {
    if v.abs() >= 1000.0 || (v.fract() == 0.0 && v.abs() >= 10.0) {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl LinePlot {
    pub fn render(&self) -> Canvas {
        let mut c = Canvas::new(PLOT_W, PLOT_H, WHITE);
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let fold = |f: fn(&(f64, f64)) -> f64| {
            pts().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let widen = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x_lo, x_hi) = widen(fold(|p| p.0));
        let (y_lo, y_hi) = self.y_range.unwrap_or_else(|| widen(fold(|p| p.1)));
        let (left, right) = (MARGIN_L, PLOT_W as i64 - MARGIN_R);
        let (top, bottom) = (MARGIN_T, PLOT_H as i64 - MARGIN_B);
        let px = |x: f64| left + ((x - x_lo) / (x_hi - x_lo) * (right - left) as f64).round() as i64;
        let py = |y: f64| bottom - ((y - y_lo) / (y_hi - y_lo) * (bottom - top) as f64).round() as i64;

        c.text(left, 8, &self.title, BLACK);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x_lo + f * (x_hi - x_lo), y_lo + f * (y_hi - y_lo));
            let (gx, gy) = (px(xv), py(yv));
            for x in (left..=right).step_by(4) {
                c.put(x, gy, GRAY);
            }
            c.line((gx, bottom), (gx, bottom + 3), BLACK);
            let xl = tick_label(xv);
            c.text(gx - Canvas::text_width(&xl) as i64 / 2, bottom + 6, &xl, BLACK);
            let yl = tick_label(yv);
            c.text(left - 4 - Canvas::text_width(&yl) as i64, gy - 3, &yl, BLACK);
        }
        c.line((left, top), (left, bottom), BLACK);
        c.line((left, bottom), (right, bottom), BLACK);
        let xw = Canvas::text_width(&self.x_label) as i64;
        c.text((left + right) / 2 - xw / 2, PLOT_H as i64 - 12, &self.x_label, BLACK);

        for s in &self.series {
            let mut prev: Option<(i64, i64)> = None;
            for &(x, y) in &s.points {
                if !(x.is_finite() && y.is_finite()) {
                    prev = None;
                    continue;
                }
                let p = (px(x), py(y.clamp(y_lo, y_hi)));
                if let Some(q) = prev {
                    c.line(q, p, s.color);
                }
                c.fill_rect(p.0 - 1, p.1 - 1, p.0 + 2, p.1 + 2, s.color);
                prev = Some(p);
            }
        }
        let mut ly = top + 4;
        for s in &self.series {
            let lx = right - 4 - Canvas::text_width(&s.name) as i64 - 14;
            c.fill_rect(lx, ly + 2, lx + 10, ly + 5, s.color);
            c.text(lx + 14, ly, &s.name, BLACK);
            ly += GLYPH_H as i64 + 5;
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.render().save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierOutput;
    use crate::fusion::{fuse, FusionConfig};
    use crate::geometry::Detection;

    fn count(c: &Canvas, color: Color) -> usize {
        c.image.pixels().filter(|p| **p == color).count()
    }

    #[test]
    fn overlay_draws_one_rectangle_per_detection() {
        let img = Tensor::full(&[64, 64, 1], 0.2f32);
        let cls = ClassifierOutput { p_yes: 0.2, p_no: 0.8 };
        let dets = [
            Detection::new(Rect::new(10.0, 20.0, 16.0, 26.0), 0.94),
            Detection::new(Rect::new(40.0, 40.0, 44.0, 46.0), 0.9),
        ];
        let v = fuse(&cls, &dets, &FusionConfig::default()).unwrap();
        let c = overlay(&img, &v).unwrap();
        assert_eq!(c.width(), 256);
        let none = fuse(&cls, &[], &FusionConfig::default()).unwrap();
        let bare = overlay(&img, &none).unwrap();
        assert_eq!(count(&bare, RED), 0);
        // two outlines at 4x scale, at least 16 px per side each
        assert!(count(&c, RED) > 2 * 4 * 16);
    }

    #[test]
    fn plot_is_deterministic() {
        let plot = LinePlot {
            title: "AP".into(),
            x_label: "IOU".into(),
            series: vec![Series {
                name: "AP".into(),
                points: vec![(0.1, 0.9), (0.5, 0.6), (0.9, 0.1)],
                color: BLUE,
            }],
            y_range: Some((0.0, 1.0)),
        };
        let a = plot.render();
        assert_eq!(a.image, plot.render().image);
        assert!(count(&a, BLUE) > 100);
    }
}
