//! Deterministic synthetic CT-angiography phantoms.
//!
//! Each image is a dim blob background crossed by bright gaussian ridges
//! ("vessels"). Positive images get dark elliptical filling defects centered
//! on a ridge, each with a tight bounding box. `(seed, index)` fully
//! determines an image, so generation parallelizes freely.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    format_annotation, parse_annotation, save_png_gray, BoxLabel, ClassLabel, Manifest,
    ManifestEntry, Split,
};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

const PLACEMENT_ATTEMPTS: usize = 100;
/// Decay of the truncated geometric lesion-count distribution.
const LESION_COUNT_DECAY: f64 = 0.55;
/// Lesions may overlap each other only slightly.
const MAX_LESION_IOU: f64 = 0.2;
const MIN_BOX_PX: f64 = 2.0;
/// Lesions stay inside the bright core of their vessel.
const MAX_RADIUS_SIGMAS: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub lesions_per_image: RangeInclusive<usize>,
    pub lesion_diameter_frac: (f64, f64),
    pub vessel_count: RangeInclusive<usize>,
    /// Ridge gaussian sigma as a fraction of the image size.
    pub vessel_sigma_frac: (f64, f64),
    /// Lesion intensity drop below the local ridge value.
    pub lesion_dip: (f64, f64),
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_positive: 250,
            n_negative: 250,
            lesions_per_image: 1..=8,
            lesion_diameter_frac: (0.04, 0.15),
            vessel_count: 2..=4,
            vessel_sigma_frac: (0.05, 0.08),
            lesion_dip: (0.45, 0.65),
            noise_amplitude: 0.02,
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(8..=4096).contains(&self.image_size) {
            return bad(format!("image_size {} outside 8..=4096", self.image_size));
        }
        if *self.lesions_per_image.start() < 1 || self.lesions_per_image.is_empty() {
            return bad(format!("lesions_per_image {:?} must be a non-empty range starting at >= 1", self.lesions_per_image));
        }
        let (lo, hi) = self.lesion_diameter_frac;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("lesion_diameter_frac ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"));
        }
        if *self.vessel_count.start() < 1 || self.vessel_count.is_empty() {
            return bad(format!("vessel_count {:?} must be a non-empty range starting at >= 1", self.vessel_count));
        }
        let (slo, shi) = self.vessel_sigma_frac;
        if !(slo > 0.0 && slo <= shi && shi < 0.5) {
            return bad(format!("vessel_sigma_frac ({slo}, {shi}) must satisfy 0 < lo <= hi < 0.5"));
        }
        let (dlo, dhi) = self.lesion_dip;
        if !(dlo >= 0.3 && dlo <= dhi && dhi <= 0.7) {
            return bad(format!("lesion_dip ({dlo}, {dhi}) must lie in [0.3, 0.7]"));
        }
        if !(0.0..=0.2).contains(&self.noise_amplitude) {
            return bad(format!("noise_amplitude {} outside [0, 0.2]", self.noise_amplitude));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_positive + self.n_negative
    }

    pub fn class_of(&self, index: usize) -> ClassLabel {
        if index < self.n_positive {
            ClassLabel::Yes
        } else {
            ClassLabel::No
        }
    }

    pub fn file_stem(&self, index: usize) -> String {
        match self.class_of(index) {
            ClassLabel::Yes => format!("pe_{index:05}"),
            ClassLabel::No => format!("clear_{index:05}"),
        }
    }
}

/// A generated lesion: the ellipse and its tight pixel-space bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
    /// Ridge intensity at the center before the lesion was drawn.
    pub ridge_value: f64,
    pub bbox: Rect,
}

impl Lesion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomImage {
    pub pixels: Tensor<f32>,
    pub boxes: Vec<BoxLabel>,
    pub lesions: Vec<Lesion>,
    pub class_label: ClassLabel,
}

impl PhantomImage {
    pub fn pixel_boxes(&self) -> Vec<Rect> {
        self.lesions.iter().map(|l| l.bbox).collect()
    }
}

struct Vessel {
    points: Vec<(f64, f64)>,
    sigma: f64,
    peak: f64,
}

impl Vessel {
    fn segments(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    fn length(&self) -> f64 {
        self.segments().map(|(a, b)| (b.0 - a.0).hypot(b.1 - a.1)).sum()
    }

    fn point_at(&self, mut s: f64) -> (f64, f64) {
        for (a, b) in self.segments() {
            let len = (b.0 - a.0).hypot(b.1 - a.1);
            if s <= len || len == 0.0 {
                let t = if len > 0.0 { s / len } else { 0.0 };
                return (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
            }
            s -= len;
        }
        *self.points.last().expect("vessel has points")
    }

    fn distance_sq(&self, x: f64, y: f64) -> f64 {
        self.segments()
            .map(|(a, b)| {
                let (vx, vy) = (b.0 - a.0, b.1 - a.1);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (a.0 + t * vx - x, a.1 + t * vy - y);
                px * px + py * py
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        self.peak * (-self.distance_sq(x, y) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

fn image_rng(seed: u64, index: usize, stream_tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream_tag) << 48) ^ index as u64);
    rng
}

fn random_vessel(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vessel {
    let n = cfg.image_size as f64;
    let segments = rng.gen_range(3..=5);
    let mut pos = (rng.gen_range(0.1..0.9) * n, rng.gen_range(0.1..0.9) * n);
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut points = vec![pos];
    for _ in 0..segments {
        let len = rng.gen_range(0.2..0.4) * n;
        heading += rng.gen_range(-0.6..0.6);
        let (lo, hi) = (0.05 * n, 0.95 * n);
        let mut next = (pos.0 + len * heading.cos(), pos.1 + len * heading.sin());
        // bounce off the borders so that vessels stay in view
        if !(lo..=hi).contains(&next.0) {
            heading = std::f64::consts::PI - heading;
            next.0 = next.0.clamp(lo, hi);
        }
        if !(lo..=hi).contains(&next.1) {
            heading = -heading;
            next.1 = next.1.clamp(lo, hi);
        }
        pos = next;
        points.push(pos);
    }
    let (slo, shi) = cfg.vessel_sigma_frac;
    Vessel {
        points,
        sigma: rng.gen_range(slo..=shi) * n,
        peak: rng.gen_range(0.75..0.95),
    }
}

/// Dim background plus vessel ridges; returns the clean intensity field.
fn render_anatomy(cfg: &PhantomConfig, vessels: &[Vessel], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = cfg.image_size;
    let nf = n as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(4..=8))
        .map(|_| {
            (
                rng.gen_range(0.0..nf),
                rng.gen_range(0.0..nf),
                rng.gen_range(0.1..0.3) * nf,
                rng.gen_range(0.04..0.12),
            )
        })
        .collect();
    let mut field = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let bg: f64 = 0.08
                + blobs
                    .iter()
                    .map(|&(bx, by, s, a)| {
                        let d2 = (x - bx).powi(2) + (y - by).powi(2);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum::<f64>();
            let ridge = vessels.iter().map(|v| v.value(x, y)).fold(0.0, f64::max);
            field[i * n + j] = bg.max(ridge);
        }
    }
    field
}

/// Truncated geometric draw over the configured lesion-count range.
fn lesion_count(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> usize {
    let (lo, hi) = (*cfg.lesions_per_image.start(), *cfg.lesions_per_image.end());
    let weights: Vec<f64> = (lo..=hi)
        .map(|k| LESION_COUNT_DECAY.powi((k - lo) as i32))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, w) in (lo..=hi).zip(&weights) {
        if u < *w {
            return k;
        }
        u -= w;
    }
    hi
}

fn place_lesion(
    cfg: &PhantomConfig,
    vessels: &[Vessel],
    field: &[f64],
    existing: &[Lesion],
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<Lesion> {
    let n = cfg.image_size;
    let nf = n as f64;
    let (dlo, dhi) = cfg.lesion_diameter_frac;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let v = &vessels[rng.gen_range(0..vessels.len())];
        let (cx, cy) = v.point_at(rng.gen_range(0.0..v.length()));
        let semi_major = (rng.gen_range(dlo..=dhi) * nf / 2.0).min(MAX_RADIUS_SIGMAS * v.sigma);
        let semi_minor = semi_major * rng.gen_range(0.8..=1.0);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let (s, c) = angle.sin_cos();
        let ex = (semi_major * semi_major * c * c + semi_minor * semi_minor * s * s).sqrt();
        let ey = (semi_major * semi_major * s * s + semi_minor * semi_minor * c * c).sqrt();
        let bbox = Rect::new(cx - ex, cy - ey, cx + ex, cy + ey);
        if !bbox.within(nf, nf) || bbox.width() < MIN_BOX_PX || bbox.height() < MIN_BOX_PX {
            continue;
        }
        if existing
            .iter()
            .any(|l| l.bbox.iou_unchecked(&bbox) > MAX_LESION_IOU)
        {
            continue;
        }
        let (pi, pj) = ((cy as usize).min(n - 1), (cx as usize).min(n - 1));
        return Ok(Lesion {
            cx,
            cy,
            semi_major,
            semi_minor,
            angle,
            ridge_value: field[pi * n + pj].max(v.value(cx, cy)),
            bbox,
        });
    }
    Err(Error::Generation(format!(
        "image {index}: no room for lesion {} after {PLACEMENT_ATTEMPTS} attempts",
        existing.len() + 1
    )))
}

fn finish(cfg: &PhantomConfig, mut field: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    if cfg.noise_amplitude > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_amplitude)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in field.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    let n = cfg.image_size;
    Tensor::image(n, n, field.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
}

#[derive(Debug, Clone, Copy)]
enum Lesions {
    None,
    Sampled,
    Exactly(usize),
}

fn render_scene(
    cfg: &PhantomConfig,
    rng: &mut ChaCha8Rng,
    vessel_n: usize,
    plan: Lesions,
    index: usize,
) -> Result<(Tensor<f32>, Vec<Lesion>)> {
    let n = cfg.image_size;
    let vessels: Vec<Vessel> = (0..vessel_n).map(|_| random_vessel(cfg, rng)).collect();
    let mut field = render_anatomy(cfg, &vessels, rng);
    let mut lesions = Vec::new();
    let lesion_n = match plan {
        Lesions::None => 0,
        Lesions::Sampled => lesion_count(cfg, rng),
        Lesions::Exactly(k) => k,
    };
    if lesion_n > 0 {
        for _ in 0..lesion_n {
            let lesion = place_lesion(cfg, &vessels, &field, &lesions, rng, index)?;
            lesions.push(lesion);
        }
        let (dlo, dhi) = cfg.lesion_dip;
        for l in &lesions {
            let fill = (l.ridge_value - rng.gen_range(dlo..=dhi)).max(0.0);
            let (i0, i1) = (l.bbox.y_min.floor() as usize, (l.bbox.y_max.ceil() as usize).min(n));
            let (j0, j1) = (l.bbox.x_min.floor() as usize, (l.bbox.x_max.ceil() as usize).min(n));
            for i in i0..i1 {
                for j in j0..j1 {
                    if l.contains(j as f64 + 0.5, i as f64 + 0.5) {
                        let p = &mut field[i * n + j];
                        *p = p.min(fill);
                    }
                }
            }
        }
    }
    Ok((finish(cfg, field, rng)?, lesions))
}

pub fn generate_image(cfg: &PhantomConfig, index: usize) -> Result<PhantomImage> {
    cfg.validate()?;
    let class_label = cfg.class_of(index);
    let mut rng = image_rng(cfg.seed, index, 0);
    let n = cfg.image_size;
    let vessel_n = rng.gen_range(cfg.vessel_count.clone());
    let plan = if class_label == ClassLabel::Yes { Lesions::Sampled } else { Lesions::None };
    let (pixels, lesions) = render_scene(cfg, &mut rng, vessel_n, plan, index)?;
    let boxes = lesions
        .iter()
        .map(|l| BoxLabel::from_rect(&l.bbox, n, n))
        .collect();
    Ok(PhantomImage {
        pixels,
        boxes,
        lesions,
        class_label,
    })
}

/// Lesion-count buckets used as the self-supervised pretext task.
pub const PRETEXT_BUCKETS: [RangeInclusive<usize>; 3] = [1..=1, 2..=2, 3..=4];

/// Phantom labelled by its lesion-count bucket (balanced by index). Every
/// image carries at least one lesion, so the pretext never contrasts
/// lesion against no lesion; it only teaches the backbone to find and
/// count dips along the ridges.
pub fn generate_pretext_image(cfg: &PhantomConfig, index: usize) -> Result<(Tensor<f32>, usize)> {
    cfg.validate()?;
    let bucket = index % PRETEXT_BUCKETS.len();
    let mut rng = image_rng(cfg.seed, index, 1);
    let count = rng.gen_range(PRETEXT_BUCKETS[bucket].clone());
    let vessel_n = rng.gen_range(cfg.vessel_count.clone());
    let (pixels, _) = render_scene(cfg, &mut rng, vessel_n, Lesions::Exactly(count), index)?;
    Ok((pixels, bucket))
}

/// Generates all images in parallel; output order follows index.
pub fn generate_all(cfg: &PhantomConfig) -> Result<Vec<PhantomImage>> {
    cfg.validate()?;
    (0..cfg.total())
        .into_par_iter()
        .map(|i| generate_image(cfg, i))
        .collect()
}

/// Writes `yes/` and `no/` PNGs with annotation sidecars, `manifest.txt`,
/// `stats.txt` and `stats.kv` under `out_dir`.
pub fn generate_dataset(cfg: &PhantomConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<ManifestEntry> = (0..cfg.total())
        .into_par_iter()
        .map(|i| {
            let img = generate_image(cfg, i)?;
            let rel = Path::new(img.class_label.dir_name()).join(format!("{}.png", cfg.file_stem(i)));
            let entry = ManifestEntry::new(rel);
            save_png_gray(&img.pixels, &out_dir.join(&entry.image))?;
            let ann = out_dir.join(entry.annotation());
            fs::write(&ann, format_annotation(&img.boxes)).map_err(|e| Error::io(&ann, e))?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(Split::All, cfg.image_size, entries);
    manifest.write(&out_dir.join("manifest.txt"))?;
    let stats = dataset_stats(&manifest, out_dir)?;
    let p = out_dir.join("stats.txt");
    fs::write(&p, stats.to_text()).map_err(|e| Error::io(&p, e))?;
    let p = out_dir.join("stats.kv");
    fs::write(&p, stats.to_kv()).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub yes: usize,
    pub no: usize,
    pub boxes: usize,
    /// Box count -> number of images with that many boxes.
    pub histogram: BTreeMap<usize, usize>,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub mean_boxes_per_image: f64,
    pub mean_boxes_per_positive: f64,
}

impl DatasetStats {
    pub fn from_counts(counts: &[(ClassLabel, usize)]) -> Self {
        let mut s = DatasetStats::default();
        if counts.is_empty() {
            return s;
        }
        s.images = counts.len();
        s.min_boxes = usize::MAX;
        let mut positive_images = 0;
        let mut positive_boxes = 0;
        for &(label, k) in counts {
            match label {
                ClassLabel::Yes => s.yes += 1,
                ClassLabel::No => s.no += 1,
            }
            if k > 0 {
                positive_images += 1;
                positive_boxes += k;
            }
            s.boxes += k;
            *s.histogram.entry(k).or_default() += 1;
            s.min_boxes = s.min_boxes.min(k);
            s.max_boxes = s.max_boxes.max(k);
        }
        s.mean_boxes_per_image = s.boxes as f64 / s.images as f64;
        if positive_images > 0 {
            s.mean_boxes_per_positive = positive_boxes as f64 / positive_images as f64;
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "images            {}", self.images);
        let _ = writeln!(out, "  yes             {}", self.yes);
        let _ = writeln!(out, "  no              {}", self.no);
        let _ = writeln!(out, "boxes             {}", self.boxes);
        let _ = writeln!(out, "boxes/image       {:.4}", self.mean_boxes_per_image);
        let _ = writeln!(out, "boxes/positive    {:.4}", self.mean_boxes_per_positive);
        let _ = writeln!(out, "min/max boxes     {} / {}", self.min_boxes, self.max_boxes);
        let _ = writeln!(out, "histogram (boxes: images)");
        for (k, v) in &self.histogram {
            let _ = writeln!(out, "  {k}: {v}");
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "images={}\nyes={}\nno={}\nboxes={}\nmean_boxes_per_image={:.6}\nmean_boxes_per_positive={:.6}\nmin_boxes={}\nmax_boxes={}\n",
            self.images,
            self.yes,
            self.no,
            self.boxes,
            self.mean_boxes_per_image,
            self.mean_boxes_per_positive,
            self.min_boxes,
            self.max_boxes
        );
        for (k, v) in &self.histogram {
            let _ = writeln!(out, "hist_{k}={v}");
        }
        out
    }
}

/// Counts images and boxes; every entry needs an annotation sidecar.
pub fn dataset_stats(manifest: &Manifest, root: &Path) -> Result<DatasetStats> {
    let size = manifest.image_size;
    let counts = manifest
        .entries
        .iter()
        .map(|e| {
            let ann = root.join(e.annotation());
            if !ann.is_file() {
                return Err(Error::Consistency(format!("missing annotation {}", ann.display())));
            }
            let k = parse_annotation(&ann, size, size)?.len();
            let label = e.label().unwrap_or(if k > 0 { ClassLabel::Yes } else { ClassLabel::No });
            Ok((label, k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetStats::from_counts(&counts))
}
