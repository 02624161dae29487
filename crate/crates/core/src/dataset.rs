//! Image and annotation I/O, manifests and dataset splits.
//!
//! A dataset root holds `yes/` and `no/` directories of 8-bit grayscale
//! PNGs. Every image may carry a sidecar `<stem>.txt` annotation with one
//! normalized box per line: `class_id cx cy w h`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageReader};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

/// Slack allowed when checking normalized coordinates written with six decimals.
const COORD_SLACK: f64 = 1e-6;

/// Ground-truth box in normalized center/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    pub fn from_rect(rect: &Rect, image_w: usize, image_h: usize) -> Self {
        let (w, h) = (image_w as f64, image_h as f64);
        let (cx, cy) = rect.center();
        Self {
            class_id: 0,
            cx: cx / w,
            cy: cy / h,
            w: rect.width() / w,
            h: rect.height() / h,
        }
    }

    pub fn to_rect(&self, image_w: usize, image_h: usize) -> Rect {
        let (w, h) = (image_w as f64, image_h as f64);
        Rect::from_center(self.cx * w, self.cy * h, self.w * w, self.h * h)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let vals = [self.cx, self.cy, self.w, self.h];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if self.class_id != 0 {
            return Err(format!("class id {} (only 0 is defined)", self.class_id));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(format!("size {}x{} outside (0, 1]", self.w, self.h));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Err(format!("center ({}, {}) outside [0, 1]", self.cx, self.cy));
        }
        let inside = self.cx - self.w / 2.0 >= -COORD_SLACK
            && self.cy - self.h / 2.0 >= -COORD_SLACK
            && self.cx + self.w / 2.0 <= 1.0 + COORD_SLACK
            && self.cy + self.h / 2.0 <= 1.0 + COORD_SLACK;
        if !inside {
            return Err("box extends beyond the image".into());
        }
        Ok(())
    }
}

/// Loads an 8-bit grayscale or RGB PNG as an `H x W x 1` tensor in [0, 1].
pub fn load_png_gray(path: &Path) -> Result<Tensor<f32>> {
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageRgb8(rgb) => rgb
            .into_raw()
            .chunks_exact(3)
            .map(|p| (p[0] as u32 + p[1] as u32 + p[2] as u32) as f32 / 765.0)
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("{:?}; expected 8-bit gray or RGB", other.color()),
            })
        }
    };
    Tensor::image(h, w, data)
}

/// Writes an `H x W x 1` tensor as an 8-bit grayscale PNG.
pub fn save_png_gray(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Dimension("image buffer size mismatch".into()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.to_path_buf(),
                reason: other.to_string(),
            },
        })
}

pub fn parse_annotation(path: &Path, image_w: usize, image_h: usize) -> Result<Vec<BoxLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotation_text(&text, path, image_w, image_h)
}

pub fn parse_annotation_text(text: &str, path: &Path, image_w: usize, image_h: usize) -> Result<Vec<BoxLabel>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id = fields[0]
            .parse::<u32>()
            .map_err(|_| parse_err(format!("bad class id {:?}", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .map_err(|_| parse_err(format!("bad number {f:?}")))?;
        }
        let b = BoxLabel {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        };
        b.validate().map_err(|reason| {
            Error::Validation(format!("{}:{line_no}: {reason}", path.display()))
        })?;
        let px = b.to_rect(image_w, image_h);
        if !(px.width() > 0.0 && px.height() > 0.0) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: box vanishes at {image_w}x{image_h}",
                path.display()
            )));
        }
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn format_annotation(boxes: &[BoxLabel]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {:.6} {:.6} {:.6} {:.6}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}

pub fn write_annotation(boxes: &[BoxLabel], path: &Path) -> Result<()> {
    for b in boxes {
        b.validate()
            .map_err(|reason| Error::Validation(format!("refusing to write box {b:?}: {reason}")))?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_annotation(boxes)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Yes,
    No,
}

impl ClassLabel {
    /// Output index in the classifier's probability pair.
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Yes => 0,
            ClassLabel::No => 1,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            ClassLabel::Yes => "yes",
            ClassLabel::No => "no",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Split::All,
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Validation(format!("unknown split {other:?}"))),
        })
    }
}

/// One image path relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
}

impl ManifestEntry {
    pub fn new(image: impl Into<PathBuf>) -> Self {
        Self {
            image: image.into(),
        }
    }

    /// Sidecar annotation path (`<stem>.txt`).
    pub fn annotation(&self) -> PathBuf {
        self.image.with_extension("txt")
    }

    /// Class from the top-level directory (`yes/` or `no/`).
    pub fn label(&self) -> Option<ClassLabel> {
        match self.image.components().next()?.as_os_str().to_str()? {
            "yes" => Some(ClassLabel::Yes),
            "no" => Some(ClassLabel::No),
            _ => None,
        }
    }
}

pub const MANIFEST_HEADER: &str = "# pepipe manifest v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub image_size: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(split: Split, image_size: usize, entries: Vec<ManifestEntry>) -> Self {
        Self {
            split,
            image_size,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MANIFEST_HEADER}\nsplit {}\nimage_size {}\n",
            self.split, self.image_size
        );
        for e in &self.entries {
            out.push_str(&e.image.to_string_lossy());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let err = |line: usize, reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: reason.to_string(),
        };
        match lines.next() {
            Some((_, l)) if l == MANIFEST_HEADER => {}
            _ => return Err(err(1, "missing manifest header")),
        }
        let mut split = None;
        let mut image_size = None;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("split ") {
                split = Some(v.parse::<Split>()?);
            } else if let Some(v) = line.strip_prefix("image_size ") {
                image_size = Some(v.parse::<usize>().map_err(|_| err(i + 1, "bad image_size"))?);
            } else {
                entries.push(ManifestEntry::new(line));
            }
        }
        let manifest = Manifest {
            split: split.ok_or_else(|| err(2, "missing split"))?,
            image_size: image_size.ok_or_else(|| err(3, "missing image_size"))?,
            entries,
        };
        manifest.check_unique()?;
        Ok(manifest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.image) {
                return Err(Error::Validation(format!(
                    "duplicate manifest entry {}",
                    e.image.display()
                )));
            }
        }
        Ok(())
    }

    /// Fails if an entry is duplicated or any referenced image is missing.
    pub fn validate(&self, root: &Path) -> Result<()> {
        self.check_unique()?;
        for e in &self.entries {
            let p = root.join(&e.image);
            if !p.is_file() {
                return Err(Error::Validation(format!("missing image {}", p.display())));
            }
        }
        Ok(())
    }
}

/// Deterministic shuffled split into (train, val); stratified by class when
/// every entry has a directory label.
pub fn split_dataset(manifest: &Manifest, train_fraction: f64, val_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if manifest.is_empty() {
        return Err(Error::Input("cannot split an empty manifest".into()));
    }
    if (train_fraction + val_fraction - 1.0).abs() > 1e-9 || !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Input(format!(
            "split fractions {train_fraction} + {val_fraction} must be in [0, 1] and sum to 1"
        )));
    }
    let labels: Vec<Option<ClassLabel>> = manifest.entries.iter().map(ManifestEntry::label).collect();
    let stratified = labels.iter().all(Option::is_some);
    let mut groups: Vec<Vec<usize>> = if stratified {
        [ClassLabel::Yes, ClassLabel::No]
            .iter()
            .map(|c| (0..labels.len()).filter(|&i| labels[i] == Some(*c)).collect())
            .collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for g in &mut groups {
        g.shuffle(&mut rng);
        let n_train = (g.len() as f64 * train_fraction).round() as usize;
        train.extend_from_slice(&g[..n_train]);
        val.extend_from_slice(&g[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    let pick = |idx: &[usize], split| {
        Manifest::new(
            split,
            manifest.image_size,
            idx.iter().map(|&i| manifest.entries[i].clone()).collect(),
        )
    };
    Ok((pick(&train, Split::Train), pick(&val, Split::Val)))
}

/// An image with its class and pixel-space boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor<f32>,
    pub label: ClassLabel,
    pub boxes: Vec<Rect>,
}

/// Loads every entry (fail-fast). Missing annotations are an error only
/// when `require_annotations` is set; unlabeled entries default to `Yes`
/// when they carry boxes and `No` otherwise.
pub fn load_samples(root: &Path, manifest: &Manifest, require_annotations: bool) -> Result<Vec<Sample>> {
    manifest.validate(root)?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = root.join(&e.image);
            let image = load_png_gray(&path)?;
            let ann = root.join(e.annotation());
            let boxes = if ann.is_file() {
                parse_annotation(&ann, image.width(), image.height())?
                    .iter()
                    .map(|b| b.to_rect(image.width(), image.height()))
                    .collect()
            } else if require_annotations {
                return Err(Error::Consistency(format!(
                    "missing annotation {}",
                    ann.display()
                )));
            } else {
                Vec::new()
            };
            let label = e.label().unwrap_or(if boxes.is_empty() {
                ClassLabel::No
            } else {
                ClassLabel::Yes
            });
            Ok(Sample {
                name: e.image.to_string_lossy().into_owned(),
                image,
                label,
                boxes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn annotation_line_to_pixel_corners() {
        let boxes = parse_annotation_text("0 0.5 0.5 0.2 0.1\n", Path::new("a.txt"), 100, 100).unwrap();
        let r = boxes[0].to_rect(100, 100);
        assert!((r.x_min - 40.0).abs() < 1e-9 && (r.y_min - 45.0).abs() < 1e-9);
        assert!((r.x_max - 60.0).abs() < 1e-9 && (r.y_max - 55.0).abs() < 1e-9);
    }

    #[test]
    fn annotation_errors() {
        assert!(parse_annotation_text("", Path::new("e.txt"), 10, 10).unwrap().is_empty());
        let e = parse_annotation_text("0 0.5 0.5 0.2 0.1\n0 1.5 0.5 0.2 0.1\n", Path::new("x.txt"), 100, 100);
        assert!(matches!(e, Err(Error::Validation(_))));
        let e = parse_annotation_text("0 0.5 0.5 0.2 0.1\n0 0.5 oops 0.2 0.1\n", Path::new("x.txt"), 100, 100);
        assert!(matches!(e, Err(Error::Parse { line: 2, .. })));
        let e = parse_annotation_text("0 0.5 0.5 0.2\n", Path::new("x.txt"), 100, 100);
        assert!(matches!(e, Err(Error::Parse { line: 1, .. })));
        let e = parse_annotation_text("0 0.05 0.5 0.2 0.1\n", Path::new("x.txt"), 100, 100);
        assert!(matches!(e, Err(Error::Validation(_))));
    }

    #[test]
    fn write_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_annotation(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "");
        let one = BoxLabel {
            class_id: 0,
            cx: 0.25,
            cy: 0.5,
            w: 0.1,
            h: 0.2,
        };
        write_annotation(&[one], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.split_whitespace().count(), 5);

        let eight: Vec<BoxLabel> = (0..8)
            .map(|i| BoxLabel {
                cx: 0.1 + 0.1 * i as f64,
                ..one
            })
            .collect();
        write_annotation(&eight, &p).unwrap();
        let back = parse_annotation(&p, 64, 64).unwrap();
        assert_eq!(back.len(), 8);
        for (a, b) in back.iter().zip(&eight) {
            assert!((a.cx - b.cx).abs() < 1e-6);
        }
    }

    #[test]
    fn png_gray_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(3, 2, image::Luma([128])).save(&p).unwrap();
        let t = load_png_gray(&p).unwrap();
        assert_eq!(t.shape(), &[2, 3, 1]);
        assert!((t.data()[0] - 0.50196).abs() < 1e-5);

        image::GrayImage::from_pixel(2, 2, image::Luma([0])).save(&p).unwrap();
        assert!(load_png_gray(&p).unwrap().data().iter().all(|&v| v == 0.0));
        image::RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255])).save(&p).unwrap();
        assert!(load_png_gray(&p).unwrap().data().iter().all(|&v| v == 1.0));
        image::RgbImage::from_pixel(1, 1, image::Rgb([30, 60, 90])).save(&p).unwrap();
        assert!((load_png_gray(&p).unwrap().data()[0] - 60.0 / 255.0).abs() < 1e-6);

        let wide: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_pixel(2, 2, image::Luma([1000u16]));
        wide.save(&p).unwrap();
        assert!(matches!(load_png_gray(&p), Err(Error::UnsupportedFormat { .. })));

        fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_png_gray(&p), Err(Error::Decode { .. })));
    }

    #[test]
    fn png_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/r.png");
        let t = Tensor::image(2, 2, vec![0.0, 1.0, 128.0 / 255.0, 7.0 / 255.0]).unwrap();
        save_png_gray(&t, &p).unwrap();
        assert_eq!(load_png_gray(&p).unwrap(), t);
    }

    fn manifest_of(names: &[String]) -> Manifest {
        Manifest::new(Split::All, 64, names.iter().map(ManifestEntry::new).collect())
    }

    #[test]
    fn split_examples() {
        let names: Vec<String> = (0..10).map(|i| format!("img{i}.png")).collect();
        let m = manifest_of(&names);
        let (tr, va) = split_dataset(&m, 0.8, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert!(va.entries.iter().all(|e| !tr.entries.contains(e)));
        assert_eq!(split_dataset(&m, 0.8, 0.2, 3).unwrap(), (tr, va));

        let strat: Vec<String> = (0..50)
            .map(|i| format!("yes/{i}.png"))
            .chain((0..50).map(|i| format!("no/{i}.png")))
            .collect();
        let (tr, va) = split_dataset(&manifest_of(&strat), 0.8, 0.2, 9).unwrap();
        let yes = |m: &Manifest| m.entries.iter().filter(|e| e.label() == Some(ClassLabel::Yes)).count();
        assert_eq!((yes(&tr), tr.len() - yes(&tr)), (40, 40));
        assert_eq!((yes(&va), va.len() - yes(&va)), (10, 10));

        assert!(split_dataset(&manifest_of(&[]), 0.8, 0.2, 1).is_err());
        assert!(split_dataset(&m, 0.8, 0.3, 1).is_err());
    }

    #[test]
    fn manifest_text_round_trip_and_duplicates() {
        let m = manifest_of(&["yes/a.png".to_string(), "no/b.png".to_string()]);
        let back = Manifest::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        let dup = "# pepipe manifest v1\nsplit train\nimage_size 64\na.png\na.png\n";
        assert!(Manifest::parse(dup, Path::new("m")).is_err());
        assert!(m.validate(Path::new("/nonexistent")).is_err());
    }

    fn box_label() -> impl Strategy<Value = BoxLabel> {
        (0.01..0.5f64, 0.01..0.5f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(w, h, u, v)| BoxLabel {
            class_id: 0,
            cx: w / 2.0 + u * (1.0 - w),
            cy: h / 2.0 + v * (1.0 - h),
            w,
            h,
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_format(boxes in proptest::collection::vec(box_label(), 0..8)) {
            let text = format_annotation(&boxes);
            let back = parse_annotation_text(&text, Path::new("p.txt"), 64, 64).unwrap();
            prop_assert_eq!(back.len(), boxes.len());
            for (a, b) in back.iter().zip(&boxes) {
                prop_assert!((a.cx - b.cx).abs() <= 5e-7 && (a.cy - b.cy).abs() <= 5e-7);
                prop_assert!((a.w - b.w).abs() <= 5e-7 && (a.h - b.h).abs() <= 5e-7);
            }
            prop_assert_eq!(format_annotation(&back), text);
        }
    }
}
