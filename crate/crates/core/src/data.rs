//! Images, labeled datasets, and training-time augmentation.
//!
//! Datasets come either from directory-per-class image folders or from a
//! `synthetic://<kind>?key=value&...` spec that renders deterministic
//! labeled images from a seed.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::CHANNELS;
use crate::scalar::Scalar;

/// RGB image with values in [0, 1], stored height x width x channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Raw patch values, one row per patch (row-major grid), columns ordered (dy, dx, channel).
    pub fn patch_values(&self, patch: usize) -> Result<Array2<f32>> {
        if !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {patch}px patches",
                self.height, self.width
            )));
        }
        let (rows, cols) = (self.height / patch, self.width / patch);
        let mut out = Array2::zeros((rows * cols, patch * patch * CHANNELS));
        for pr in 0..rows {
            for pc in 0..cols {
                let mut row = out.row_mut(pr * cols + pc);
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for c in 0..CHANNELS {
                            row[k] = self.get(pr * patch + dy, pc * patch + dx, c);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encoder input: patch values shifted to [-1, 1].
    pub fn patchify<F: Scalar>(&self, patch: usize) -> Result<Array2<F>> {
        Ok(self.patch_values(patch)?.mapv(|v| F::of((2.0 * v - 1.0) as f64)))
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.data[(y * self.width + x) * CHANNELS + c] = self.get(y, self.width - 1 - x, c);
                }
            }
        }
        out
    }

    /// Bilinear resample of the box (top, left, h, w) to `out_h` x `out_w`.
    pub fn crop_resize(&self, top: f64, left: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Image {
        let mut out = Image::new(out_h, out_w);
        for oy in 0..out_h {
            let sy = (top + (oy as f64 + 0.5) * h / out_h as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for ox in 0..out_w {
                let sx = (left + (ox as f64 + 0.5) * w / out_w as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let mut rgb = [0f32; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let top_v = self.get(y0, x0, c) as f64 * (1.0 - fx) + self.get(y0, x1, c) as f64 * fx;
                    let bot_v = self.get(y1, x0, c) as f64 * (1.0 - fx) + self.get(y1, x1, c) as f64 * fx;
                    *v = (top_v * (1.0 - fy) + bot_v * fy) as f32;
                }
                out.set(oy, ox, rgb);
            }
        }
        out
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let mut m = [0f32; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                m[c] += px[c];
            }
        }
        let n = (self.height * self.width) as f32;
        m.map(|v| v / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub enabled: bool,
    pub crop_min_scale: f64,
    pub flip_prob: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_min_scale: 0.2,
            flip_prob: 0.5,
        }
    }
}

impl Augmentation {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Random resized crop (area scale in [crop_min_scale, 1], aspect in
    /// [3/4, 4/3]) followed by a horizontal flip with probability `flip_prob`.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Image {
        if !self.enabled {
            return img.clone();
        }
        let (h, w) = (img.height as f64, img.width as f64);
        let area = h * w;
        let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
        let mut cropped = None;
        for _ in 0..10 {
            let target = area * rng.random_range(self.crop_min_scale..=1.0);
            let ratio = rng.random_range(lo..=hi).exp();
            let cw = (target * ratio).sqrt();
            let ch = (target / ratio).sqrt();
            if cw <= w && ch <= h {
                let top = rng.random_range(0.0..=(h - ch));
                let left = rng.random_range(0.0..=(w - cw));
                cropped = Some(img.crop_resize(top, left, ch, cw, img.height, img.width));
                break;
            }
        }
        let out = cropped.unwrap_or_else(|| img.clone());
        if rng.random_bool(self.flip_prob.clamp(0.0, 1.0)) {
            out.hflip()
        } else {
            out
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    /// Stable 64-bit key per image (used by the teacher feature cache).
    pub ids: Vec<u64>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, id: u64, image: Image, label: usize) {
        self.ids.push(id);
        self.images.push(image);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

/// Resolves `root` (folder path or `synthetic://` spec) at `image_size` x `image_size`.
pub fn load_dataset(root: &str, image_size: usize) -> Result<Dataset> {
    let ds = if let Some(spec) = root.strip_prefix("synthetic://") {
        SyntheticSpec::parse(spec)?.generate(image_size)?
    } else {
        load_folder(Path::new(root), image_size)?
    };
    if ds.train.is_empty() {
        return Err(Error::Dataset(format!("dataset `{root}` has no training images")));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Class is the dominant color of a noisy image.
    Color,
    /// Class is the geometric pattern; colors, placement and scale are random.
    Shapes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub train: usize,
    pub test: usize,
    pub classes: usize,
    pub seed: u64,
    pub noise: f64,
    /// Shapes only: independent random foreground/background colors, or a
    /// light tinted foreground on a dark background.
    pub mono: bool,
}

impl SyntheticSpec {
    /// `<kind>?train=N&test=N&classes=K&seed=S&noise=X&colors=random|mono`; every key is optional.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, query) = spec.split_once('?').unwrap_or((spec, ""));
        let kind = match kind {
            "color" => SyntheticKind::Color,
            "shapes" => SyntheticKind::Shapes,
            other => {
                return Err(Error::Dataset(format!(
                    "unknown synthetic kind `{other}` (color|shapes)"
                )))
            }
        };
        let mut out = Self {
            kind,
            train: 512,
            test: 256,
            classes: if kind == SyntheticKind::Color { 2 } else { 10 },
            seed: 0,
            noise: 0.1,
            mono: false,
        };
        for pair in query.split('&').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Dataset(format!("malformed synthetic parameter `{pair}`")))?;
            let bad = |_| Error::Dataset(format!("bad value for synthetic `{k}`: `{v}`"));
            match k {
                "train" => out.train = v.parse().map_err(bad)?,
                "test" => out.test = v.parse().map_err(bad)?,
                "classes" => out.classes = v.parse().map_err(bad)?,
                "seed" => out.seed = v.parse().map_err(bad)?,
                "noise" => out.noise = v.parse().map_err(|_| Error::Dataset(format!("bad noise `{v}`")))?,
                "colors" => {
                    out.mono = match v {
                        "random" => false,
                        "mono" => true,
                        _ => return Err(Error::Dataset(format!("bad colors `{v}` (random|mono)"))),
                    }
                }
                other => return Err(Error::Dataset(format!("unknown synthetic parameter `{other}`"))),
            }
        }
        let max_classes = match kind {
            SyntheticKind::Color => COLOR_PALETTE.len(),
            SyntheticKind::Shapes => NUM_SHAPES,
        };
        if out.classes < 2 || out.classes > max_classes {
            return Err(Error::Dataset(format!(
                "synthetic `{spec}` supports 2..={max_classes} classes"
            )));
        }
        Ok(out)
    }

    pub fn generate(&self, size: usize) -> Result<Dataset> {
        let render = |split_seed: u64, count: usize, id_base: u64| {
            let mut set = LabeledImages::default();
            for i in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(split_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let label = i % self.classes;
                let img = match self.kind {
                    SyntheticKind::Color => render_color(label, size, self.noise, &mut rng),
                    SyntheticKind::Shapes => render_shape(label, size, self.noise, self.mono, &mut rng),
                };
                set.push(id_base + i as u64, img, label);
            }
            set
        };
        let base = self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D);
        let class_names = (0..self.classes).map(|c| format!("class{c}")).collect();
        Ok(Dataset {
            train: render(base ^ 0x7472_6169_6e00, self.train, 0),
            test: render(base ^ 0x7465_7374_0000, self.test, 1 << 32),
            num_classes: self.classes,
            class_names,
        })
    }
}

const COLOR_PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.2, 0.2],
    [0.2, 0.3, 0.85],
    [0.2, 0.8, 0.3],
    [0.85, 0.8, 0.2],
    [0.7, 0.25, 0.75],
    [0.2, 0.75, 0.8],
];

fn noisy(v: f64, noise: f64, rng: &mut impl Rng) -> f32 {
    (v + noise * (rng.random::<f64>() * 2.0 - 1.0) * 1.7).clamp(0.0, 1.0) as f32
}

fn render_color(label: usize, size: usize, noise: f64, rng: &mut impl Rng) -> Image {
    let base = COLOR_PALETTE[label];
    let shade: f64 = rng.random_range(-0.1..0.1);
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let rgb = base.map(|c| noisy(c as f64 + shade, noise, rng));
            img.set(y, x, rgb);
        }
    }
    img
}

const NUM_SHAPES: usize = 10;

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Coverage of pattern `label` at normalised coordinates (u, v) in the
/// object frame, where the object spans roughly [-1, 1]^2.
fn shape_mask(label: usize, u: f64, v: f64, freq: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match label {
        0 => r < 0.8,                                                          // disk
        1 => (0.5..0.85).contains(&r),                                         // ring
        2 => u.abs() < 0.7 && v.abs() < 0.7,                                   // square
        3 => u.abs().max(v.abs()) < 0.85 && u.abs().max(v.abs()) > 0.55,       // square outline
        4 => (v * freq * PI).sin() > 0.0 && r < 1.2,                           // horizontal bars
        5 => (u * freq * PI).sin() > 0.0 && r < 1.2,                           // vertical bars
        6 => ((u + v) * freq * PI * 0.7).sin() > 0.0 && r < 1.2,               // diagonal bars
        7 => ((u * freq * PI).sin() * (v * freq * PI).sin()) > 0.0 && r < 1.2, // checker
        8 => (u.abs() < 0.25 || v.abs() < 0.25) && r < 0.95,                   // plus
        _ => v > -0.7 && v < 0.8 && u.abs() < (0.8 - v) * 0.55,                // triangle
    }
}

fn render_shape(label: usize, size: usize, noise: f64, mono: bool, rng: &mut impl Rng) -> Image {
    let (fg, bg) = if mono {
        let tint = random_color(rng);
        let level: f64 = rng.random_range(0.0..0.3);
        (tint.map(|t| 0.7 + 0.3 * t), tint.map(|t| level * t))
    } else {
        let fg = random_color(rng);
        let mut bg = random_color(rng);
        // keep foreground and background distinguishable
        while fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() < 0.6 {
            bg = random_color(rng);
        }
        (fg, bg)
    };
    let scale = rng.random_range(0.3..0.48) * size as f64;
    let cx = size as f64 / 2.0 + rng.random_range(-0.15..0.15) * size as f64;
    let cy = size as f64 / 2.0 + rng.random_range(-0.15..0.15) * size as f64;
    let angle: f64 = rng.random_range(-0.3..0.3);
    let freq = rng.random_range(2.0..3.5);
    let (sin, cos) = angle.sin_cos();
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / scale;
            let dy = (y as f64 + 0.5 - cy) / scale;
            let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let c = if shape_mask(label, u, v, freq) { fg } else { bg };
            img.set(y, x, c.map(|ch| noisy(ch, noise, rng)));
        }
    }
    img
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn class_dirs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path)?
        .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
        .to_rgb8();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Image {
        height: size,
        width: size,
        data,
    })
}

fn load_split(dir: &Path, classes: &[String], size: usize, id_base: u64) -> Result<LabeledImages> {
    let mut set = LabeledImages::default();
    for (label, name) in classes.iter().enumerate() {
        let class_dir = dir.join(name);
        if !class_dir.is_dir() {
            continue;
        }
        for file in image_files(&class_dir)? {
            let id = id_base + set.len() as u64;
            set.push(id, load_image(&file, size)?, label);
        }
    }
    Ok(set)
}

/// `root/train/<class>/*` and `root/val/<class>/*` when a `train` directory
/// exists; otherwise `root/<class>/*` with every fifth image held out.
fn load_folder(root: &Path, size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let train_dir = root.join("train");
    if train_dir.is_dir() {
        let classes: Vec<String> = class_dirs(&train_dir)?.into_keys().collect();
        let train = load_split(&train_dir, &classes, size, 0)?;
        let test = ["val", "test"]
            .iter()
            .map(|d| root.join(d))
            .find(|d| d.is_dir())
            .map(|d| load_split(&d, &classes, size, 1 << 32))
            .transpose()?
            .unwrap_or_default();
        return Ok(Dataset {
            train,
            test,
            num_classes: classes.len(),
            class_names: classes,
        });
    }
    let classes: Vec<String> = class_dirs(root)?.into_keys().collect();
    let all = load_split(root, &classes, size, 0)?;
    let (mut train, mut test) = (LabeledImages::default(), LabeledImages::default());
    for i in 0..all.len() {
        let target = if i % 5 == 4 { &mut test } else { &mut train };
        target.push(all.ids[i], all.images[i].clone(), all.labels[i]);
    }
    Ok(Dataset {
        train,
        test,
        num_classes: classes.len(),
        class_names: classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_layout_is_row_major() {
        let mut img = Image::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.set(y, x, [(y * 4 + x) as f32, 0.0, 0.0]);
            }
        }
        let p = img.patch_values(2).unwrap();
        assert_eq!(p.dim(), (4, 12));
        // patch 1 = rows 0-1, cols 2-3
        assert_eq!(p[[1, 0]], 2.0);
        assert_eq!(p[[1, 3]], 3.0);
        assert_eq!(p[[1, 6]], 6.0);
        assert_eq!(p[[2, 0]], 8.0);
        assert!(img.patch_values(3).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = load_dataset("synthetic://shapes?train=40&test=20&seed=3", 16).unwrap();
        let b = load_dataset("synthetic://shapes?train=40&test=20&seed=3", 16).unwrap();
        assert_eq!(a.train.images, b.train.images);
        assert_eq!(a.num_classes, 10);
        assert_eq!(a.train.labels.iter().filter(|&&l| l == 7).count(), 4);
        let c = load_dataset("synthetic://shapes?train=40&test=20&seed=4", 16).unwrap();
        assert_ne!(a.train.images, c.train.images);
        assert_ne!(a.train.images[0], a.test.images[0]);
        assert!(a
            .train
            .images
            .iter()
            .all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn synthetic_spec_errors() {
        assert!(load_dataset("synthetic://nope", 8).is_err());
        assert!(load_dataset("synthetic://color?classes=1", 8).is_err());
        assert!(load_dataset("synthetic://color?bogus=1", 8).is_err());
        assert!(load_dataset("synthetic://color?train=0", 8).is_err());
        assert!(load_dataset("/definitely/not/here", 8).is_err());
    }

    #[test]
    fn augmentation_preserves_shape_and_is_seeded() {
        let ds = load_dataset("synthetic://shapes?train=2&test=1", 16).unwrap();
        let aug = Augmentation::default();
        let a = aug.apply(&ds.train.images[0], &mut ChaCha8Rng::seed_from_u64(1));
        let b = aug.apply(&ds.train.images[0], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (16, 16));
        assert_eq!(
            Augmentation::off().apply(&ds.train.images[0], &mut ChaCha8Rng::seed_from_u64(1)),
            ds.train.images[0]
        );
    }

    #[test]
    fn identity_crop_and_double_flip() {
        let ds = load_dataset("synthetic://shapes?train=1&test=1", 8).unwrap();
        let img = &ds.train.images[0];
        let same = img.crop_resize(0.0, 0.0, 8.0, 8.0, 8, 8);
        for (a, b) in same.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(&img.hflip().hflip(), img);
    }

    #[test]
    fn folder_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for (class, color) in [("blue", [0u8, 0, 255]), ("red", [255u8, 0, 0])] {
            let d = dir.path().join(class);
            std::fs::create_dir_all(&d).unwrap();
            for i in 0..5 {
                let img = image::RgbImage::from_pixel(12, 12, image::Rgb(color));
                img.save(d.join(format!("{i}.png"))).unwrap();
            }
        }
        let ds = load_dataset(dir.path().to_str().unwrap(), 8).unwrap();
        assert_eq!(ds.class_names, vec!["blue", "red"]);
        assert_eq!((ds.train.len(), ds.test.len()), (8, 2));
        assert_eq!(ds.train.images[0].mean_color()[2], 1.0);
    }
}
