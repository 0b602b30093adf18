//! Teacher-token providers and the binary feature cache.
//!
//! A provider turns an image into one target vector per patch. Providers
//! are read-only: nothing they hold is ever touched by the optimizer.
//!
//! Cache layout (all little-endian):
//!
//! ```text
//! magic "DGPT" | version u32 = 1 | dtype u8 (0 = f32) | grid_h u16 | grid_w u16
//! | dim u32 | count u64 | count x (image_id u64, grid_h*grid_w*dim f32)
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterLayout;
use crate::data::Image;
use crate::error::{at_path, config_err, shape_err, Error, Result};
use crate::model::Encoder;

pub const CACHE_MAGIC: &[u8; 4] = b"DGPT";
pub const CACHE_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const PIXEL_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TeacherKind {
    Pixel,
    Frozen,
    Cache,
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Self::Pixel),
            "frozen" => Ok(Self::Frozen),
            "cache" => Ok(Self::Cache),
            other => config_err(format!("unknown teacher.kind `{other}` (pixel|frozen|cache)")),
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pixel => "pixel",
            Self::Frozen => "frozen",
            Self::Cache => "cache",
        })
    }
}

/// Per-patch target vectors on the student's patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTokens {
    pub grid_h: usize,
    pub grid_w: usize,
    /// One row per patch, row-major over the grid.
    pub tokens: Array2<f32>,
    pub source: TeacherKind,
}

impl TeacherTokens {
    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Raw pixels of each patch, standardised to zero mean and unit variance.
pub fn pixel_tokens(image: &Image, layout: &ClusterLayout) -> Result<TeacherTokens> {
    if image.height != layout.image_h || image.width != layout.image_w {
        return shape_err(format!(
            "{}x{} image for a {}x{} layout",
            image.height, image.width, layout.image_h, layout.image_w
        ));
    }
    let mut tokens = image.patch_values(layout.patch_size)?;
    for mut row in tokens.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + PIXEL_EPS as f64).sqrt();
        row.mapv_inplace(|v| ((v as f64 - mean) * inv) as f32);
    }
    Ok(TeacherTokens {
        grid_h: layout.patch_rows(),
        grid_w: layout.patch_cols(),
        tokens,
        source: TeacherKind::Pixel,
    })
}

/// Final-layer patch features of a frozen encoder with the same patch grid.
pub fn frozen_tokens(teacher: &Encoder<f32>, image: &Image, layout: &ClusterLayout) -> Result<TeacherTokens> {
    if teacher.num_slots() != layout.num_patches() {
        return shape_err(format!(
            "teacher has {} patch slots, student grid has {} (no resampling)",
            teacher.num_slots(),
            layout.num_patches()
        ));
    }
    if teacher.patch_embed.input_dim() != layout.patch_size * layout.patch_size * crate::model::CHANNELS {
        return shape_err("teacher patch size differs from the student's");
    }
    let patches = image.patchify::<f32>(layout.patch_size)?;
    let positions: Vec<usize> = (0..layout.num_patches()).collect();
    let (tokens, _) = teacher.forward(&patches, &positions, None, None)?;
    Ok(TeacherTokens {
        grid_h: layout.patch_rows(),
        grid_w: layout.patch_cols(),
        tokens,
        source: TeacherKind::Frozen,
    })
}

/// Precomputed tokens keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    entries: HashMap<u64, Array2<f32>>,
}

impl FeatureCache {
    pub fn empty(grid_h: usize, grid_w: usize, dim: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, id: u64) -> Result<TeacherTokens> {
        let tokens = self.entries.get(&id).ok_or(Error::MissingKey(id))?;
        Ok(TeacherTokens {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            tokens: tokens.clone(),
            source: TeacherKind::Cache,
        })
    }
}

pub fn cache_write(path: &Path, entries: &[(u64, TeacherTokens)]) -> Result<()> {
    let (grid_h, grid_w, dim) = match entries.first() {
        Some((_, t)) => (t.grid_h, t.grid_w, t.dim()),
        None => (0, 0, 0),
    };
    for (id, t) in entries {
        if (t.grid_h, t.grid_w, t.dim()) != (grid_h, grid_w, dim) || t.tokens.nrows() != grid_h * grid_w {
            return shape_err(format!(
                "cache entry {id} does not share the grid/dim of the first entry"
            ));
        }
    }
    if grid_h > u16::MAX as usize || grid_w > u16::MAX as usize || dim > u32::MAX as usize {
        return shape_err("grid or dim too large for the cache header");
    }
    let mut w = BufWriter::new(at_path(path, File::create(path))?);
    w.write_all(CACHE_MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_u8(DTYPE_F32)?;
    w.write_u16::<LittleEndian>(grid_h as u16)?;
    w.write_u16::<LittleEndian>(grid_w as u16)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(entries.len() as u64)?;
    for (id, t) in entries {
        w.write_u64::<LittleEndian>(*id)?;
        for &v in t.tokens.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cache_read(path: &Path) -> Result<FeatureCache> {
    let mut r = BufReader::new(at_path(path, File::open(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated cache header".into()))?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format(format!("bad cache magic {magic:?}")));
    }
    let fmt_err = |_| Error::Format("truncated cache header".into());
    let version = r.read_u32::<LittleEndian>().map_err(fmt_err)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let dtype = r.read_u8().map_err(fmt_err)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported cache dtype code {dtype}")));
    }
    let grid_h = r.read_u16::<LittleEndian>().map_err(fmt_err)? as usize;
    let grid_w = r.read_u16::<LittleEndian>().map_err(fmt_err)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    let count = r.read_u64::<LittleEndian>().map_err(fmt_err)?;
    let per = grid_h * grid_w * dim;
    let mut entries = HashMap::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let rec_err = |_| Error::Format("truncated cache record".into());
        let id = r.read_u64::<LittleEndian>().map_err(rec_err)?;
        let mut values = vec![0f32; per];
        r.read_f32_into::<LittleEndian>(&mut values).map_err(rec_err)?;
        let tokens =
            Array2::from_shape_vec((grid_h * grid_w, dim), values).map_err(|e| Error::Format(e.to_string()))?;
        entries.insert(id, tokens);
    }
    Ok(FeatureCache {
        grid_h,
        grid_w,
        dim,
        entries,
    })
}

/// Source of teacher tokens during training.
#[derive(Debug, Clone)]
pub enum TeacherProvider {
    Pixel,
    Frozen(Arc<Encoder<f32>>),
    Cache(Arc<FeatureCache>),
}

impl TeacherProvider {
    pub fn kind(&self) -> TeacherKind {
        match self {
            Self::Pixel => TeacherKind::Pixel,
            Self::Frozen(_) => TeacherKind::Frozen,
            Self::Cache(_) => TeacherKind::Cache,
        }
    }

    /// Token dimension for a student layout.
    pub fn dim(&self, layout: &ClusterLayout) -> usize {
        match self {
            Self::Pixel => layout.patch_size * layout.patch_size * crate::model::CHANNELS,
            Self::Frozen(e) => e.dim(),
            Self::Cache(c) => c.dim,
        }
    }

    /// Tokens for `image` (the exact view the student sees); the cache is keyed by `id`.
    pub fn tokens(&self, id: u64, image: &Image, layout: &ClusterLayout) -> Result<TeacherTokens> {
        match self {
            Self::Pixel => pixel_tokens(image, layout),
            Self::Frozen(e) => frozen_tokens(e, image, layout),
            Self::Cache(c) => {
                if (c.grid_h, c.grid_w) != (layout.patch_rows(), layout.patch_cols()) {
                    return shape_err(format!(
                        "cache grid {}x{} differs from student grid {}x{}",
                        c.grid_h,
                        c.grid_w,
                        layout.patch_rows(),
                        layout.patch_cols()
                    ));
                }
                c.lookup(id)
            }
        }
    }
}

/// Computes tokens for every image of `splits` with `teacher` and writes them
/// to a cache file; returns the number of records.
pub fn extract_cache(
    teacher: &TeacherProvider,
    splits: &[&crate::data::LabeledImages],
    layout: &ClusterLayout,
    path: &Path,
) -> Result<usize> {
    if teacher.kind() == TeacherKind::Cache {
        return config_err("extracting a cache from a cache is a copy; point at the source teacher instead");
    }
    let mut entries = Vec::new();
    for split in splits {
        for (id, image) in split.ids.iter().zip(&split.images) {
            entries.push((*id, teacher.tokens(*id, image, layout)?));
        }
    }
    cache_write(path, &entries)?;
    Ok(entries.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use crate::model::{DiGptModel, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout8() -> ClusterLayout {
        ClusterLayout::new(8, 8, 4, 2, 2).unwrap()
    }

    #[test]
    fn pixel_tokens_standardise() {
        let mut img = Image::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let v = if x < 4 {
                    0.3
                } else {
                    ((x * 7 + y * 3) % 11) as f32 / 10.0
                };
                img.set(y, x, [v, v * 0.5, 1.0 - v]);
            }
        }
        for y in 0..4 {
            for x in 0..4 {
                img.set(y, x, [0.3, 0.3, 0.3]);
            }
        }
        let t = pixel_tokens(&img, &layout8()).unwrap();
        assert_eq!(t.dim(), 48);
        assert!(t.tokens.row(0).iter().all(|&v| v == 0.0));
        let r1 = t.tokens.row(1);
        assert!(r1.sum().abs() < 1e-4);
        assert!((r1.mapv(|v| v * v).sum() / 48.0 - 1.0).abs() < 1e-3);
        let big = ClusterLayout::new(32, 32, 16, 1, 1).unwrap();
        assert_eq!(pixel_tokens(&Image::new(32, 32), &big).unwrap().dim(), 768);
    }

    #[test]
    fn pixel_tokens_ignore_brightness_shift() {
        let ds = load_dataset("synthetic://shapes?train=1&test=1&noise=0.05", 8).unwrap();
        let img = &ds.train.images[0];
        let mut shifted = img.clone();
        shifted.data.iter_mut().for_each(|v| *v = *v * 0.5 + 0.25);
        let mut brighter = shifted.clone();
        brighter.data.iter_mut().for_each(|v| *v += 0.1);
        let a = pixel_tokens(&shifted, &layout8()).unwrap();
        let b = pixel_tokens(&brighter, &layout8()).unwrap();
        assert!((&a.tokens - &b.tokens).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn frozen_tokens_are_deterministic_and_checked() {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            decoder_depth: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            teacher_dim: 48,
        };
        let m = DiGptModel::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ds = load_dataset("synthetic://shapes?train=1&test=1", 8).unwrap();
        let img = &ds.train.images[0];
        let a = frozen_tokens(&m.encoder, img, &layout8()).unwrap();
        let b = frozen_tokens(&m.encoder, img, &layout8()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 8);
        let other = ClusterLayout::new(8, 8, 2, 2, 2).unwrap();
        assert!(frozen_tokens(&m.encoder, &Image::new(8, 8), &other).is_err());
    }

    fn sample_entries() -> Vec<(u64, TeacherTokens)> {
        (0..3u64)
            .map(|id| {
                let tokens =
                    Array2::from_shape_fn((4, 5), |(i, j)| (id as f32 + 1.0) * (i as f32 - j as f32 * 0.37).sin());
                (
                    id * 1000 + 7,
                    TeacherTokens {
                        grid_h: 2,
                        grid_w: 2,
                        tokens,
                        source: TeacherKind::Frozen,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn cache_roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let entries = sample_entries();
        cache_write(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DGPT");
        assert_eq!(bytes.len(), 4 + 4 + 1 + 2 + 2 + 4 + 8 + 3 * (8 + 4 * 5 * 4));
        let cache = cache_read(&path).unwrap();
        for (id, t) in &entries {
            let got = cache.lookup(*id).unwrap();
            let a: Vec<u32> = got.tokens.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.tokens.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let path2 = dir.path().join("t2.bin");
        let reread: Vec<(u64, TeacherTokens)> = entries
            .iter()
            .map(|(id, _)| (*id, cache.lookup(*id).unwrap()))
            .collect();
        cache_write(&path2, &reread).unwrap();
        assert_eq!(std::fs::read(&path2).unwrap(), bytes);
        assert!(matches!(cache.lookup(1), Err(Error::MissingKey(1))));
    }

    #[test]
    fn cache_rejects_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        cache_write(&path, &sample_entries()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(cache_read(&path), Err(Error::Format(_))));
        bytes[0] = b'D';
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(cache_read(&path), Err(Error::Format(_))));
        bytes[4] = 1;
        bytes.truncate(40);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(cache_read(&path), Err(Error::Format(_))));
        let mut mixed = sample_entries();
        mixed[1].1.tokens = Array2::zeros((4, 6));
        assert!(cache_write(&path, &mixed).is_err());
    }
}
