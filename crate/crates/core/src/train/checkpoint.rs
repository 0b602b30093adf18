//! Versioned training checkpoints.
//!
//! ```text
//! magic "DGCK" | version u32 | header_len u64 | JSON header
//! | params f32[] | adam m f32[] | adam v f32[]      (little-endian, header tensor order)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{at_path, Error, Result};
use crate::model::{DiGptModel, ModelConfig};
use crate::nn::Params;
use crate::train::optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: DiGptModel<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: DiGptModel<f32>, adam: AdamWConfig, seed: u64) -> Self {
        let optimizer = AdamW::new(&model, adam);
        Self {
            step: 0,
            model,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: String,
    config_hash: String,
    model: ModelConfig,
    step: u64,
    adam: AdamWConfig,
    adam_steps: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint: the state plus the config snapshot it was written with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config_text: String,
    pub config_hash: String,
}

pub fn checkpoint_save(state: &TrainState, config_text: &str, config_hash: &str, path: &Path) -> Result<()> {
    let named = state.model.named();
    let header = Header {
        config: config_text.to_string(),
        config_hash: config_hash.to_string(),
        model: state.model.config.clone(),
        step: state.step,
        adam: state.optimizer.config,
        adam_steps: state.optimizer.steps,
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        tensors: named
            .iter()
            .map(|(name, s)| TensorEntry {
                name: name.clone(),
                len: s.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(at_path(&tmp, File::create(&tmp))?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for (_, s) in &named {
            write_f32s(&mut w, s)?;
        }
        for buf in state.optimizer.m.iter().chain(&state.optimizer.v) {
            write_f32s(&mut w, buf)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for &v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, out: &mut [f32], name: &str) -> Result<()> {
    r.read_f32_into::<LittleEndian>(out)
        .map_err(|e| Error::Format(format!("checkpoint truncated in tensor {name}: {e}")))
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(at_path(path, File::open(path))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: too short for a checkpoint", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.read_u64::<LittleEndian>()?;
    if len > 1 << 30 {
        return Err(Error::Format(format!("checkpoint header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("checkpoint header truncated".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = DiGptModel::<f32>::init(&header.model, &mut init_rng)?;
    let mut optimizer = AdamW::new(&model, header.adam);
    optimizer.steps = header.adam_steps;
    {
        let mut named = model.named_mut();
        if named.len() != header.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} tensors, model has {}",
                header.tensors.len(),
                named.len()
            )));
        }
        for ((name, slot), entry) in named.iter_mut().zip(&header.tensors) {
            if *name != entry.name || slot.len() != entry.len {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} ({}) does not match model tensor {} ({})",
                    entry.name,
                    entry.len,
                    name,
                    slot.len()
                )));
            }
            read_f32s(&mut r, slot, name)?;
        }
    }
    for (i, entry) in header.tensors.iter().enumerate() {
        read_f32s(&mut r, &mut optimizer.m[i], &entry.name)?;
    }
    for (i, entry) in header.tensors.iter().enumerate() {
        read_f32s(&mut r, &mut optimizer.v[i], &entry.name)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            rest.len()
        )));
    }

    let seed: [u8; 32] = header
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format("checkpoint rng seed must be 32 bytes".into()))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Format("checkpoint rng position is not an integer".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        state: TrainState {
            step: header.step,
            model,
            optimizer,
            rng,
        },
        config_text: header.config,
        config_hash: header.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn state() -> TrainState {
        let model = DiGptModel::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut s = TrainState::new(model, AdamWConfig::default(), 9);
        s.step = 17;
        s.optimizer.steps = 17;
        s.optimizer.m[0][0] = 0.5;
        s.optimizer.v[1][0] = 0.25;
        let _: u64 = s.rng.random();
        s
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut s = state();
        checkpoint_save(&s, "seed = 0\n", "abc", &path).unwrap();
        let mut back = checkpoint_load(&path).unwrap();
        assert_eq!(back.config_text, "seed = 0\n");
        assert_eq!(back.config_hash, "abc");
        assert_eq!(back.state, s);
        // rng continues from the same point
        let a: [u64; 4] = s.rng.random();
        let b: [u64; 4] = back.state.rng.random();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        checkpoint_save(&state(), "", "", &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(checkpoint_load(&path), Err(Error::Format(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        std::fs::write(&path, &bad).unwrap();
        let err = checkpoint_load(&path).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");

        let mut bad = good.clone();
        bad[17] = b'#';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(checkpoint_load(&path), Err(Error::Format(_))));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(checkpoint_load(&path), Err(Error::Format(_))));

        let mut long = good.clone();
        long.push(0);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(checkpoint_load(&path), Err(Error::Format(_))));
    }
}
