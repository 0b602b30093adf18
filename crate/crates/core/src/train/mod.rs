//! Pretraining loop: schedule, optimizer, checkpoints and metric logging.

pub mod checkpoint;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod trainer;

use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, TrainState};
pub use metrics::{read_metrics, MetricsLog, MetricsRecord};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{lr_at, peak_lr};
pub use trainer::{run_pretraining, train_step, PretrainOutcome, StepContext, Trainer};

use crate::cluster::ClusterLayout;
use crate::config::Config;
use crate::data::Augmentation;
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::teacher::{cache_read, TeacherKind, TeacherProvider};

/// Typed view of the pretraining keys of a [`Config`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_root: String,
    /// `teacher_dim` is filled in from the teacher when the run starts.
    pub model: ModelConfig,
    pub cluster_rows: usize,
    pub cluster_cols: usize,
    pub augmentation: Augmentation,
    pub objective: ObjectiveConfig,
    pub teacher_kind: TeacherKind,
    pub teacher_path: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub adam: AdamWConfig,
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub threads: usize,
    pub config_text: String,
    pub config_hash: String,
}

impl TrainConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let model = ModelConfig {
            image_size: cfg.usize("data.image_size")?,
            patch_size: cfg.usize("data.patch_size")?,
            depth: cfg.usize("model.depth")?,
            dim: cfg.usize("model.dim")?,
            heads: cfg.usize("model.heads")?,
            mlp_ratio: cfg.float("model.mlp_ratio")?,
            decoder_depth: cfg.usize("decoder.depth")?,
            decoder_dim: cfg.usize("decoder.dim")?,
            decoder_heads: cfg.usize("decoder.heads")?,
            teacher_dim: cfg.usize("data.patch_size")?.pow(2) * crate::model::CHANNELS,
        };
        model.validate()?;
        let objective = ObjectiveConfig {
            paradigm: cfg.parsed("paradigm")?,
            gen: cfg.flag("loss.gen")?,
            dis_mode: cfg.parsed("loss.dis_mode")?,
            lambda_dis: cfg.float("loss.lambda_dis")?,
            fd: cfg.flag("loss.fd")?,
            mim_mask_ratio: cfg.float("mim.mask_ratio")?,
        };
        objective.validate()?;
        let resume = cfg.string("train.resume");
        Ok(Self {
            seed: cfg.int("seed")? as u64,
            data_root: cfg.string("data.root").to_string(),
            model,
            cluster_rows: cfg.usize("clusters.rows")?,
            cluster_cols: cfg.usize("clusters.cols")?,
            augmentation: Augmentation {
                enabled: cfg.flag("data.augment")?,
                crop_min_scale: cfg.float("data.crop_min_scale")?,
                flip_prob: cfg.float("data.flip_prob")?,
            },
            objective,
            teacher_kind: cfg.parsed("teacher.kind")?,
            teacher_path: cfg.string("teacher.path").to_string(),
            batch_size: cfg.usize("train.batch_size")?,
            epochs: cfg.usize("train.epochs")?,
            warmup_epochs: cfg.usize("train.warmup_epochs")?,
            base_lr: cfg.float("train.base_lr")?,
            min_lr: cfg.float("train.min_lr")?,
            adam: AdamWConfig {
                beta1: cfg.float("train.beta1")?,
                beta2: cfg.float("train.beta2")?,
                eps: 1e-8,
                weight_decay: cfg.float("train.weight_decay")?,
            },
            checkpoint_every: cfg.usize("train.checkpoint_every")? as u64,
            out_dir: PathBuf::from(cfg.string("train.out_dir")),
            resume: (!resume.is_empty()).then(|| PathBuf::from(resume)),
            threads: cfg.usize("runtime.threads")?,
            config_text: cfg.render(),
            config_hash: cfg.hash(),
        })
    }

    pub fn layout(&self) -> Result<ClusterLayout> {
        ClusterLayout::new(
            self.model.image_size,
            self.model.image_size,
            self.model.patch_size,
            self.cluster_rows,
            self.cluster_cols,
        )
    }

    pub fn peak_lr(&self) -> f64 {
        peak_lr(self.base_lr, self.batch_size)
    }
}

/// Named recipes kept for reference; desk-scale defaults live in the registry.
///
/// * `in1k`: 300 epochs, 40 warmup, batch 4096, base lr 1.5e-4 (peak 2.4e-3).
/// * `in21k`: 150 epochs, 5 warmup, batch 4096, peak 1.5e-3.
pub fn preset(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    match name {
        "in1k" => Ok(&[
            ("train.epochs", "300"),
            ("train.warmup_epochs", "40"),
            ("train.batch_size", "4096"),
            ("train.base_lr", "1.5e-4"),
            ("train.weight_decay", "0.05"),
            ("data.image_size", "224"),
            ("data.patch_size", "16"),
        ]),
        "in21k" => Ok(&[
            ("train.epochs", "150"),
            ("train.warmup_epochs", "5"),
            ("train.batch_size", "4096"),
            ("train.base_lr", "9.375e-5"),
            ("train.weight_decay", "0.05"),
            ("data.image_size", "224"),
            ("data.patch_size", "16"),
        ]),
        other => config_err(format!("unknown preset `{other}` (in1k|in21k)")),
    }
}

/// Applies a named preset as overrides.
pub fn apply_preset(cfg: &mut Config, name: &str) -> Result<()> {
    for (k, v) in preset(name)? {
        cfg.apply_override(&format!("{k}={v}"))?;
    }
    Ok(())
}

/// Builds the teacher named by `kind`/`path`. Frozen teachers are the
/// encoder of a checkpoint file.
pub fn load_teacher(kind: TeacherKind, path: &str) -> Result<TeacherProvider> {
    match kind {
        TeacherKind::Pixel => Ok(TeacherProvider::Pixel),
        TeacherKind::Frozen => {
            let ck = checkpoint_load(Path::new(path))?;
            Ok(TeacherProvider::Frozen(Arc::new(ck.state.model.encoder)))
        }
        TeacherKind::Cache => Ok(TeacherProvider::Cache(Arc::new(cache_read(Path::new(path))?))),
    }
}
