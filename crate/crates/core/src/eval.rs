//! Linear probing and fine-tuning on pooled encoder features.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::data::{Dataset, LabeledImages};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{downstream_features, downstream_features_backward, downstream_features_with_cache, Encoder};
use crate::nn::{join, Linear, Params};
use crate::train::{lr_at, AdamW, AdamWConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    Probe,
    Finetune,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Probe => "probe",
            Self::Finetune => "finetune",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probe" => Ok(Self::Probe),
            "finetune" => Ok(Self::Finetune),
            other => config_err(format!("unknown protocol `{other}` (probe|finetune)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `correct / total` on the held-out split.
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    pub dataset: String,
    pub protocol: Protocol,
    pub config_hash: String,
}

impl EvalResult {
    fn new(correct: usize, total: usize, dataset: &str, protocol: Protocol, config_hash: &str) -> Self {
        Self {
            top1: correct as f64 / total as f64,
            correct,
            total,
            dataset: dataset.to_string(),
            protocol,
            config_hash: config_hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            epochs: cfg.usize("probe.epochs")?,
            lr: cfg.float("probe.lr")?,
            batch_size: cfg.usize("probe.batch_size")?,
            weight_decay: cfg.float("probe.weight_decay")?,
            seed: cfg.int("seed")? as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(Self {
            epochs: cfg.usize("finetune.epochs")?,
            lr: cfg.float("finetune.lr")?,
            batch_size: cfg.usize("finetune.batch_size")?,
            weight_decay: cfg.float("finetune.weight_decay")?,
            warmup_epochs: cfg.usize("finetune.warmup_epochs")?,
            seed: cfg.int("seed")? as u64,
        })
    }
}

/// SHA-256 over every encoder tensor (names and little-endian values).
pub fn encoder_checksum(encoder: &Encoder<f32>) -> String {
    let mut h = Sha256::new();
    for (name, values) in encoder.named() {
        h.update(name.as_bytes());
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Pooled features, one row per image.
pub fn extract_features(encoder: &Encoder<f32>, images: &LabeledImages, patch_size: usize) -> Result<Array2<f32>> {
    let rows: Vec<Result<Array1<f32>>> = images
        .images
        .par_iter()
        .map(|img| downstream_features(encoder, &img.patchify::<f32>(patch_size)?))
        .collect();
    let mut out = Array2::zeros((images.len(), encoder.dim()));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r?);
    }
    Ok(out)
}

/// Row-wise softmax cross-entropy: mean loss and `dlogits` for the mean.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let b = logits.nrows();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0f64;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[labels[i]] / sum).ln();
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum - if j == labels[i] { 1.0 } else { 0.0 };
            grad[[i, j]] = (p / b as f64) as f32;
        }
    }
    (loss / b as f64, grad)
}

/// Per-row argmax compared with `labels`; ties resolve to the lowest index.
pub fn count_correct(logits: &Array2<f32>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count()
}

fn argmax(values: impl Iterator<Item = f32>) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn check_split(data: &LabeledImages, num_classes: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset(format!("{what} split is empty")));
    }
    if let Some(&y) = data.labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Dataset(format!(
            "{what} label {y} outside {num_classes} classes"
        )));
    }
    Ok(())
}

fn standardize(train: &mut Array2<f32>, test: &mut Array2<f32>) {
    let mean = train.mean_axis(Axis(0)).expect("non-empty");
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-6));
    for x in [train, test] {
        *x -= &mean;
        *x /= &std;
    }
}

/// Trains a linear classifier on fixed feature rows with AdamW and a
/// cosine schedule.
pub fn train_linear_classifier(
    x: &Array2<f32>,
    y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<Linear<f32>> {
    if x.nrows() != y.len() {
        return shape_err(format!("{} feature rows, {} labels", x.nrows(), y.len()));
    }
    if cfg.batch_size == 0 {
        return config_err("probe.batch_size: must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head: Linear<f32> = Linear::new(&mut rng, x.ncols(), num_classes, true);
    let mut opt = AdamW::new(
        &head,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            beta2: 0.999,
            ..Default::default()
        },
    );
    let spe = x.nrows().div_ceil(cfg.batch_size) as u64;
    let total = spe * cfg.epochs as u64;
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let (_, dlogits) = softmax_cross_entropy(&head.forward(&xb), &yb);
            let mut grad = head.zeroed();
            head.backward(&xb, &dlogits, &mut grad);
            let lr = lr_at(step, total, 0, cfg.lr, 0.0)?;
            opt.step(&mut head, &grad, lr);
            step += 1;
        }
    }
    Ok(head)
}

/// Frozen-encoder linear probe: standardised pooled features, one linear
/// layer. Fails if the encoder changes while probing.
pub fn linear_probe(
    encoder: &Encoder<f32>,
    dataset: &Dataset,
    patch_size: usize,
    cfg: &ProbeConfig,
    dataset_id: &str,
    config_hash: &str,
) -> Result<EvalResult> {
    check_split(&dataset.train, dataset.num_classes, "train")?;
    check_split(&dataset.test, dataset.num_classes, "test")?;
    let before = encoder_checksum(encoder);
    let mut xtr = extract_features(encoder, &dataset.train, patch_size)?;
    let mut xte = extract_features(encoder, &dataset.test, patch_size)?;
    standardize(&mut xtr, &mut xte);
    let head = train_linear_classifier(&xtr, &dataset.train.labels, dataset.num_classes, cfg)?;
    let correct = count_correct(&head.forward(&xte), &dataset.test.labels);
    if encoder_checksum(encoder) != before {
        return Err(Error::Shape("encoder parameters changed during probing".into()));
    }
    Ok(EvalResult::new(
        correct,
        dataset.test.len(),
        dataset_id,
        Protocol::Probe,
        config_hash,
    ))
}

/// Encoder plus linear head, both trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: Encoder<f32>,
    pub head: Linear<f32>,
}

impl Params<f32> for Classifier {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f32])>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f32])>) {
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

impl Classifier {
    pub fn logits(&self, images: &LabeledImages, patch_size: usize) -> Result<Array2<f32>> {
        Ok(self.head.forward(&extract_features(&self.encoder, images, patch_size)?))
    }

    fn chunk_gradient(
        &self,
        data: &LabeledImages,
        idx: &[usize],
        patch_size: usize,
        batch: usize,
    ) -> Result<Classifier> {
        let mut grad = self.zeroed();
        for &i in idx {
            let patches = data.images[i].patchify::<f32>(patch_size)?;
            let (feat, cache) = downstream_features_with_cache(&self.encoder, &patches)?;
            let x = feat.insert_axis(Axis(0));
            let (_, mut dlogits) = softmax_cross_entropy(&self.head.forward(&x), &[data.labels[i]]);
            dlogits /= batch as f32;
            let dx = self.head.backward(&x, &dlogits, &mut grad.head);
            downstream_features_backward(&self.encoder, &cache, &dx.row(0).to_owned(), &mut grad.encoder);
        }
        Ok(grad)
    }
}

/// Full fine-tuning of `encoder` with a fresh linear head. Zero epochs
/// evaluates the untrained head.
pub fn finetune(
    encoder: &Encoder<f32>,
    dataset: &Dataset,
    patch_size: usize,
    cfg: &FinetuneConfig,
    dataset_id: &str,
    config_hash: &str,
) -> Result<(EvalResult, Classifier)> {
    check_split(&dataset.train, dataset.num_classes, "train")?;
    check_split(&dataset.test, dataset.num_classes, "test")?;
    if cfg.batch_size == 0 {
        return config_err("finetune.batch_size: must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Classifier {
        encoder: encoder.clone(),
        head: Linear::new(&mut rng, encoder.dim(), dataset.num_classes, true),
    };
    let mut opt = AdamW::new(
        &model,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            beta2: 0.999,
            ..Default::default()
        },
    );
    let n = dataset.train.len();
    let spe = n.div_ceil(cfg.batch_size) as u64;
    let total = spe * cfg.epochs as u64;
    let warmup = if cfg.epochs > 0 {
        spe * cfg.warmup_epochs.min(cfg.epochs - 1) as u64
    } else {
        0
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<Result<Classifier>> = batch
                .par_chunks(4)
                .map(|c| model.chunk_gradient(&dataset.train, c, patch_size, batch.len()))
                .collect();
            let mut grad = model.zeroed();
            for p in parts {
                grad.accumulate(&p?);
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("finetune step {step}: non-finite gradient")));
            }
            let lr = lr_at(step, total, warmup, cfg.lr, 0.0)?;
            opt.step(&mut model, &grad, lr);
            step += 1;
        }
    }
    let correct = count_correct(&model.logits(&dataset.test, patch_size)?, &dataset.test.labels);
    Ok((
        EvalResult::new(correct, dataset.test.len(), dataset_id, Protocol::Finetune, config_hash),
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_dataset;
    use crate::model::{DiGptModel, ModelConfig};
    use ndarray::array;

    fn tiny_encoder(seed: u64) -> Encoder<f32> {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            dim: 16,
            heads: 2,
            mlp_ratio: 2.0,
            decoder_depth: 1,
            decoder_dim: 16,
            decoder_heads: 2,
            teacher_dim: 48,
        };
        DiGptModel::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .encoder
    }

    fn probe_cfg() -> ProbeConfig {
        ProbeConfig {
            epochs: 30,
            lr: 1e-2,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn accuracy_matches_brute_force_recount() {
        let logits = array![[0.1f32, 0.9, 0.0], [2.0, 1.0, 1.0], [0.0, 0.0, 3.0], [1.0, 1.0, 0.0]];
        let labels = [1, 1, 2, 0];
        assert_eq!(count_correct(&logits, &labels), 3);
        let r = EvalResult::new(3, 4, "x", Protocol::Probe, "");
        assert_eq!(r.top1, 0.75);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = array![[1.0f32, 2.0, 0.5], [0.0, -1.0, 3.0]];
        let labels = [1, 0];
        let (loss, g) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-3;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let num =
                    (softmax_cross_entropy(&p, &labels).0 - softmax_cross_entropy(&m, &labels).0) / (2.0 * h as f64);
                assert!((num - g[[i, j]] as f64).abs() < 1e-3, "{num} vs {}", g[[i, j]]);
            }
        }
        assert!(loss > 0.0);
    }

    #[test]
    fn probe_separates_mean_color_with_random_encoder() {
        let ds = load_dataset("synthetic://color?train=64&test=64&classes=2&seed=3", 8).unwrap();
        let enc = tiny_encoder(1);
        let before = encoder_checksum(&enc);
        let r = linear_probe(&enc, &ds, 4, &probe_cfg(), "color", "").unwrap();
        assert!(r.top1 >= 0.9, "{r:?}");
        assert_eq!(encoder_checksum(&enc), before);
        assert_eq!(r.protocol, Protocol::Probe);
        assert_eq!(r.total, 64);
    }

    #[test]
    fn permuted_labels_give_chance() {
        let mut ds = load_dataset("synthetic://shapes?train=256&test=1000&seed=4", 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        ds.train.labels.shuffle(&mut rng);
        ds.test.labels.shuffle(&mut rng);
        let r = linear_probe(&tiny_encoder(2), &ds, 4, &probe_cfg(), "shapes", "").unwrap();
        let chance = 1.0 / ds.num_classes as f64;
        assert!((r.top1 - chance).abs() <= 0.05, "{r:?}");
    }

    #[test]
    fn finetune_reaches_probe_level_on_sanity_set() {
        let ds = load_dataset("synthetic://color?train=64&test=64&classes=2&seed=5", 8).unwrap();
        let enc = tiny_encoder(3);
        let probe = linear_probe(&enc, &ds, 4, &probe_cfg(), "color", "").unwrap();
        let cfg = FinetuneConfig {
            epochs: 6,
            lr: 3e-3,
            batch_size: 16,
            weight_decay: 0.05,
            warmup_epochs: 1,
            seed: 0,
        };
        let (ft, model) = finetune(&enc, &ds, 4, &cfg, "color", "").unwrap();
        assert_eq!(ft.protocol, Protocol::Finetune);
        assert!(ft.top1 >= probe.top1, "finetune {} < probe {}", ft.top1, probe.top1);
        assert_ne!(model.encoder, enc);
    }

    #[test]
    fn zero_epoch_finetune_is_untrained() {
        let ds = load_dataset("synthetic://color?train=16&test=300&classes=3&seed=6", 8).unwrap();
        let enc = tiny_encoder(4);
        let mut mean = 0.0;
        for seed in 0..12 {
            let cfg = FinetuneConfig {
                epochs: 0,
                lr: 1e-3,
                batch_size: 8,
                weight_decay: 0.0,
                warmup_epochs: 0,
                seed,
            };
            let (r, model) = finetune(&enc, &ds, 4, &cfg, "color", "").unwrap();
            assert_eq!(model.encoder, enc);
            mean += r.top1 / 12.0;
        }
        // a random head is right by luck on average only
        assert!((mean - 1.0 / 3.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn empty_splits_are_errors() {
        let mut ds = load_dataset("synthetic://color?train=8&test=8&classes=2&seed=0", 8).unwrap();
        ds.test = LabeledImages::default();
        assert!(matches!(
            linear_probe(&tiny_encoder(0), &ds, 4, &probe_cfg(), "", ""),
            Err(Error::Dataset(_))
        ));
    }
}
