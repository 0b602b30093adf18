use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::{sample_permutation, ClusterLayout};
use crate::data::{load_dataset, Augmentation, Image, LabeledImages};
use crate::error::{config_err, Error, Result};
use crate::model::DiGptModel;
use crate::nn::Params;
use crate::objective::{sample_hidden_clusters, sample_loss, LossReport, ObjectiveConfig, Paradigm, SampleInput};
use crate::teacher::{TeacherKind, TeacherProvider};
use crate::train::checkpoint::{checkpoint_load, checkpoint_save, TrainState};
use crate::train::metrics::{MetricsLog, MetricsRecord};
use crate::train::schedule::lr_at;
use crate::train::{load_teacher, TrainConfig};

/// Samples per gradient partial sum. Fixed so the reduction order, and
/// therefore every bit of the result, is independent of the thread count.
const GRAD_CHUNK: usize = 4;

/// Everything a step needs besides the mutable state.
pub struct StepContext<'a> {
    pub layout: &'a ClusterLayout,
    pub objective: &'a ObjectiveConfig,
    pub augmentation: Augmentation,
    pub teacher: &'a TeacherProvider,
}

/// Batch-mean loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_total: f64,
    pub loss_gen: f64,
    pub loss_dis: f64,
    pub loss_fd: f64,
}

struct Partial {
    grad: DiGptModel<f32>,
    total: f64,
    gen: (f64, usize),
    dis: (f64, usize),
    fd: (f64, usize),
}

fn sample_partial(model: &DiGptModel<f32>, ctx: &StepContext<'_>, items: &[(u64, &Image, u64)]) -> Result<Partial> {
    let mut p = Partial {
        grad: model.zeroed(),
        total: 0.0,
        gen: (0.0, 0),
        dis: (0.0, 0),
        fd: (0.0, 0),
    };
    let n = ctx.layout.num_clusters();
    for &(id, image, seed) in items {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view = ctx.augmentation.apply(image, &mut rng);
        let tokens = ctx.teacher.tokens(id, &view, ctx.layout)?;
        let perm = sample_permutation(n, &mut rng)?;
        let hidden = if ctx.objective.paradigm == Paradigm::Mim {
            sample_hidden_clusters(n, ctx.objective.mim_mask_ratio, &mut rng)?
        } else {
            Vec::new()
        };
        let patches = view.patchify::<f32>(ctx.layout.patch_size)?;
        let input = SampleInput {
            patches: &patches,
            teacher: &tokens.tokens,
            perm: &perm,
            hidden_clusters: &hidden,
        };
        let r = sample_loss(model, ctx.layout, ctx.objective, &input, Some(&mut p.grad))?;
        p.total += r.loss_total;
        add_term(&mut p.gen, r.gen_defined, r.loss_gen);
        add_term(&mut p.dis, r.dis_defined, r.loss_dis);
        add_term(&mut p.fd, r.fd_defined, r.loss_fd);
    }
    Ok(p)
}

fn add_term(acc: &mut (f64, usize), defined: bool, value: f64) {
    if defined {
        acc.0 += value;
        acc.1 += 1;
    }
}

fn mean_term(acc: (f64, usize)) -> f64 {
    if acc.1 == 0 {
        0.0
    } else {
        acc.0 / acc.1 as f64
    }
}

/// One optimizer step on `batch` (pairs of image id and image): exact
/// gradient of the batch-mean `loss_total`, then AdamW at `lr`.
///
/// Per-sample randomness (augmentation, permutation, hidden clusters) is
/// drawn from a seed taken off the state rng, so the step is a pure
/// function of the state and the batch.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(u64, &Image)],
    ctx: &StepContext<'_>,
    lr: f64,
    epoch: u64,
) -> Result<(MetricsRecord, StepLosses)> {
    if batch.is_empty() {
        return config_err("train_step needs a non-empty batch");
    }
    let start = Instant::now();
    let items: Vec<(u64, &Image, u64)> = batch
        .iter()
        .map(|&(id, img)| (id, img, state.rng.random::<u64>()))
        .collect();
    let model = &state.model;
    let partials: Vec<Result<Partial>> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| sample_partial(model, ctx, chunk))
        .collect();

    let mut grad = state.model.zeroed();
    let (mut total, mut gen, mut dis, mut fd) = (0.0, (0.0, 0), (0.0, 0), (0.0, 0));
    for p in partials {
        let p = p?;
        grad.accumulate(&p.grad);
        total += p.total;
        for (acc, part) in [(&mut gen, p.gen), (&mut dis, p.dis), (&mut fd, p.fd)] {
            acc.0 += part.0;
            acc.1 += part.1;
        }
    }
    let b = batch.len() as f64;
    grad.scale(1.0 / b as f32);
    let losses = StepLosses {
        loss_total: total / b,
        loss_gen: mean_term(gen),
        loss_dis: mean_term(dis),
        loss_fd: mean_term(fd),
    };
    if !losses.loss_total.is_finite() || !grad.all_finite() {
        return Err(Error::NonFinite(format!(
            "step {} (epoch {epoch}, lr {lr:e}): loss_total={} loss_gen={} loss_dis={}, gradient finite: {}",
            state.step + 1,
            losses.loss_total,
            losses.loss_gen,
            losses.loss_dis,
            grad.all_finite()
        )));
    }
    state.optimizer.step(&mut state.model, &grad, lr);
    if !state.model.all_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: parameters became non-finite",
            state.step + 1
        )));
    }
    state.step += 1;
    let record = MetricsRecord {
        step: state.step,
        epoch,
        loss_total: losses.loss_total,
        loss_gen: losses.loss_gen,
        loss_dis: losses.loss_dis,
        lr,
        time_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((record, losses))
}

/// In-memory training driver: owns the state and derives data order and
/// learning rate from the step counter alone.
pub struct Trainer {
    pub config: TrainConfig,
    pub layout: ClusterLayout,
    pub teacher: TeacherProvider,
    pub data: LabeledImages,
    pub state: TrainState,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    /// Fresh state initialised from `config.seed`.
    pub fn new(config: TrainConfig, data: LabeledImages, teacher: TeacherProvider) -> Result<Self> {
        let layout = config.layout()?;
        let mut model_cfg = config.model.clone();
        model_cfg.teacher_dim = teacher.dim(&layout);
        let model = DiGptModel::init(&model_cfg, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let state = TrainState::new(model, config.adam, config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Self::with_state(config, data, teacher, state)
    }

    pub fn with_state(
        config: TrainConfig,
        data: LabeledImages,
        teacher: TeacherProvider,
        state: TrainState,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        if teacher.kind() == TeacherKind::Cache && config.augmentation.enabled {
            return config_err("teacher.kind: cache targets require data.augment=off");
        }
        if config.batch_size == 0 {
            return config_err("train.batch_size: must be at least 1");
        }
        if config.epochs > 0 && config.warmup_epochs >= config.epochs {
            return config_err(format!(
                "train.warmup_epochs={} must be smaller than train.epochs={}",
                config.warmup_epochs, config.epochs
            ));
        }
        let layout = config.layout()?;
        let td = teacher.dim(&layout);
        if state.model.config.teacher_dim != td {
            return config_err(format!(
                "teacher tokens have dim {td}, the model predicts {}",
                state.model.config.teacher_dim
            ));
        }
        let mut expect = config.model.clone();
        expect.teacher_dim = td;
        if state.model.config != expect {
            return config_err("checkpoint model shape differs from the configured model");
        }
        let pool = if config.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("runtime.threads: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            config,
            layout,
            teacher,
            data,
            state,
            pool,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.warmup_epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// Image indices of the batch for 0-based `step`: a per-epoch shuffle
    /// keyed on (seed, epoch), cut into consecutive batches; the last batch
    /// of an epoch may be short.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (step / spe, (step % spe) as usize);
        let order = epoch_order(self.data.len(), self.config.seed, epoch);
        let b = self.config.batch_size;
        let end = ((within + 1) * b).min(order.len());
        order[within * b..end].to_vec()
    }

    /// Runs the next step.
    pub fn step(&mut self) -> Result<(MetricsRecord, StepLosses)> {
        if self.is_done() {
            return config_err(format!("schedule of {} steps already complete", self.total_steps()));
        }
        let step = self.state.step;
        let epoch = step / self.steps_per_epoch();
        let lr = lr_at(
            step,
            self.total_steps(),
            self.warmup_steps(),
            self.config.peak_lr(),
            self.config.min_lr,
        )?;
        let idx = self.batch_indices(step);
        let batch: Vec<(u64, &Image)> = idx.iter().map(|&i| (self.data.ids[i], &self.data.images[i])).collect();
        let ctx = StepContext {
            layout: &self.layout,
            objective: &self.config.objective,
            augmentation: self.config.augmentation,
            teacher: &self.teacher,
        };
        let state = &mut self.state;
        match &self.pool {
            Some(pool) => pool.install(|| train_step(state, &batch, &ctx, lr, epoch)),
            None => train_step(state, &batch, &ctx, lr, epoch),
        }
    }

    /// Runs up to `max_steps` further steps (or to the end of the schedule),
    /// calling `on_step` after each.
    pub fn run<C>(&mut self, max_steps: Option<u64>, mut on_step: C) -> Result<Option<StepLosses>>
    where
        C: FnMut(&Self, &MetricsRecord) -> Result<()>,
    {
        let mut last = None;
        let mut done = 0;
        while !self.is_done() && max_steps.is_none_or(|m| done < m) {
            let (record, losses) = self.step()?;
            on_step(self, &record)?;
            last = Some(losses);
            done += 1;
        }
        Ok(last)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Artifacts of a finished pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: u64,
    pub last: Option<StepLosses>,
    pub model: DiGptModel<f32>,
}

/// Loads data and teacher, trains to the end of the schedule, writing
/// `metrics.jsonl`, `config.txt`, periodic `checkpoint-<step>.bin` and
/// `final.bin` under the output directory. A non-finite step writes
/// `diverged.json` before returning the error.
pub fn run_pretraining(config: &TrainConfig) -> Result<PretrainOutcome> {
    let dataset = load_dataset(&config.data_root, config.model.image_size)?;
    if config.teacher_kind == TeacherKind::Cache && config.augmentation.enabled {
        return config_err("teacher.kind: cache targets require data.augment=off");
    }
    let teacher = load_teacher(config.teacher_kind, &config.teacher_path)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), &config.config_text)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut trainer = match &config.resume {
        Some(path) => {
            let ck = checkpoint_load(path)?;
            Trainer::with_state(config.clone(), dataset.train, teacher, ck.state)?
        }
        None => {
            if metrics_path.exists() {
                std::fs::remove_file(&metrics_path)?;
            }
            Trainer::new(config.clone(), dataset.train, teacher)?
        }
    };
    let mut log = MetricsLog::open(&metrics_path)?;
    let every = config.checkpoint_every;
    let result = trainer.run(None, |t, record| {
        log.append(record)?;
        log::info!(
            "step {} epoch {} loss {:.5} (gen {:.5}, dis {:.5}) lr {:.3e}",
            record.step,
            record.epoch,
            record.loss_total,
            record.loss_gen,
            record.loss_dis,
            record.lr
        );
        if every > 0 && record.step % every == 0 {
            let path = out.join(format!("checkpoint-{}.bin", record.step));
            checkpoint_save(&t.state, &config.config_text, &config.config_hash, &path)?;
        }
        Ok(())
    });
    let last = match result {
        Ok(last) => last,
        Err(e) => {
            if let Error::NonFinite(msg) = &e {
                let diag = serde_json::json!({
                    "step": trainer.state.step + 1,
                    "error": msg,
                    "config_hash": config.config_hash,
                });
                std::fs::write(out.join("diverged.json"), diag.to_string())?;
            }
            return Err(e);
        }
    };
    let final_checkpoint = out.join("final.bin");
    checkpoint_save(
        &trainer.state,
        &config.config_text,
        &config.config_hash,
        &final_checkpoint,
    )?;
    Ok(PretrainOutcome {
        final_checkpoint,
        metrics_path,
        steps: trainer.state.step,
        last,
        model: trainer.state.model,
    })
}

/// Mean of per-sample losses on fixed views, for evaluation and tests.
pub fn mean_loss(
    model: &DiGptModel<f32>,
    ctx: &StepContext<'_>,
    batch: &[(u64, &Image)],
    seed: u64,
) -> Result<LossReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ctx.layout.num_clusters();
    let mut acc: Option<LossReport> = None;
    for &(id, image) in batch {
        let tokens = ctx.teacher.tokens(id, image, ctx.layout)?;
        let perm = sample_permutation(n, &mut rng)?;
        let hidden = if ctx.objective.paradigm == Paradigm::Mim {
            sample_hidden_clusters(n, ctx.objective.mim_mask_ratio, &mut rng)?
        } else {
            Vec::new()
        };
        let patches: Array2<f32> = image.patchify(ctx.layout.patch_size)?;
        let input = SampleInput {
            patches: &patches,
            teacher: &tokens.tokens,
            perm: &perm,
            hidden_clusters: &hidden,
        };
        let r = sample_loss(model, ctx.layout, ctx.objective, &input, None)?;
        acc = Some(match acc {
            None => r,
            Some(mut a) => {
                a.loss_total += r.loss_total;
                a.loss_gen += r.loss_gen;
                a.loss_dis += r.loss_dis;
                a.loss_fd += r.loss_fd;
                a
            }
        });
    }
    let mut a = acc.ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let b = batch.len() as f64;
    a.loss_total /= b;
    a.loss_gen /= b;
    a.loss_dis /= b;
    a.loss_fd /= b;
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::load_dataset;

    fn tiny_config(overrides: &[&str]) -> TrainConfig {
        let mut cfg = Config::defaults();
        for kv in [
            "data.root=synthetic://color?train=16&test=8&classes=2&seed=1",
            "data.image_size=8",
            "model.depth=1",
            "model.dim=8",
            "model.heads=2",
            "model.mlp_ratio=2",
            "decoder.depth=1",
            "decoder.dim=8",
            "decoder.heads=2",
            "train.batch_size=4",
            "train.epochs=2",
            "train.warmup_epochs=1",
            "train.base_lr=0.05",
        ]
        .iter()
        .chain(overrides)
        {
            cfg.apply_override(kv).unwrap();
        }
        TrainConfig::from_config(&cfg).unwrap()
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        let ds = load_dataset(&cfg.data_root, cfg.model.image_size).unwrap();
        Trainer::new(cfg, ds.train, TeacherProvider::Pixel).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t = trainer(tiny_config(&["train.batch_size=5"]));
        assert_eq!(t.steps_per_epoch(), 4);
        for epoch in 0..2 {
            let mut seen: Vec<usize> = (0..4).flat_map(|s| t.batch_indices(epoch * 4 + s)).collect();
            assert_eq!(t.batch_indices(epoch * 4 + 3).len(), 1);
            seen.sort_unstable();
            assert_eq!(seen, (0..16).collect::<Vec<_>>());
        }
        assert_ne!(t.batch_indices(0), t.batch_indices(4));
    }

    #[test]
    fn same_seed_is_bit_identical_and_resume_matches() {
        let mut a = trainer(tiny_config(&[]));
        let mut b = trainer(tiny_config(&[]));
        a.run(Some(5), |_, _| Ok(())).unwrap();
        b.run(Some(2), |_, _| Ok(())).unwrap();
        let mut c = Trainer::with_state(
            b.config.clone(),
            b.data.clone(),
            TeacherProvider::Pixel,
            b.state.clone(),
        )
        .unwrap();
        c.run(Some(3), |_, _| Ok(())).unwrap();
        assert_eq!(a.state, c.state);
        let mut d = trainer(tiny_config(&["seed=1"]));
        d.run(Some(5), |_, _| Ok(())).unwrap();
        assert_ne!(a.state.model, d.state.model);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut a = trainer(tiny_config(&["runtime.threads=1"]));
        let mut b = trainer(tiny_config(&["runtime.threads=3"]));
        a.run(Some(3), |_, _| Ok(())).unwrap();
        b.run(Some(3), |_, _| Ok(())).unwrap();
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let cfg = tiny_config(&["data.augment=off"]);
        let t = trainer(cfg);
        let layout = t.layout;
        let objective = t.config.objective.clone();
        let teacher = TeacherProvider::Pixel;
        let ctx = StepContext {
            layout: &layout,
            objective: &objective,
            augmentation: Augmentation::off(),
            teacher: &teacher,
        };
        let batch: Vec<(u64, &Image)> = (0..4).map(|i| (t.data.ids[i], &t.data.images[i])).collect();
        let mut state = t.state.clone();
        let before = mean_loss(&state.model, &ctx, &batch, 7).unwrap().loss_total;
        for _ in 0..50 {
            train_step(&mut state, &batch, &ctx, 5e-3, 0).unwrap();
        }
        let after = mean_loss(&state.model, &ctx, &batch, 7).unwrap().loss_total;
        assert!(after < before, "{before} -> {after}");
        assert_eq!(state.step, 50);
    }

    #[test]
    fn cache_teacher_with_augmentation_is_refused() {
        let cfg = tiny_config(&[]);
        let ds = load_dataset(&cfg.data_root, 8).unwrap();
        let cache = crate::teacher::FeatureCache::empty(2, 2, 48);
        let teacher = TeacherProvider::Cache(std::sync::Arc::new(cache));
        assert!(matches!(
            Trainer::new(cfg.clone(), ds.train.clone(), teacher.clone()),
            Err(Error::Config(_))
        ));
        let mut off = cfg;
        off.augmentation.enabled = false;
        assert!(Trainer::new(off, ds.train, teacher).is_ok());
    }

    #[test]
    fn stops_at_end_of_schedule() {
        let mut t = trainer(tiny_config(&[]));
        let mut records = Vec::new();
        t.run(None, |_, r| {
            records.push(*r);
            Ok(())
        })
        .unwrap();
        assert_eq!(records.len(), 8);
        assert_eq!(
            records.iter().map(|r| r.step).collect::<Vec<_>>(),
            (1..=8).collect::<Vec<_>>()
        );
        assert_eq!(records[0].lr, 0.0);
        assert_eq!(records[4].epoch, 1);
        assert!(t.step().is_err());
    }
}
