//! Cosine-similarity objectives and the per-image loss of each paradigm.
//!
//! Every term is the negative mean cosine similarity over its
//! (query entry, patch) pairs, so each lies in [-1, 1] regardless of the
//! cluster count. The total is `loss_gen + lambda * loss_dis + loss_fd`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterLayout, PermutedSequence};
use crate::error::{config_err, shape_err, Error, Result};
use crate::masking::{decoder_query_set, encoder_mask, query_attend_mask, AttentionMask, DisMode, QueryKind, QuerySet};
use crate::model::DiGptModel;
use crate::nn::Params;
use crate::scalar::Scalar;

pub const COSINE_EPS: f64 = 1e-8;

/// Pretraining paradigm compared in the paradigm ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Paradigm {
    /// Cluster autoregression with generative and discriminative decoders.
    DiGpt,
    /// Encoder output regressed directly onto teacher tokens.
    Fd,
    /// Hidden clusters predicted from the visible remainder.
    Mim,
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digpt" => Ok(Self::DiGpt),
            "fd" => Ok(Self::Fd),
            "mim" => Ok(Self::Mim),
            other => config_err(format!("unknown paradigm `{other}` (digpt|fd|mim)")),
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DiGpt => "digpt",
            Self::Fd => "fd",
            Self::Mim => "mim",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub paradigm: Paradigm,
    pub gen: bool,
    pub dis_mode: DisMode,
    pub lambda_dis: f64,
    /// Adds a feature-distillation term on the encoder output to `digpt`.
    pub fd: bool,
    pub mim_mask_ratio: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::DiGpt,
            gen: true,
            dis_mode: DisMode::Latest,
            lambda_dis: 1.0,
            fd: false,
            mim_mask_ratio: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dis.is_finite() && self.lambda_dis >= 0.0) {
            return config_err(format!("loss.lambda_dis={} must be >= 0", self.lambda_dis));
        }
        if self.paradigm == Paradigm::DiGpt && !self.gen && self.dis_mode == DisMode::Off && !self.fd {
            return config_err("loss.gen=off with loss.dis_mode=off leaves no objective");
        }
        if self.paradigm == Paradigm::Mim && !(self.mim_mask_ratio > 0.0 && self.mim_mask_ratio < 1.0) {
            return config_err(format!(
                "mim.mask_ratio={} must lie strictly between 0 and 1",
                self.mim_mask_ratio
            ));
        }
        Ok(())
    }
}

/// Cosine similarity of corresponding rows, with `eps` added to each norm.
pub fn cosine_rows<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Result<Array1<F>> {
    if a.dim() != b.dim() {
        return shape_err(format!("cosine of {:?} against {:?}", a.dim(), b.dim()));
    }
    let eps = F::of(COSINE_EPS);
    Ok(Zip::from(a.rows()).and(b.rows()).map_collect(|x, y| {
        let dot = x.dot(&y);
        let (nx, ny) = (x.dot(&x).sqrt(), y.dot(&y).sqrt());
        dot / ((nx + eps) * (ny + eps))
    }))
}

/// One loss term; `defined` is false when there was nothing to supervise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub value: f64,
    pub defined: bool,
    pub pairs: usize,
}

impl LossTerm {
    pub const UNDEFINED: LossTerm = LossTerm {
        value: 0.0,
        defined: false,
        pairs: 0,
    };
}

/// `-mean_i cos(pred_i, target_i)` and its gradient with respect to `pred`.
pub fn neg_mean_cosine<F: Scalar>(pred: &Array2<F>, target: &Array2<F>) -> Result<(LossTerm, Array2<F>)> {
    if pred.dim() != target.dim() {
        return shape_err(format!(
            "predictions {:?} do not align with targets {:?}",
            pred.dim(),
            target.dim()
        ));
    }
    let n = pred.nrows();
    let mut grad = Array2::zeros(pred.raw_dim());
    if n == 0 {
        return Ok((LossTerm::UNDEFINED, grad));
    }
    let eps = F::of(COSINE_EPS);
    let inv_n = F::one() / F::of(n as f64);
    let mut total = 0.0;
    Zip::from(grad.rows_mut())
        .and(pred.rows())
        .and(target.rows())
        .for_each(|mut g, p, t| {
            let dot = p.dot(&t);
            let np = p.dot(&p).sqrt();
            let nt = t.dot(&t).sqrt();
            let (a, b) = (np + eps, nt + eps);
            let cos = dot / (a * b);
            total += cos.as_f64();
            // d cos / d p = t / (a b) - dot / (a^2 b) * p / |p|
            let coef_t = F::one() / (a * b);
            let coef_p = if np > F::zero() {
                dot / (a * a * b * np)
            } else {
                F::zero()
            };
            Zip::from(&mut g).and(&p).and(&t).for_each(|gv, &pv, &tv| {
                *gv = -inv_n * (coef_t * tv - coef_p * pv);
            });
        });
    Ok((
        LossTerm {
            value: -total / n as f64,
            defined: true,
            pairs: n,
        },
        grad,
    ))
}

/// Teacher rows for every query slot of `qs`, in slot order.
pub fn gather_targets<F: Scalar>(teacher: &Array2<F>, qs: &QuerySet, layout: &ClusterLayout) -> Array2<F> {
    let rows: Vec<usize> = qs.slots(layout).into_iter().map(|(_, p)| p).collect();
    teacher.select(Axis(0), &rows)
}

/// Generative loss over the gen entries of `qs`; `predictions` rows follow
/// the slot order of `qs.of_kind(Gen)`.
pub fn loss_gen<F: Scalar>(
    predictions: &Array2<F>,
    teacher: &Array2<F>,
    qs: &QuerySet,
    layout: &ClusterLayout,
) -> Result<LossTerm> {
    let gen = qs.of_kind(QueryKind::Gen);
    if gen.is_empty() {
        return Ok(LossTerm::UNDEFINED);
    }
    Ok(neg_mean_cosine(predictions, &gather_targets(teacher, &gen, layout))?.0)
}

/// Discriminative loss over the dis entries of `qs`.
pub fn loss_dis<F: Scalar>(
    predictions: &Array2<F>,
    teacher: &Array2<F>,
    qs: &QuerySet,
    layout: &ClusterLayout,
    dis_mode: DisMode,
) -> Result<LossTerm> {
    let dis = qs.of_kind(QueryKind::Dis);
    if dis_mode == DisMode::Off || dis.is_empty() {
        return Ok(LossTerm::UNDEFINED);
    }
    Ok(neg_mean_cosine(predictions, &gather_targets(teacher, &dis, layout))?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_gen: f64,
    pub loss_dis: f64,
    pub loss_fd: f64,
    pub loss_total: f64,
    pub lambda_dis: f64,
    pub gen_defined: bool,
    pub dis_defined: bool,
    pub fd_defined: bool,
    pub gen_entries: usize,
    pub dis_entries: usize,
}

/// Combines the terms: `gen + lambda * dis + fd`, undefined terms counting as 0.
/// A single-cluster layout leaves every term undefined; that is a zero loss,
/// not an error (disabled modes are rejected by [`ObjectiveConfig::validate`]).
pub fn total_loss(gen: LossTerm, dis: LossTerm, fd: LossTerm, lambda_dis: f64) -> Result<LossReport> {
    if lambda_dis.is_nan() || lambda_dis < 0.0 {
        return config_err(format!("lambda_dis={lambda_dis} must be >= 0"));
    }
    let loss_total = gen.value + lambda_dis * dis.value + fd.value;
    Ok(LossReport {
        loss_gen: gen.value,
        loss_dis: dis.value,
        loss_fd: fd.value,
        loss_total,
        lambda_dis,
        gen_defined: gen.defined,
        dis_defined: dis.defined,
        fd_defined: fd.defined,
        gen_entries: 0,
        dis_entries: 0,
    })
}

/// Everything one image contributes to a step.
pub struct SampleInput<'a, F> {
    /// Patch pixel rows, row-major over the patch grid.
    pub patches: &'a Array2<F>,
    /// Teacher token per patch slot.
    pub teacher: &'a Array2<F>,
    pub perm: &'a PermutedSequence,
    /// Clusters hidden from the encoder in masked-modeling runs.
    pub hidden_clusters: &'a [usize],
}

/// Picks `round(ratio * n)` clusters to hide, clamped to [1, n - 1].
pub fn sample_hidden_clusters<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return config_err("masked modeling needs at least two clusters");
    }
    let count = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut picked = sample(rng, n, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Loss of one image and, when `grad` is given, its exact gradient
/// accumulated into `grad`.
pub fn sample_loss<F: Scalar>(
    model: &DiGptModel<F>,
    layout: &ClusterLayout,
    cfg: &ObjectiveConfig,
    input: &SampleInput<'_, F>,
    grad: Option<&mut DiGptModel<F>>,
) -> Result<LossReport> {
    let np = layout.num_patches();
    if input.patches.nrows() != np || input.teacher.nrows() != np {
        return shape_err(format!(
            "layout has {np} patches; got {} patch rows and {} teacher rows",
            input.patches.nrows(),
            input.teacher.nrows()
        ));
    }
    if input.teacher.ncols() != model.config.teacher_dim {
        return shape_err(format!(
            "teacher tokens have dim {}, model predicts {}",
            input.teacher.ncols(),
            model.config.teacher_dim
        ));
    }
    match cfg.paradigm {
        Paradigm::DiGpt => digpt_loss(model, layout, cfg, input, grad),
        Paradigm::Fd => fd_loss(model, input, grad),
        Paradigm::Mim => mim_loss(model, layout, input, grad),
    }
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

struct DecoderTerm<F> {
    term: LossTerm,
    dpred: Array2<F>,
    cache: Option<crate::model::DecoderCache<F>>,
}

fn run_decoder<F: Scalar>(
    model: &DiGptModel<F>,
    kind: QueryKind,
    qs: &QuerySet,
    qmask: &AttentionMask,
    layout: &ClusterLayout,
    memory: &Array2<F>,
    teacher: &Array2<F>,
) -> Result<DecoderTerm<F>> {
    if qs.is_empty() {
        return Ok(DecoderTerm {
            term: LossTerm::UNDEFINED,
            dpred: Array2::zeros((0, 0)),
            cache: None,
        });
    }
    let decoder = match kind {
        QueryKind::Gen => &model.gen,
        QueryKind::Dis => &model.dis,
    };
    let patches: Vec<usize> = qs.slots(layout).into_iter().map(|(_, p)| p).collect();
    let (pred, cache) = decoder.forward(&model.encoder.pos, &patches, memory, qmask)?;
    let (term, dpred) = neg_mean_cosine(&pred, &teacher.select(Axis(0), &patches))?;
    Ok(DecoderTerm {
        term,
        dpred,
        cache: Some(cache),
    })
}

/// Packed-pass outputs of one decoder, rows in the entry-major slot order
/// of the returned query set.
pub fn decoder_predictions<F: Scalar>(
    model: &DiGptModel<F>,
    layout: &ClusterLayout,
    cfg: &ObjectiveConfig,
    patches: &Array2<F>,
    perm: &PermutedSequence,
    kind: QueryKind,
) -> Result<(QuerySet, Array2<F>)> {
    let mask = encoder_mask(layout, perm)?;
    let (memory, _) = model
        .encoder
        .forward(patches, &positions(layout.num_patches()), Some(&mask), None)?;
    let qs = decoder_query_set(layout, perm, cfg.dis_mode, cfg.gen)?.of_kind(kind);
    if qs.is_empty() {
        return Ok((qs, Array2::zeros((0, model.config.teacher_dim))));
    }
    let qmask = query_attend_mask(&qs, layout, perm)?;
    let decoder = match kind {
        QueryKind::Gen => &model.gen,
        QueryKind::Dis => &model.dis,
    };
    let slots: Vec<usize> = qs.slots(layout).into_iter().map(|(_, p)| p).collect();
    let (pred, _) = decoder.forward(&model.encoder.pos, &slots, &memory, &qmask)?;
    Ok((qs, pred))
}

fn digpt_loss<F: Scalar>(
    model: &DiGptModel<F>,
    layout: &ClusterLayout,
    cfg: &ObjectiveConfig,
    input: &SampleInput<'_, F>,
    grad: Option<&mut DiGptModel<F>>,
) -> Result<LossReport> {
    cfg.validate()?;
    let mask = encoder_mask(layout, input.perm)?;
    let (memory, enc_cache) =
        model
            .encoder
            .forward(input.patches, &positions(layout.num_patches()), Some(&mask), None)?;
    let qs = decoder_query_set(layout, input.perm, cfg.dis_mode, cfg.gen)?;
    let gen_qs = qs.of_kind(QueryKind::Gen);
    let dis_qs = qs.of_kind(QueryKind::Dis);
    let gen_mask = query_attend_mask(&gen_qs, layout, input.perm)?;
    let dis_mask = query_attend_mask(&dis_qs, layout, input.perm)?;
    let gen = run_decoder(
        model,
        QueryKind::Gen,
        &gen_qs,
        &gen_mask,
        layout,
        &memory,
        input.teacher,
    )?;
    let dis = run_decoder(
        model,
        QueryKind::Dis,
        &dis_qs,
        &dis_mask,
        layout,
        &memory,
        input.teacher,
    )?;
    let (fd_term, fd_parts) = if cfg.fd {
        let pred = model.fd_head.forward(&memory);
        let (t, d) = neg_mean_cosine(&pred, input.teacher)?;
        (t, Some(d))
    } else {
        (LossTerm::UNDEFINED, None)
    };
    let mut report = total_loss(gen.term, dis.term, fd_term, cfg.lambda_dis)?;
    report.gen_entries = gen_qs.entries.len();
    report.dis_entries = dis_qs.entries.len();
    check_finite(&report)?;

    if let Some(grad) = grad {
        let DiGptModel {
            encoder: g_enc,
            gen: g_gen,
            dis: g_dis,
            fd_head: g_fd,
            ..
        } = grad;
        let mut dmemory = Array2::zeros(memory.raw_dim());
        if let Some(c) = &gen.cache {
            dmemory += &model.gen.backward(c, &gen.dpred, g_gen, &mut g_enc.pos);
        }
        if let Some(c) = &dis.cache {
            let scaled = gen_scale(&dis.dpred, cfg.lambda_dis);
            dmemory += &model.dis.backward(c, &scaled, g_dis, &mut g_enc.pos);
        }
        if let Some(d) = fd_parts {
            dmemory += &model.fd_head.backward(&memory, &d, g_fd);
        }
        model.encoder.backward(&enc_cache, &dmemory, g_enc);
    }
    Ok(report)
}

fn gen_scale<F: Scalar>(a: &Array2<F>, s: f64) -> Array2<F> {
    let s = F::of(s);
    a.mapv(|v| v * s)
}

fn fd_loss<F: Scalar>(
    model: &DiGptModel<F>,
    input: &SampleInput<'_, F>,
    grad: Option<&mut DiGptModel<F>>,
) -> Result<LossReport> {
    let n = input.patches.nrows();
    let (memory, enc_cache) = model.encoder.forward(input.patches, &positions(n), None, None)?;
    let pred = model.fd_head.forward(&memory);
    let (term, dpred) = neg_mean_cosine(&pred, input.teacher)?;
    let report = total_loss(LossTerm::UNDEFINED, LossTerm::UNDEFINED, term, 0.0)?;
    check_finite(&report)?;
    if let Some(grad) = grad {
        let dmemory = model.fd_head.backward(&memory, &dpred, &mut grad.fd_head);
        model.encoder.backward(&enc_cache, &dmemory, &mut grad.encoder);
    }
    Ok(report)
}

fn mim_loss<F: Scalar>(
    model: &DiGptModel<F>,
    layout: &ClusterLayout,
    input: &SampleInput<'_, F>,
    grad: Option<&mut DiGptModel<F>>,
) -> Result<LossReport> {
    if input.hidden_clusters.is_empty() {
        return config_err("masked modeling needs at least one hidden cluster");
    }
    let n = layout.num_patches();
    let cluster = layout.patch_cluster_map();
    let replaced: Vec<bool> = cluster.iter().map(|c| input.hidden_clusters.contains(c)).collect();
    let (memory, enc_cache) = model
        .encoder
        .forward(input.patches, &positions(n), None, Some(&replaced))?;
    let targets: Vec<usize> = (0..n).filter(|&p| replaced[p]).collect();
    let qmask = AttentionMask::full(targets.len(), n);
    let (pred, dec_cache) = model.gen.forward(&model.encoder.pos, &targets, &memory, &qmask)?;
    let (term, dpred) = neg_mean_cosine(&pred, &input.teacher.select(Axis(0), &targets))?;
    let mut report = total_loss(term, LossTerm::UNDEFINED, LossTerm::UNDEFINED, 0.0)?;
    report.gen_entries = input.hidden_clusters.len();
    check_finite(&report)?;
    if let Some(grad) = grad {
        let DiGptModel {
            encoder: g_enc,
            gen: g_gen,
            ..
        } = grad;
        let dmemory = model.gen.backward(&dec_cache, &dpred, g_gen, &mut g_enc.pos);
        model.encoder.backward(&enc_cache, &dmemory, g_enc);
    }
    Ok(report)
}

fn check_finite(r: &LossReport) -> Result<()> {
    if [r.loss_gen, r.loss_dis, r.loss_fd, r.loss_total]
        .iter()
        .all(|v| v.is_finite())
    {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss_total={} loss_gen={} loss_dis={} loss_fd={}",
            r.loss_total, r.loss_gen, r.loss_dis, r.loss_fd
        )))
    }
}

/// Loss-only convenience wrapper used by evaluation and finite differences.
pub fn sample_loss_value<F: Scalar>(
    model: &DiGptModel<F>,
    layout: &ClusterLayout,
    cfg: &ObjectiveConfig,
    input: &SampleInput<'_, F>,
) -> Result<f64> {
    Ok(sample_loss(model, layout, cfg, input, None)?.loss_total)
}

/// Gradient of one image's loss as a fresh zeroed-then-filled model.
pub fn sample_gradient<F: Scalar>(
    model: &DiGptModel<F>,
    layout: &ClusterLayout,
    cfg: &ObjectiveConfig,
    input: &SampleInput<'_, F>,
) -> Result<(LossReport, DiGptModel<F>)> {
    let mut grad = model.zeroed();
    let report = sample_loss(model, layout, cfg, input, Some(&mut grad))?;
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::sample_permutation;
    use crate::masking::QueryEntry;
    use crate::model::ModelConfig;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_basics() {
        let a: Array2<f64> = array![[1.0, 2.0, 3.0], [1.0, 0.0, 0.0], [0.5, -0.5, 2.0]];
        let b: Array2<f64> = array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.0], [-0.5, 0.5, -2.0]];
        let c = cosine_rows(&a, &b).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-7);
        assert_eq!(c[1], 0.0);
        assert!((c[2] + 1.0).abs() < 1e-7);
        assert!(cosine_rows(&a, &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn neg_mean_cosine_fixed_points() {
        let t: Array2<f64> = array![[1.0, 2.0], [-3.0, 0.5], [0.2, 0.2]];
        assert!((neg_mean_cosine(&t, &t).unwrap().0.value + 1.0).abs() < 1e-6);
        assert!((neg_mean_cosine(&(-&t), &t).unwrap().0.value - 1.0).abs() < 1e-6);
        let ortho = t.map_axis(Axis(1), |r| (r[1], -r[0]));
        let o = Array2::from_shape_fn((3, 2), |(i, j)| if j == 0 { ortho[i].0 } else { ortho[i].1 });
        assert!(neg_mean_cosine(&o, &t).unwrap().0.value.abs() < 1e-12);
        let (empty, _) = neg_mean_cosine(&Array2::<f64>::zeros((0, 2)), &Array2::zeros((0, 2))).unwrap();
        assert!(!empty.defined);
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn neg_mean_cosine_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let (_, g) = neg_mean_cosine(&p, &t).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let (mut a, mut b) = (p.clone(), p.clone());
                a[[i, j]] += h;
                b[[i, j]] -= h;
                let num =
                    (neg_mean_cosine(&a, &t).unwrap().0.value - neg_mean_cosine(&b, &t).unwrap().0.value) / (2.0 * h);
                assert!((num - g[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn total_loss_combination() {
        let perfect = LossTerm {
            value: -1.0,
            defined: true,
            pairs: 4,
        };
        let r = total_loss(perfect, perfect, LossTerm::UNDEFINED, 1.0).unwrap();
        assert_eq!(r.loss_total, -2.0);
        let g = LossTerm {
            value: -0.37,
            defined: true,
            pairs: 4,
        };
        let d = LossTerm {
            value: 0.81,
            defined: true,
            pairs: 4,
        };
        assert_eq!(total_loss(g, d, LossTerm::UNDEFINED, 0.0).unwrap().loss_total, g.value);
        let none = total_loss(LossTerm::UNDEFINED, LossTerm::UNDEFINED, LossTerm::UNDEFINED, 1.0).unwrap();
        assert!(none.loss_total == 0.0 && !none.gen_defined && !none.dis_defined);
        assert!(total_loss(g, d, LossTerm::UNDEFINED, -1.0).is_err());
    }

    #[test]
    fn objective_config_rules() {
        ObjectiveConfig::default().validate().unwrap();
        let none = ObjectiveConfig {
            gen: false,
            dis_mode: DisMode::Off,
            ..Default::default()
        };
        assert!(none.validate().is_err());
        let gen_only = ObjectiveConfig {
            dis_mode: DisMode::Off,
            ..Default::default()
        };
        gen_only.validate().unwrap();
        assert_eq!("fd".parse::<Paradigm>().unwrap(), Paradigm::Fd);
        assert!("foo".parse::<Paradigm>().is_err());
    }

    #[test]
    fn dis_loss_off_and_multiplicity() {
        let layout = ClusterLayout::new(2, 2, 1, 2, 2).unwrap();
        let perm = PermutedSequence::new(vec![3, 1, 0, 2]).unwrap();
        let teacher: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]];
        let qs = decoder_query_set(&layout, &perm, DisMode::All, true).unwrap();
        let dis = qs.of_kind(QueryKind::Dis);
        let targets = gather_targets(&teacher, &dis, &layout);
        let term = loss_dis(&targets, &teacher, &qs, &layout, DisMode::All).unwrap();
        assert!((term.value + 1.0).abs() < 1e-6);
        assert_eq!(term.pairs, 6);
        let counts = |c: usize| {
            dis.entries
                .iter()
                .filter(|e: &&QueryEntry| e.target_cluster == c)
                .count()
        };
        assert_eq!((counts(3), counts(1), counts(0)), (3, 2, 1));
        let off = loss_dis(&targets, &teacher, &qs, &layout, DisMode::Off).unwrap();
        assert!(!off.defined && off.value == 0.0);
        let gen = gather_targets(&teacher, &qs.of_kind(QueryKind::Gen), &layout);
        assert!((loss_gen(&(-&gen), &teacher, &qs, &layout).unwrap().value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hidden_cluster_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_hidden_clusters(4, 0.5, &mut rng).unwrap().len(), 2);
        assert_eq!(sample_hidden_clusters(2, 0.9, &mut rng).unwrap().len(), 1);
        assert_eq!(sample_hidden_clusters(16, 0.01, &mut rng).unwrap().len(), 1);
        assert!(sample_hidden_clusters(1, 0.5, &mut rng).is_err());
    }

    fn tiny() -> (ModelConfig, ClusterLayout) {
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 1,
            depth: 1,
            dim: 4,
            heads: 2,
            mlp_ratio: 1.0,
            decoder_depth: 1,
            decoder_dim: 4,
            decoder_heads: 1,
            teacher_dim: 3,
        };
        (cfg, ClusterLayout::new(4, 4, 1, 2, 2).unwrap())
    }

    #[test]
    fn toggling_dis_mode_leaves_gen_loss_bit_identical() {
        let (cfg, layout) = tiny();
        let model = DiGptModel::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = Array2::from_shape_simple_fn((16, 3), || rng.random_range(-1.0..1.0));
        let teacher = Array2::from_shape_simple_fn((16, 3), || rng.random_range(-1.0..1.0));
        let perm = sample_permutation(4, &mut rng).unwrap();
        let input = SampleInput {
            patches: &patches,
            teacher: &teacher,
            perm: &perm,
            hidden_clusters: &[],
        };
        let mut gens = Vec::new();
        let mut dis = Vec::new();
        for mode in [DisMode::Latest, DisMode::All, DisMode::Off] {
            let c = ObjectiveConfig {
                dis_mode: mode,
                ..Default::default()
            };
            let r = sample_loss(&model, &layout, &c, &input, None).unwrap();
            gens.push(r.loss_gen.to_bits());
            dis.push(r.loss_dis);
            assert!(r.loss_gen.abs() <= 1.0 && r.loss_dis.abs() <= 1.0);
        }
        assert!(gens.iter().all(|&g| g == gens[0]));
        assert_ne!(dis[0], dis[1]);
        assert_eq!(dis[2], 0.0);
    }

    #[test]
    fn teacher_scale_invariance() {
        let (cfg, layout) = tiny();
        let model = DiGptModel::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let patches = Array2::from_shape_simple_fn((16, 3), || rng.random_range(-1.0..1.0));
        let teacher = Array2::from_shape_simple_fn((16, 3), || rng.random_range(-1.0..1.0));
        let perm = sample_permutation(4, &mut rng).unwrap();
        let c = ObjectiveConfig::default();
        let base = sample_loss(
            &model,
            &layout,
            &c,
            &SampleInput {
                patches: &patches,
                teacher: &teacher,
                perm: &perm,
                hidden_clusters: &[],
            },
            None,
        )
        .unwrap();
        for alpha in [0.1, 0.5, 7.0, 1e4] {
            let scaled = &teacher * alpha;
            let r = sample_loss(
                &model,
                &layout,
                &c,
                &SampleInput {
                    patches: &patches,
                    teacher: &scaled,
                    perm: &perm,
                    hidden_clusters: &[],
                },
                None,
            )
            .unwrap();
            assert!((r.loss_gen - base.loss_gen).abs() < 1e-6, "alpha {alpha}");
        }
    }

    #[test]
    fn single_cluster_has_nothing_to_predict() {
        let (cfg, _) = tiny();
        let layout = ClusterLayout::new(4, 4, 1, 1, 1).unwrap();
        let model = DiGptModel::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let patches = Array2::ones((16, 3));
        let teacher = Array2::ones((16, 3));
        let perm = PermutedSequence::identity(1);
        let input = SampleInput {
            patches: &patches,
            teacher: &teacher,
            perm: &perm,
            hidden_clusters: &[],
        };
        let (r, g) = sample_gradient(&model, &layout, &ObjectiveConfig::default(), &input).unwrap();
        assert_eq!((r.loss_total, r.gen_entries, r.dis_entries), (0.0, 0, 0));
        assert!(g.named().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
        let off = ObjectiveConfig {
            gen: false,
            dis_mode: DisMode::Off,
            ..Default::default()
        };
        assert!(sample_loss(&model, &layout, &off, &input, None).is_err());
    }

    #[test]
    fn shape_errors() {
        let (cfg, layout) = tiny();
        let model = DiGptModel::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let patches = Array2::zeros((16, 3));
        let wrong = Array2::zeros((16, 4));
        let perm = PermutedSequence::identity(4);
        let input = SampleInput {
            patches: &patches,
            teacher: &wrong,
            perm: &perm,
            hidden_clusters: &[],
        };
        assert!(sample_loss(&model, &layout, &ObjectiveConfig::default(), &input, None).is_err());
    }
}
