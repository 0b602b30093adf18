//! Property suites for the attention masks, shared by `check-masks` and the
//! test suite.

use std::fmt;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cluster::{sample_permutation, ClusterLayout, PermutedSequence};
use crate::data::Image;
use crate::error::{config_err, Result};
use crate::masking::{decoder_query_set, encoder_mask, DisMode, QueryKind};
use crate::model::{encode, oracle_prefix_forward, DiGptModel, ModelConfig};
use crate::nn::Params;
use crate::objective::{decoder_predictions, ObjectiveConfig};

const PATCH: usize = 2;

/// Outcome of one property suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} cases, max err {:.3e} (tol {:.0e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_err,
            self.tol,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" — {}", self.detail)
            }
        )
    }
}

/// Which random configurations a suite draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSpec {
    /// Cluster counts to draw from.
    pub clusters: Vec<usize>,
    /// Patches-per-cluster values to draw from (perfect squares).
    pub patches_per_cluster: Vec<usize>,
    pub cases: usize,
    pub seed: u64,
}

impl Default for CheckSpec {
    fn default() -> Self {
        Self {
            clusters: vec![2, 3, 4],
            patches_per_cluster: vec![1, 4, 9],
            cases: 20,
            seed: 0,
        }
    }
}

impl CheckSpec {
    fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() || self.clusters.contains(&0) {
            return config_err("check: cluster counts must be non-empty and positive");
        }
        for &p in &self.patches_per_cluster {
            let side = (p as f64).sqrt().round() as usize;
            if p == 0 || side * side != p {
                return config_err(format!(
                    "check: patches per cluster {p} is not a positive perfect square"
                ));
            }
        }
        if self.patches_per_cluster.is_empty() {
            return config_err("check: no patches-per-cluster values");
        }
        Ok(())
    }
}

/// A random model, layout, image and order for one case.
pub struct Case {
    pub layout: ClusterLayout,
    pub model: DiGptModel<f32>,
    pub image: Image,
    pub perm: PermutedSequence,
}

fn cluster_grid(n: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let divisors: Vec<usize> = (1..=n).filter(|d| n.is_multiple_of(*d)).collect();
    let rows = divisors[rng.random_range(0..divisors.len())];
    (rows, n / rows)
}

fn random_case(spec: &CheckSpec, rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = spec.clusters[rng.random_range(0..spec.clusters.len())];
    let ppc = spec.patches_per_cluster[rng.random_range(0..spec.patches_per_cluster.len())];
    let side = (ppc as f64).sqrt().round() as usize;
    let (cr, cc) = cluster_grid(n, rng);
    let (h, w) = (cr * side * PATCH, cc * side * PATCH);
    let layout = ClusterLayout::new(h, w, PATCH, cr, cc)?;
    // the positional table only needs at least one row per patch slot
    let grid_side = (layout.num_patches() as f64).sqrt().ceil() as usize;
    let cfg = ModelConfig {
        image_size: grid_side * PATCH,
        patch_size: PATCH,
        depth: rng.random_range(1..=3),
        dim: 16,
        heads: 2,
        mlp_ratio: 2.0,
        decoder_depth: rng.random_range(1..=2),
        decoder_dim: 16,
        decoder_heads: 2,
        teacher_dim: 8,
    };
    let mut model = DiGptModel::<f32>::init(&cfg, rng)?;
    // far from the near-uniform attention of a fresh init
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for (_, t) in model.named_mut() {
        for v in t.iter_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    let image = random_image(h, w, rng);
    let perm = sample_permutation(n, rng)?;
    Ok(Case {
        layout,
        model,
        image,
        perm,
    })
}

fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(h, w);
    for v in img.data.iter_mut() {
        *v = rng.random();
    }
    img
}

fn max_abs(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

fn cluster_rows(layout: &ClusterLayout, perm: &PermutedSequence, ranks: std::ops::Range<usize>) -> Vec<usize> {
    let mut rows: Vec<usize> = ranks.flat_map(|r| layout.cluster_patches(perm.order()[r])).collect();
    rows.sort_unstable();
    rows
}

/// The packed pass under the cluster-causal mask equals recomputing each
/// cluster from its own prefix, at every rank.
pub fn check_packed_prefix(spec: &CheckSpec, tol: f64) -> Result<CheckReport> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut worst: f64 = 0.0;
    let mut detail = String::new();
    for case_idx in 0..spec.cases {
        let c = random_case(spec, &mut rng)?;
        let patches = c.image.patchify::<f32>(PATCH)?;
        let packed = encode(&c.model.encoder, &patches, &encoder_mask(&c.layout, &c.perm)?)?;
        for rank in 0..c.perm.len() {
            let oracle = oracle_prefix_forward(&c.model.encoder, &patches, &c.layout, &c.perm, rank)?;
            let rows = cluster_rows(&c.layout, &c.perm, rank..rank + 1);
            let err = max_abs(&packed.select(Axis(0), &rows), &oracle);
            if err > worst {
                worst = err;
                detail = format!(
                    "worst at case {case_idx} (n={}, ppc={}, rank {rank})",
                    c.perm.len(),
                    c.layout.patches_per_cluster()
                );
            }
        }
    }
    Ok(CheckReport {
        name: "packed-prefix equivalence",
        cases: spec.cases,
        max_err: worst,
        tol,
        passed: worst <= tol,
        detail,
    })
}

/// Perturbing every pixel of the clusters ranked `>= k` leaves the encoder
/// rows of clusters ranked `< k` and the generative predictions made from
/// prefix `k` unchanged, for every `k` in `1..n`.
pub fn check_causality(spec: &CheckSpec, tol: f64) -> Result<(CheckReport, CheckReport)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc0ffee);
    let objective = ObjectiveConfig {
        dis_mode: DisMode::All,
        ..ObjectiveConfig::default()
    };
    let (mut enc_worst, mut gen_worst) = (0.0f64, 0.0f64);
    let mut checked = (0usize, 0usize);
    // smallest change seen on the perturbed clusters themselves; zero would make the check vacuous
    let mut control = f64::INFINITY;
    for _ in 0..spec.cases {
        let c = random_case(spec, &mut rng)?;
        let n = c.perm.len();
        let patches = c.image.patchify::<f32>(PATCH)?;
        let mask = encoder_mask(&c.layout, &c.perm)?;
        let base = encode(&c.model.encoder, &patches, &mask)?;
        let (qs, base_gen) = decoder_predictions(&c.model, &c.layout, &objective, &patches, &c.perm, QueryKind::Gen)?;
        let slot_entries: Vec<usize> = qs.slots(&c.layout).into_iter().map(|(e, _)| e).collect();
        for k in 1..n {
            let mut img = c.image.clone();
            for r in k..n {
                for p in c.layout.cluster_patches(c.perm.order()[r]) {
                    let (py, px) = (p / c.layout.patch_cols(), p % c.layout.patch_cols());
                    for y in py * PATCH..(py + 1) * PATCH {
                        for x in px * PATCH..(px + 1) * PATCH {
                            let rgb = [rng.random(), rng.random(), rng.random()];
                            img.set(y, x, rgb);
                        }
                    }
                }
            }
            let perturbed = img.patchify::<f32>(PATCH)?;
            let out = encode(&c.model.encoder, &perturbed, &mask)?;
            let rows = cluster_rows(&c.layout, &c.perm, 0..k);
            enc_worst = enc_worst.max(max_abs(&base.select(Axis(0), &rows), &out.select(Axis(0), &rows)));
            let later = cluster_rows(&c.layout, &c.perm, k..n);
            control = control.min(max_abs(&base.select(Axis(0), &later), &out.select(Axis(0), &later)));
            checked.0 += 1;

            let (_, gen) = decoder_predictions(&c.model, &c.layout, &objective, &perturbed, &c.perm, QueryKind::Gen)?;
            let gen_rows: Vec<usize> = slot_entries
                .iter()
                .enumerate()
                .filter(|(_, &e)| qs.entries[e].prefix_len == k)
                .map(|(i, _)| i)
                .collect();
            if !gen_rows.is_empty() {
                gen_worst = gen_worst.max(max_abs(
                    &base_gen.select(Axis(0), &gen_rows),
                    &gen.select(Axis(0), &gen_rows),
                ));
                checked.1 += 1;
            }
        }
    }
    Ok((
        CheckReport {
            name: "encoder causality",
            cases: checked.0,
            max_err: enc_worst,
            tol,
            passed: enc_worst < tol && control > tol,
            detail: format!("perturbed clusters moved by at least {control:.2e}"),
        },
        CheckReport {
            name: "generative-decoder causality",
            cases: checked.1,
            max_err: gen_worst,
            tol,
            passed: gen_worst < tol && checked.1 > 0,
            detail: String::new(),
        },
    ))
}

/// For `n` clusters: `all` yields n(n-1)/2 discriminative entries with
/// `order[j]` supervised n-1-j times, `latest` yields n-1 entries, one per
/// visible-frontier cluster.
pub fn check_dis_multiplicity(n: usize, seed: u64) -> Result<CheckReport> {
    let (rows, cols) = crate::cluster::cluster_grid_for(n)?;
    let layout = ClusterLayout::new(rows * PATCH, cols * PATCH, PATCH, rows, cols)?;
    let perm = sample_permutation(n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let all = decoder_query_set(&layout, &perm, DisMode::All, true)?.of_kind(QueryKind::Dis);
    let latest = decoder_query_set(&layout, &perm, DisMode::Latest, true)?.of_kind(QueryKind::Dis);
    let mut problems = Vec::new();
    if all.entries.len() != n * (n - 1) / 2 {
        problems.push(format!("all: {} entries", all.entries.len()));
    }
    for (j, &c) in perm.order().iter().enumerate() {
        let times = all.entries.iter().filter(|e| e.target_cluster == c).count();
        if times != n - 1 - j {
            problems.push(format!("all: order[{j}] supervised {times} times"));
        }
    }
    let mut frontier: Vec<usize> = latest.entries.iter().map(|e| e.target_cluster).collect();
    frontier.sort_unstable();
    let mut expected: Vec<usize> = perm.order()[..n.saturating_sub(1)].to_vec();
    expected.sort_unstable();
    if latest.entries.len() != n.saturating_sub(1) || frontier != expected {
        problems.push(format!("latest: targets {frontier:?}"));
    }
    Ok(CheckReport {
        name: "discriminative multiplicity",
        cases: 1,
        max_err: problems.len() as f64,
        tol: 0.0,
        passed: problems.is_empty(),
        detail: problems.join("; "),
    })
}

/// Every suite, in a fixed order.
pub fn run_all(spec: &CheckSpec) -> Result<Vec<CheckReport>> {
    let mut out = vec![check_packed_prefix(spec, 1e-5)?];
    let (enc, gen) = check_causality(spec, 1e-6)?;
    out.push(enc);
    out.push(gen);
    for &n in &spec.clusters {
        out.push(check_dis_multiplicity(n, spec.seed)?);
    }
    Ok(out)
}
