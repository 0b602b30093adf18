use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use super::{join, Linear, Params};
use crate::error::{shape_err, Result};
use crate::masking::AttentionMask;
use crate::scalar::Scalar;

/// Multi-head attention from a query sequence onto a key/value sequence.
///
/// Self-attention passes the same matrix as both inputs. Masked-out keys get
/// a weight of exactly zero, so their values never reach the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub proj: Linear<F>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    xq: Array2<F>,
    xkv: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

impl<F: Scalar> AttentionCache<F> {
    /// Attention weights of one head, rows = queries.
    pub fn probs(&self, head: usize) -> &Array2<F> {
        &self.probs[head]
    }
}

impl<F: Scalar> Attention<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, query_dim: usize, kv_dim: usize, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(rng, query_dim, dim, true),
            k: Linear::new(rng, kv_dim, dim, true),
            v: Linear::new(rng, kv_dim, dim, true),
            proj: Linear::new(rng, dim, dim, true),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.q.output_dim() / self.heads
    }

    pub fn forward(
        &self,
        xq: &Array2<F>,
        xkv: &Array2<F>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Array2<F>, AttentionCache<F>)> {
        if let Some(m) = mask {
            if m.rows() != xq.nrows() || m.cols() != xkv.nrows() {
                return shape_err(format!(
                    "mask {}x{} does not fit {} queries over {} keys",
                    m.rows(),
                    m.cols(),
                    xq.nrows(),
                    xkv.nrows()
                ));
            }
        }
        let q = self.q.forward(xq);
        let k = self.k.forward(xkv);
        let v = self.v.forward(xkv);
        let dh = self.head_dim();
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut ctx = Array2::zeros((xq.nrows(), self.q.output_dim()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            masked_softmax_rows(&mut p, scale, mask);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = self.proj.forward(&ctx);
        Ok((
            out,
            AttentionCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        ))
    }

    /// Returns (dL/dxq, dL/dxkv).
    pub fn backward(&self, cache: &AttentionCache<F>, dout: &Array2<F>, grad: &mut Self) -> (Array2<F>, Array2<F>) {
        let dctx = self.proj.backward(&cache.ctx, dout, &mut grad.proj);
        let dh = self.head_dim();
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &cache.probs[h];
            let dctx_h = dctx.slice(cols);
            let dp = dctx_h.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            // softmax backward: dS = P * (dP - rowsum(dP * P))
            let mut ds = dp;
            Zip::from(ds.rows_mut()).and(p.rows()).for_each(|mut drow, prow| {
                let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<F>();
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
            });
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dxq = self.q.backward(&cache.xq, &dq, &mut grad.q);
        let mut dxkv = self.k.backward(&cache.xkv, &dk, &mut grad.k);
        dxkv += &self.v.backward(&cache.xkv, &dv, &mut grad.v);
        (dxq, dxkv)
    }
}

/// In-place softmax of `scale * scores` over the allowed keys of each row.
/// Disallowed keys get probability exactly zero; rows with no allowed key stay zero.
fn masked_softmax_rows<F: Scalar>(scores: &mut Array2<F>, scale: F, mask: Option<&AttentionMask>) {
    for (qi, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let allowed = |k: usize| mask.is_none_or(|m| m.allow(qi, k));
        let mut max = F::neg_infinity();
        for (k, &v) in row.iter().enumerate() {
            if allowed(k) && v * scale > max {
                max = v * scale;
            }
        }
        if max == F::neg_infinity() {
            row.fill(F::zero());
            continue;
        }
        let mut sum = F::zero();
        for (k, v) in row.iter_mut().enumerate() {
            if allowed(k) {
                *v = (*v * scale - max).exp();
                sum += *v;
            } else {
                *v = F::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<F: Scalar> Params<F> for Attention<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.proj.collect(&join(prefix, "proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        self.q.collect_mut(&join(prefix, "q"), out);
        self.k.collect_mut(&join(prefix, "k"), out);
        self.v.collect_mut(&join(prefix, "v"), out);
        self.proj.collect_mut(&join(prefix, "proj"), out);
    }
}
