use ndarray::Array2;
use rand::Rng;

use super::{gelu, gelu_backward, join, Attention, AttentionCache, LayerNorm, LayerNormCache, Linear, Params};
use crate::error::Result;
use crate::masking::AttentionMask;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(rng, dim, hidden, true),
            fc2: Linear::new(rng, hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(x);
        let act = gelu(&pre);
        let y = self.fc2.forward(&act);
        (y, MlpCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, cache: &MlpCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

impl<F: Scalar> Params<F> for Mlp<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.fc1.collect(&join(prefix, "fc1"), out);
        self.fc2.collect(&join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        self.fc1.collect_mut(&join(prefix, "fc1"), out);
        self.fc2.collect_mut(&join(prefix, "fc2"), out);
    }
}

/// Pre-norm transformer block: masked self-attention then MLP, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<F> {
    pub norm1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub norm2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

#[derive(Debug, Clone)]
pub struct EncoderBlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Scalar> EncoderBlockCache<F> {
    pub fn attention(&self) -> &AttentionCache<F> {
        &self.attn
    }
}

impl<F: Scalar> EncoderBlock<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, dim, dim, heads),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, hidden),
        }
    }

    pub fn forward(&self, x: &Array2<F>, mask: Option<&AttentionMask>) -> Result<(Array2<F>, EncoderBlockCache<F>)> {
        let (a, ln1) = self.norm1.forward(x);
        let (attn_out, attn) = self.attn.forward(&a, &a, mask)?;
        let h = x + &attn_out;
        let (m, ln2) = self.norm2.forward(&h);
        let (mlp_out, mlp) = self.mlp.forward(&m);
        Ok((h + &mlp_out, EncoderBlockCache { ln1, attn, ln2, mlp }))
    }

    pub fn backward(&self, cache: &EncoderBlockCache<F>, dy: &Array2<F>, grad: &mut Self) -> Array2<F> {
        let dm = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let dh = dy + &self.norm2.backward(&cache.ln2, &dm, &mut grad.norm2);
        let (dq, dkv) = self.attn.backward(&cache.attn, &dh, &mut grad.attn);
        let da = dq + &dkv;
        dh + &self.norm1.backward(&cache.ln1, &da, &mut grad.norm1)
    }
}

impl<F: Scalar> Params<F> for EncoderBlock<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }
}

/// Decoder block: queries cross-attend the encoder features, then MLP.
/// There is no query-to-query attention, so queries never see each other.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<F> {
    pub norm1: LayerNorm<F>,
    pub cross: Attention<F>,
    pub norm2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

#[derive(Debug, Clone)]
pub struct DecoderBlockCache<F> {
    ln1: LayerNormCache<F>,
    cross: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Scalar> DecoderBlock<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, memory_dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            cross: Attention::new(rng, dim, memory_dim, dim, heads),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, hidden),
        }
    }

    pub fn forward(
        &self,
        queries: &Array2<F>,
        memory: &Array2<F>,
        mask: &AttentionMask,
    ) -> Result<(Array2<F>, DecoderBlockCache<F>)> {
        let (a, ln1) = self.norm1.forward(queries);
        let (attn_out, cross) = self.cross.forward(&a, memory, Some(mask))?;
        let h = queries + &attn_out;
        let (m, ln2) = self.norm2.forward(&h);
        let (mlp_out, mlp) = self.mlp.forward(&m);
        Ok((h + &mlp_out, DecoderBlockCache { ln1, cross, ln2, mlp }))
    }

    /// Returns (dL/dqueries, dL/dmemory).
    pub fn backward(&self, cache: &DecoderBlockCache<F>, dy: &Array2<F>, grad: &mut Self) -> (Array2<F>, Array2<F>) {
        let dm = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let dh = dy + &self.norm2.backward(&cache.ln2, &dm, &mut grad.norm2);
        let (da, dmemory) = self.cross.backward(&cache.cross, &dh, &mut grad.cross);
        let dq = dh + &self.norm1.backward(&cache.ln1, &da, &mut grad.norm1);
        (dq, dmemory)
    }
}

impl<F: Scalar> Params<F> for DecoderBlock<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.norm1.collect(&join(prefix, "norm1"), out);
        self.cross.collect(&join(prefix, "cross"), out);
        self.norm2.collect(&join(prefix, "norm2"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        self.norm1.collect_mut(&join(prefix, "norm1"), out);
        self.cross.collect_mut(&join(prefix, "cross"), out);
        self.norm2.collect_mut(&join(prefix, "norm2"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
    }
}
