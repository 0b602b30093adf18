//! ViT encoder and the two cross-attention decoders.
//!
//! The encoder is a standard pre-norm ViT over patch tokens with learned
//! positional embeddings; it accepts an optional attention mask so the whole
//! set of cluster prefixes is computed in one pass. Each decoder turns a
//! learned query token plus the positional embedding of the queried patch
//! into a prediction of that patch's teacher token.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterLayout, PermutedSequence};
use crate::error::{config_err, shape_err, Result};
use crate::masking::{AttentionMask, SlotLabel};
use crate::nn::{
    join, slice_of, slice_of_mut, trunc_normal_matrix, trunc_normal_vector, DecoderBlock, DecoderBlockCache,
    EncoderBlock, EncoderBlockCache, LayerNorm, LayerNormCache, Linear, Params,
};
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub teacher_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            depth: 6,
            dim: 192,
            heads: 3,
            mlp_ratio: 4.0,
            decoder_depth: 2,
            decoder_dim: 192,
            decoder_heads: 3,
            teacher_dim: 48,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    fn hidden(&self, dim: usize) -> usize {
        ((dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return config_err(format!(
                "data.image_size={} is not a multiple of data.patch_size={}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return config_err(format!(
                "model.heads={} does not divide model.dim={}",
                self.heads, self.dim
            ));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return config_err(format!(
                "decoder.heads={} does not divide decoder.dim={}",
                self.decoder_heads, self.decoder_dim
            ));
        }
        if self.depth == 0 {
            return config_err("model.depth must be at least 1");
        }
        if self.decoder_depth == 0 {
            return config_err("decoder.depth must be at least 1");
        }
        if self.teacher_dim == 0 {
            return config_err("teacher dimension must be positive");
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 {
            return config_err("model.mlp_ratio must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub patch_embed: Linear<F>,
    /// One learned row per patch slot; shared with the decoder queries.
    pub pos: Array2<F>,
    /// Replaces the embedding of hidden patches in masked-modeling runs.
    pub mask_token: Array1<F>,
    pub blocks: Vec<EncoderBlock<F>>,
    pub norm: LayerNorm<F>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    patches: Array2<F>,
    positions: Vec<usize>,
    replaced: Option<Vec<bool>>,
    blocks: Vec<EncoderBlockCache<F>>,
    norm: LayerNormCache<F>,
}

impl<F: Scalar> EncoderCache<F> {
    pub fn blocks(&self) -> &[EncoderBlockCache<F>] {
        &self.blocks
    }
}

impl<F: Scalar> Encoder<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let hidden = cfg.hidden(cfg.dim);
        Self {
            patch_embed: Linear::new(rng, cfg.patch_dim(), cfg.dim, true),
            pos: trunc_normal_matrix(rng, cfg.num_patches(), cfg.dim),
            mask_token: trunc_normal_vector(rng, cfg.dim),
            blocks: (0..cfg.depth)
                .map(|_| EncoderBlock::new(rng, cfg.dim, cfg.heads, hidden))
                .collect(),
            norm: LayerNorm::new(cfg.dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.pos.ncols()
    }

    pub fn num_slots(&self) -> usize {
        self.pos.nrows()
    }

    /// Encodes the patch rows `patches`, where row `i` sits at slot `positions[i]`.
    /// Rows flagged in `replaced` are swapped for the mask token before the positional embedding.
    pub fn forward(
        &self,
        patches: &Array2<F>,
        positions: &[usize],
        mask: Option<&AttentionMask>,
        replaced: Option<&[bool]>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        if patches.nrows() != positions.len() {
            return shape_err(format!(
                "{} patch rows but {} positions",
                patches.nrows(),
                positions.len()
            ));
        }
        if patches.ncols() != self.patch_embed.input_dim() {
            return shape_err(format!(
                "patch vectors have {} values, expected {}",
                patches.ncols(),
                self.patch_embed.input_dim()
            ));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.num_slots()) {
            return shape_err(format!("position {p} outside {} patch slots", self.num_slots()));
        }
        if let Some(r) = replaced {
            if r.len() != positions.len() {
                return shape_err("replacement flags do not match patch rows");
            }
        }
        let mut x = self.patch_embed.forward(patches);
        for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            if replaced.is_some_and(|r| r[i]) {
                row.assign(&self.mask_token);
            }
            row += &self.pos.row(positions[i]);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, mask)?;
            caches.push(c);
            x = y;
        }
        let (out, norm) = self.norm.forward(&x);
        Ok((
            out,
            EncoderCache {
                patches: patches.clone(),
                positions: positions.to_vec(),
                replaced: replaced.map(<[bool]>::to_vec),
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache<F>, dout: &Array2<F>, grad: &mut Self) {
        let mut dx = self.norm.backward(&cache.norm, dout, &mut grad.norm);
        for (block, (c, g)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grad.blocks.iter_mut()))
            .rev()
        {
            dx = block.backward(c, &dx, g);
        }
        for (i, row) in dx.axis_iter(Axis(0)).enumerate() {
            let mut prow = grad.pos.row_mut(cache.positions[i]);
            prow += &row;
        }
        if let Some(r) = &cache.replaced {
            for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                if r[i] {
                    grad.mask_token += &row;
                    row.fill(F::zero());
                }
            }
        }
        self.patch_embed.backward(&cache.patches, &dx, &mut grad.patch_embed);
    }
}

impl<F: Scalar> Params<F> for Encoder<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "pos"), slice_of(&self.pos)));
        out.push((join(prefix, "mask_token"), slice_of(&self.mask_token)));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        out.push((join(prefix, "pos"), slice_of_mut(&mut self.pos)));
        out.push((join(prefix, "mask_token"), slice_of_mut(&mut self.mask_token)));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_mut(&join(prefix, "norm"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<F> {
    /// The learned [Gen] or [Dis] token.
    pub query: Array1<F>,
    /// Maps encoder-width positional rows to decoder width; absent when widths agree.
    pub pos_proj: Option<Linear<F>>,
    pub blocks: Vec<DecoderBlock<F>>,
    pub norm: LayerNorm<F>,
    pub head: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<F> {
    query_patches: Vec<usize>,
    pos_rows: Array2<F>,
    blocks: Vec<DecoderBlockCache<F>>,
    norm: Option<LayerNormCache<F>>,
    normed: Array2<F>,
    memory_rows: usize,
}

impl<F: Scalar> Decoder<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let hidden = cfg.hidden(cfg.decoder_dim);
        Self {
            query: trunc_normal_vector(rng, cfg.decoder_dim),
            pos_proj: (cfg.decoder_dim != cfg.dim).then(|| Linear::new(rng, cfg.dim, cfg.decoder_dim, false)),
            blocks: (0..cfg.decoder_depth)
                .map(|_| DecoderBlock::new(rng, cfg.decoder_dim, cfg.dim, cfg.decoder_heads, hidden))
                .collect(),
            norm: LayerNorm::new(cfg.decoder_dim),
            head: Linear::new(rng, cfg.decoder_dim, cfg.teacher_dim, true),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// One prediction row per entry of `query_patches`, read from `memory` under `mask`.
    pub fn forward(
        &self,
        pos_table: &Array2<F>,
        query_patches: &[usize],
        memory: &Array2<F>,
        mask: &AttentionMask,
    ) -> Result<(Array2<F>, DecoderCache<F>)> {
        if mask.rows() != query_patches.len() || mask.cols() != memory.nrows() {
            return shape_err(format!(
                "query mask {}x{} does not fit {} queries over {} encoder slots",
                mask.rows(),
                mask.cols(),
                query_patches.len(),
                memory.nrows()
            ));
        }
        let pos_rows = pos_table.select(Axis(0), query_patches);
        let mut cache = DecoderCache {
            query_patches: query_patches.to_vec(),
            pos_rows,
            blocks: Vec::with_capacity(self.blocks.len()),
            norm: None,
            normed: Array2::zeros((0, self.query.len())),
            memory_rows: memory.nrows(),
        };
        if query_patches.is_empty() {
            return Ok((Array2::zeros((0, self.output_dim())), cache));
        }
        let mut x = match &self.pos_proj {
            Some(p) => p.forward(&cache.pos_rows),
            None => cache.pos_rows.clone(),
        };
        x += &self.query;
        for block in &self.blocks {
            let (y, c) = block.forward(&x, memory, mask)?;
            cache.blocks.push(c);
            x = y;
        }
        let (normed, norm) = self.norm.forward(&x);
        let out = self.head.forward(&normed);
        cache.norm = Some(norm);
        cache.normed = normed;
        Ok((out, cache))
    }

    /// Accumulates decoder gradients into `grad`, positional gradients into
    /// `dpos`, and returns dL/dmemory.
    pub fn backward(
        &self,
        cache: &DecoderCache<F>,
        dout: &Array2<F>,
        grad: &mut Self,
        dpos: &mut Array2<F>,
    ) -> Array2<F> {
        let dmemory = Array2::zeros((cache.memory_rows, self.blocks[0].cross.k.input_dim()));
        let Some(norm_cache) = &cache.norm else {
            return dmemory;
        };
        let dnormed = self.head.backward(&cache.normed, dout, &mut grad.head);
        let mut dx = self.norm.backward(norm_cache, &dnormed, &mut grad.norm);
        let mut dmemory = dmemory;
        for (block, (c, g)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grad.blocks.iter_mut()))
            .rev()
        {
            let (dq, dm) = block.backward(c, &dx, g);
            dmemory += &dm;
            dx = dq;
        }
        grad.query += &dx.sum_axis(Axis(0));
        let dpos_rows = match (&self.pos_proj, grad.pos_proj.as_mut()) {
            (Some(p), Some(gp)) => p.backward(&cache.pos_rows, &dx, gp),
            _ => dx,
        };
        for (i, row) in dpos_rows.axis_iter(Axis(0)).enumerate() {
            let mut prow = dpos.row_mut(cache.query_patches[i]);
            prow += &row;
        }
        dmemory
    }
}

impl<F: Scalar> Params<F> for Decoder<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        out.push((join(prefix, "query"), slice_of(&self.query)));
        if let Some(p) = &self.pos_proj {
            p.collect(&join(prefix, "pos_proj"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect(&join(prefix, "norm"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        out.push((join(prefix, "query"), slice_of_mut(&mut self.query)));
        if let Some(p) = &mut self.pos_proj {
            p.collect_mut(&join(prefix, "pos_proj"), out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_mut(&join(prefix, "norm"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

/// All trainable state: encoder, generative decoder, discriminative decoder,
/// and the projection used by feature distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiGptModel<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub gen: Decoder<F>,
    pub dis: Decoder<F>,
    pub fd_head: Linear<F>,
}

impl<F: Scalar> DiGptModel<F> {
    /// Truncated-normal (std 0.02) initialisation; deterministic in the rng.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(rng, cfg);
        let gen = Decoder::new(rng, cfg);
        let dis = Decoder::new(rng, cfg);
        let fd_head = Linear::new(rng, cfg.dim, cfg.teacher_dim, true);
        Ok(Self {
            config: cfg.clone(),
            encoder,
            gen,
            dis,
            fd_head,
        })
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Scalar>(&self) -> DiGptModel<G> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = DiGptModel::<G>::init(&self.config, &mut rng).expect("validated config");
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = G::of(s.as_f64());
            }
        }
        out
    }
}

impl<F: Scalar> Params<F> for DiGptModel<F> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [F])>) {
        self.encoder.collect(&join(prefix, "encoder"), out);
        self.gen.collect(&join(prefix, "gen"), out);
        self.dis.collect(&join(prefix, "dis"), out);
        self.fd_head.collect(&join(prefix, "fd_head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [F])>) {
        self.encoder.collect_mut(&join(prefix, "encoder"), out);
        self.gen.collect_mut(&join(prefix, "gen"), out);
        self.dis.collect_mut(&join(prefix, "dis"), out);
        self.fd_head.collect_mut(&join(prefix, "fd_head"), out);
    }
}

fn all_positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Per-patch encoder features of one image under `mask` (rows = patch slots).
pub fn encode<F: Scalar>(encoder: &Encoder<F>, patches: &Array2<F>, mask: &AttentionMask) -> Result<Array2<F>> {
    if mask.rows() != patches.nrows() || mask.cols() != patches.nrows() {
        return shape_err(format!(
            "mask {}x{} for {} patches",
            mask.rows(),
            mask.cols(),
            patches.nrows()
        ));
    }
    Ok(encoder
        .forward(patches, &all_positions(patches.nrows()), Some(mask), None)?
        .0)
}

/// Recomputes the features of cluster `order[rank]` from scratch on the
/// truncated sequence `order[0..=rank]`: later clusters are physically absent,
/// and inside the prefix each cluster reads itself and the clusters before it.
/// Rows are returned in ascending patch order.
///
/// For a one-block encoder this equals an unmasked run on the prefix.
pub fn oracle_prefix_forward<F: Scalar>(
    encoder: &Encoder<F>,
    patches: &Array2<F>,
    layout: &ClusterLayout,
    perm: &PermutedSequence,
    rank: usize,
) -> Result<Array2<F>> {
    perm.check_layout(layout)?;
    if rank >= perm.len() {
        return shape_err(format!("rank {rank} outside {} clusters", perm.len()));
    }
    let ppc = layout.patches_per_cluster();
    let positions = perm.prefix_patches(layout, rank + 1);
    let sub = patches.select(Axis(0), &positions);
    // slot i of the truncated sequence belongs to the cluster at rank i / ppc
    let labels: Vec<SlotLabel> = positions.iter().map(|&p| SlotLabel::Patch(p)).collect();
    let mask = AttentionMask::from_fn(labels.clone(), labels, |q, k| k / ppc <= q / ppc);
    let mask = (rank > 0).then_some(&mask);
    let (out, _) = encoder.forward(&sub, &positions, mask, None)?;
    Ok(out.slice(ndarray::s![rank * ppc..(rank + 1) * ppc, ..]).to_owned())
}

/// Pooled representation used downstream: mean of the final-layer patch
/// tokens under full attention.
pub fn downstream_features<F: Scalar>(encoder: &Encoder<F>, patches: &Array2<F>) -> Result<Array1<F>> {
    let (out, _) = encoder.forward(patches, &all_positions(patches.nrows()), None, None)?;
    Ok(out.mean_axis(Axis(0)).expect("at least one patch"))
}

/// [`downstream_features`] plus the cache for [`downstream_features_backward`].
pub fn downstream_features_with_cache<F: Scalar>(
    encoder: &Encoder<F>,
    patches: &Array2<F>,
) -> Result<(Array1<F>, EncoderCache<F>)> {
    let (out, cache) = encoder.forward(patches, &all_positions(patches.nrows()), None, None)?;
    Ok((out.mean_axis(Axis(0)).expect("at least one patch"), cache))
}

/// Accumulates encoder gradients from a gradient on the pooled vector.
pub fn downstream_features_backward<F: Scalar>(
    encoder: &Encoder<F>,
    cache: &EncoderCache<F>,
    dpooled: &Array1<F>,
    grad: &mut Encoder<F>,
) {
    let n = cache.positions.len();
    let scale = F::one() / F::of(n as f64);
    let row = dpooled.mapv(|v| v * scale);
    let dout = row
        .broadcast((n, row.len()))
        .expect("broadcast pooled gradient")
        .to_owned();
    encoder.backward(cache, &dout, grad);
}
