//! Patch-to-cluster partition of the image grid and random cluster orders.
//!
//! Patches are numbered row-major over the patch grid. Clusters are
//! contiguous rectangular tiles of patches, also numbered row-major.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub cluster_rows: usize,
    pub cluster_cols: usize,
}

impl ClusterLayout {
    pub fn new(
        image_h: usize,
        image_w: usize,
        patch_size: usize,
        cluster_rows: usize,
        cluster_cols: usize,
    ) -> Result<Self> {
        for (name, v) in [
            ("image_h", image_h),
            ("image_w", image_w),
            ("patch_size", patch_size),
            ("cluster_rows", cluster_rows),
            ("cluster_cols", cluster_cols),
        ] {
            if v == 0 {
                return config_err(format!("{name} must be positive"));
            }
        }
        if !image_h.is_multiple_of(patch_size) {
            return config_err(format!(
                "image_h={image_h} is not a multiple of patch_size={patch_size}"
            ));
        }
        if !image_w.is_multiple_of(patch_size) {
            return config_err(format!(
                "image_w={image_w} is not a multiple of patch_size={patch_size}"
            ));
        }
        let (pr, pc) = (image_h / patch_size, image_w / patch_size);
        if pr % cluster_rows != 0 {
            return config_err(format!(
                "patch_rows={pr} is not a multiple of cluster_rows={cluster_rows}"
            ));
        }
        if pc % cluster_cols != 0 {
            return config_err(format!(
                "patch_cols={pc} is not a multiple of cluster_cols={cluster_cols}"
            ));
        }
        Ok(Self {
            image_h,
            image_w,
            patch_size,
            cluster_rows,
            cluster_cols,
        })
    }

    pub fn patch_rows(&self) -> usize {
        self.image_h / self.patch_size
    }

    pub fn patch_cols(&self) -> usize {
        self.image_w / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_rows * self.cluster_cols
    }

    /// Patches per cluster along (rows, cols).
    pub fn cluster_patch_dims(&self) -> (usize, usize) {
        (
            self.patch_rows() / self.cluster_rows,
            self.patch_cols() / self.cluster_cols,
        )
    }

    pub fn patches_per_cluster(&self) -> usize {
        let (h, w) = self.cluster_patch_dims();
        h * w
    }

    /// Cluster extent in pixels as (height, width).
    pub fn cluster_pixel_dims(&self) -> (usize, usize) {
        (self.image_h / self.cluster_rows, self.image_w / self.cluster_cols)
    }

    pub fn cluster_of(&self, patch: usize) -> usize {
        let (r, c) = (patch / self.patch_cols(), patch % self.patch_cols());
        let (ch, cw) = self.cluster_patch_dims();
        (r / ch) * self.cluster_cols + c / cw
    }

    /// Cluster index for every patch, row-major.
    pub fn patch_cluster_map(&self) -> Vec<usize> {
        (0..self.num_patches()).map(|p| self.cluster_of(p)).collect()
    }

    /// Patch indices of one cluster, ascending.
    pub fn cluster_patches(&self, cluster: usize) -> Vec<usize> {
        let (ch, cw) = self.cluster_patch_dims();
        let (tr, tc) = (cluster / self.cluster_cols, cluster % self.cluster_cols);
        let mut out = Vec::with_capacity(ch * cw);
        for r in tr * ch..(tr + 1) * ch {
            for c in tc * cw..(tc + 1) * cw {
                out.push(r * self.patch_cols() + c);
            }
        }
        out
    }
}

/// A visitation order over the clusters of a layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutedSequence {
    order: Vec<usize>,
}

impl PermutedSequence {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &c in &order {
            if c >= order.len() || seen[c] {
                return config_err(format!("{order:?} is not a permutation"));
            }
            seen[c] = true;
        }
        if order.is_empty() {
            return config_err("empty cluster order");
        }
        Ok(Self { order })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Position of every cluster within the order.
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len()];
        for (i, &c) in self.order.iter().enumerate() {
            rank[c] = i;
        }
        rank
    }

    pub fn check_layout(&self, layout: &ClusterLayout) -> Result<()> {
        if self.order.len() != layout.num_clusters() {
            return Err(Error::Shape(format!(
                "permutation over {} clusters does not match layout with {}",
                self.order.len(),
                layout.num_clusters()
            )));
        }
        Ok(())
    }

    /// Patch indices of clusters `order[0..k]`, in rank order.
    pub fn prefix_patches(&self, layout: &ClusterLayout, k: usize) -> Vec<usize> {
        self.order[..k]
            .iter()
            .flat_map(|&c| layout.cluster_patches(c))
            .collect()
    }
}

/// Draws a uniformly random order over `n` clusters.
pub fn sample_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<PermutedSequence> {
    if n == 0 {
        return config_err("cannot permute zero clusters");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(PermutedSequence { order })
}

/// Factors a cluster count into a (rows, cols) grid with rows <= cols and rows
/// as close to the square root as possible: 1 -> 1x1, 2 -> 1x2, 4 -> 2x2,
/// 14 -> 2x7, 16 -> 4x4.
pub fn cluster_grid_for(n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return config_err("cluster count must be positive");
    }
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && !n.is_multiple_of(rows) {
        rows -= 1;
    }
    Ok((rows, n / rows))
}
