//! Block-causal encoder masks and the decoder query schedule.
//!
//! One encoder pass under the block-causal mask computes the features of
//! every cluster prefix at once: a patch sees its own cluster and every
//! cluster ranked before it. Decoder queries are then laid out per
//! (kind, target cluster, prefix length) and restricted to the prefix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterLayout, PermutedSequence};
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotLabel {
    Patch(usize),
    Query { entry: usize, patch: usize },
}

/// Dense boolean attention mask; `allow(q, k)` means query slot `q` may read key slot `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
    row_labels: Vec<SlotLabel>,
    col_labels: Vec<SlotLabel>,
}

impl AttentionMask {
    pub fn from_fn(
        row_labels: Vec<SlotLabel>,
        col_labels: Vec<SlotLabel>,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let (rows, cols) = (row_labels.len(), col_labels.len());
        let mut allow = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                allow.push(f(q, k));
            }
        }
        Self {
            rows,
            cols,
            allow,
            row_labels,
            col_labels,
        }
    }

    /// Every query attends every key.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(
            (0..rows).map(SlotLabel::Patch).collect(),
            (0..cols).map(SlotLabel::Patch).collect(),
            |_, _| true,
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allow(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.cols..(q + 1) * self.cols]
    }

    pub fn row_labels(&self) -> &[SlotLabel] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[SlotLabel] {
        &self.col_labels
    }

    pub fn row_sum(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&a| a).count()
    }

    pub fn is_all_true(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Rows as `0`/`1` characters, one line per query slot.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for q in 0..self.rows {
            s.extend(self.row(q).iter().map(|&a| if a { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }
}

/// Block-causal self-attention mask over all patches of one image.
pub fn encoder_mask(layout: &ClusterLayout, perm: &PermutedSequence) -> Result<AttentionMask> {
    perm.check_layout(layout)?;
    let rank = perm.ranks();
    let cluster = layout.patch_cluster_map();
    let labels: Vec<SlotLabel> = (0..layout.num_patches()).map(SlotLabel::Patch).collect();
    Ok(AttentionMask::from_fn(labels.clone(), labels, |q, k| {
        rank[cluster[k]] <= rank[cluster[q]]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryKind {
    Gen,
    Dis,
}

/// Which visible clusters the discriminative decoder supervises per prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DisMode {
    /// Only the newest visible cluster of each prefix.
    Latest,
    /// Every visible cluster of every prefix.
    All,
    Off,
}

impl FromStr for DisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latest" => Ok(Self::Latest),
            "all" => Ok(Self::All),
            "off" => Ok(Self::Off),
            other => config_err(format!("unknown dis_mode `{other}` (latest|all|off)")),
        }
    }
}

impl fmt::Display for DisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Latest => "latest",
            Self::All => "all",
            Self::Off => "off",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryEntry {
    pub kind: QueryKind,
    pub target_cluster: usize,
    /// Number of visible clusters, `order[0..prefix_len]`.
    pub prefix_len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    pub entries: Vec<QueryEntry>,
    pub warnings: Vec<String>,
}

impl QuerySet {
    pub fn of_kind(&self, kind: QueryKind) -> QuerySet {
        QuerySet {
            entries: self.entries.iter().copied().filter(|e| e.kind == kind).collect(),
            warnings: Vec::new(),
        }
    }

    pub fn count(&self, kind: QueryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// One slot per (entry, patch of the entry's target cluster), entry-major.
    pub fn slots(&self, layout: &ClusterLayout) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .enumerate()
            .flat_map(|(i, e)| {
                layout
                    .cluster_patches(e.target_cluster)
                    .into_iter()
                    .map(move |p| (i, p))
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Lays out the generative and discriminative queries of one packed pass.
pub fn decoder_query_set(
    layout: &ClusterLayout,
    perm: &PermutedSequence,
    dis_mode: DisMode,
    gen_on: bool,
) -> Result<QuerySet> {
    perm.check_layout(layout)?;
    let order = perm.order();
    let n = order.len();
    let mut qs = QuerySet::default();
    if gen_on {
        if n == 1 {
            qs.warnings
                .push("single cluster: no prefix exists, generative queries skipped".into());
        }
        for (k, &target) in order.iter().enumerate().skip(1) {
            qs.entries.push(QueryEntry {
                kind: QueryKind::Gen,
                target_cluster: target,
                prefix_len: k,
            });
        }
    }
    match dis_mode {
        DisMode::Off => {}
        DisMode::Latest => {
            for k in 1..n {
                qs.entries.push(QueryEntry {
                    kind: QueryKind::Dis,
                    target_cluster: order[k - 1],
                    prefix_len: k,
                });
            }
        }
        DisMode::All => {
            for k in 1..n {
                for &target in &order[..k] {
                    qs.entries.push(QueryEntry {
                        kind: QueryKind::Dis,
                        target_cluster: target,
                        prefix_len: k,
                    });
                }
            }
        }
    }
    Ok(qs)
}

/// Mask from decoder query slots to encoder patch slots: a query with prefix
/// length `k` reads exactly the patches of `order[0..k]`.
pub fn query_attend_mask(qs: &QuerySet, layout: &ClusterLayout, perm: &PermutedSequence) -> Result<AttentionMask> {
    perm.check_layout(layout)?;
    let rank = perm.ranks();
    let cluster = layout.patch_cluster_map();
    let slots = qs.slots(layout);
    let rows = slots
        .iter()
        .map(|&(entry, patch)| SlotLabel::Query { entry, patch })
        .collect();
    let cols = (0..layout.num_patches()).map(SlotLabel::Patch).collect();
    Ok(AttentionMask::from_fn(rows, cols, |q, k| {
        rank[cluster[k]] < qs.entries[slots[q].0].prefix_len
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n_rows: usize, n_cols: usize, ppc_side: usize) -> ClusterLayout {
        ClusterLayout::new(n_rows * ppc_side, n_cols * ppc_side, 1, n_rows, n_cols).unwrap()
    }

    fn perm(order: &[usize]) -> PermutedSequence {
        PermutedSequence::new(order.to_vec()).unwrap()
    }

    #[test]
    fn two_clusters_identity() {
        let m = encoder_mask(&layout(1, 2, 1), &perm(&[0, 1])).unwrap();
        assert_eq!(m.to_grid(), "10\n11\n");
    }

    #[test]
    fn two_clusters_reversed() {
        let m = encoder_mask(&layout(1, 2, 1), &perm(&[1, 0])).unwrap();
        assert_eq!(m.to_grid(), "11\n01\n");
    }

    #[test]
    fn single_cluster_is_full() {
        let m = encoder_mask(&layout(1, 1, 3), &perm(&[0])).unwrap();
        assert!(m.is_all_true());
    }

    #[test]
    fn mismatched_perm_rejected() {
        assert!(encoder_mask(&layout(2, 2, 1), &perm(&[1, 0])).is_err());
        assert!(decoder_query_set(&layout(2, 2, 1), &perm(&[0]), DisMode::Latest, true).is_err());
    }

    #[test]
    fn within_cluster_attention_is_bidirectional() {
        let l = layout(2, 2, 2);
        let m = encoder_mask(&l, &perm(&[3, 1, 0, 2])).unwrap();
        for c in 0..4 {
            let ps = l.cluster_patches(c);
            for &a in &ps {
                for &b in &ps {
                    assert!(m.allow(a, b));
                }
            }
        }
    }

    #[test]
    fn identity_order_is_block_lower_triangular() {
        let l = layout(1, 4, 1);
        let m = encoder_mask(&l, &PermutedSequence::identity(4)).unwrap();
        assert_eq!(m.to_grid(), "1000\n1100\n1110\n1111\n");
    }

    #[test]
    fn all_mode_multiplicities() {
        let l = layout(2, 2, 1);
        let p = perm(&[2, 0, 3, 1]);
        let qs = decoder_query_set(&l, &p, DisMode::All, true).unwrap();
        assert_eq!(qs.count(QueryKind::Gen), 3);
        assert_eq!(qs.count(QueryKind::Dis), 6);
        let mult = |c: usize| {
            qs.entries
                .iter()
                .filter(|e| e.kind == QueryKind::Dis && e.target_cluster == c)
                .count()
        };
        assert_eq!((mult(2), mult(0), mult(3), mult(1)), (3, 2, 1, 0));
    }

    #[test]
    fn latest_mode_entries() {
        let l = layout(2, 2, 1);
        let p = perm(&[2, 0, 3, 1]);
        let qs = decoder_query_set(&l, &p, DisMode::Latest, false).unwrap();
        let got: Vec<(usize, usize)> = qs.entries.iter().map(|e| (e.target_cluster, e.prefix_len)).collect();
        assert_eq!(got, vec![(2, 1), (0, 2), (3, 3)]);
        assert!(qs.entries.iter().all(|e| e.kind == QueryKind::Dis));
    }

    #[test]
    fn two_clusters_either_mode() {
        let l = layout(1, 2, 1);
        let p = perm(&[1, 0]);
        for mode in [DisMode::Latest, DisMode::All] {
            let qs = decoder_query_set(&l, &p, mode, true).unwrap();
            assert_eq!(
                qs.entries,
                vec![
                    QueryEntry {
                        kind: QueryKind::Gen,
                        target_cluster: 0,
                        prefix_len: 1
                    },
                    QueryEntry {
                        kind: QueryKind::Dis,
                        target_cluster: 1,
                        prefix_len: 1
                    },
                ]
            );
        }
    }

    #[test]
    fn single_cluster_gen_warns() {
        let l = layout(1, 1, 2);
        let qs = decoder_query_set(&l, &perm(&[0]), DisMode::Latest, true).unwrap();
        assert!(qs.is_empty());
        assert_eq!(qs.warnings.len(), 1);
        let off = decoder_query_set(&l, &perm(&[0]), DisMode::Off, false).unwrap();
        assert!(off.warnings.is_empty());
    }

    #[test]
    fn gen_query_reads_only_prefix() {
        let l = layout(1, 2, 1);
        let p = perm(&[0, 1]);
        let qs = decoder_query_set(&l, &p, DisMode::Off, true).unwrap();
        let m = query_attend_mask(&qs, &l, &p).unwrap();
        assert_eq!(m.to_grid(), "10\n");
    }

    #[test]
    fn dis_all_entry_j0_k2() {
        let l = layout(2, 2, 1);
        let p = perm(&[1, 3, 0, 2]);
        let qs = decoder_query_set(&l, &p, DisMode::All, false).unwrap();
        // entries: k=1:(1); k=2:(1,3); k=3:(1,3,0)
        let idx = qs
            .entries
            .iter()
            .position(|e| e.prefix_len == 2 && e.target_cluster == 1)
            .unwrap();
        let m = query_attend_mask(&qs, &l, &p).unwrap();
        assert_eq!(m.row(idx), &[false, true, false, true]);
    }

    #[test]
    fn dis_latest_sees_own_cluster() {
        let l = layout(2, 2, 1);
        let p = perm(&[1, 3, 0, 2]);
        let qs = decoder_query_set(&l, &p, DisMode::Latest, false).unwrap();
        let m = query_attend_mask(&qs, &l, &p).unwrap();
        assert_eq!(qs.entries[2].target_cluster, 0);
        assert_eq!(m.row(2), &[true, true, false, true]);
    }

    mod props {
        use super::*;
        use crate::cluster::sample_permutation;
        use proptest::prelude::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn encoder_rows_follow_rank_rule(cr in 1usize..4, cc in 1usize..4, side in 1usize..3, seed in any::<u64>()) {
                let l = layout(cr, cc, side);
                let p = sample_permutation(l.num_clusters(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let m = encoder_mask(&l, &p).unwrap();
                let rank = p.ranks();
                for q in 0..l.num_patches() {
                    let rq = rank[l.cluster_of(q)];
                    prop_assert!(m.row_sum(q) >= l.patches_per_cluster());
                    prop_assert_eq!(m.row_sum(q), (rq + 1) * l.patches_per_cluster());
                }
            }

            #[test]
            fn gen_row_sums(cr in 1usize..4, cc in 1usize..4, side in 1usize..3, seed in any::<u64>()) {
                let l = layout(cr, cc, side);
                let p = sample_permutation(l.num_clusters(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let qs = decoder_query_set(&l, &p, DisMode::All, true).unwrap();
                let n = l.num_clusters();
                prop_assert_eq!(qs.count(QueryKind::Gen), n - 1);
                prop_assert_eq!(qs.count(QueryKind::Dis), n * (n - 1) / 2);
                let m = query_attend_mask(&qs, &l, &p).unwrap();
                let slots = qs.slots(&l);
                let rank = p.ranks();
                for (row, &(entry, _)) in slots.iter().enumerate() {
                    let e = qs.entries[entry];
                    prop_assert_eq!(m.row_sum(row), e.prefix_len * l.patches_per_cluster());
                    let target_visible = m.allow(row, l.cluster_patches(e.target_cluster)[0]);
                    match e.kind {
                        QueryKind::Gen => {
                            prop_assert!(!target_visible);
                            prop_assert_eq!(p.order()[e.prefix_len], e.target_cluster);
                        }
                        QueryKind::Dis => {
                            prop_assert!(target_visible);
                            prop_assert!(rank[e.target_cluster] < e.prefix_len);
                        }
                    }
                }
            }

            #[test]
            fn mask_equivariant_under_cluster_relabeling(n in 1usize..7, s1 in any::<u64>(), s2 in any::<u64>()) {
                // one patch per cluster, so relabeling clusters relabels key slots
                let l = layout(1, n, 1);
                let p = sample_permutation(n, &mut ChaCha8Rng::seed_from_u64(s1)).unwrap();
                let sigma = sample_permutation(n, &mut ChaCha8Rng::seed_from_u64(s2)).unwrap();
                let sigma = sigma.order();
                let relabeled = PermutedSequence::new(p.order().iter().map(|&c| sigma[c]).collect()).unwrap();
                let m = encoder_mask(&l, &p).unwrap();
                let m2 = encoder_mask(&l, &relabeled).unwrap();
                for q in 0..n {
                    for k in 0..n {
                        prop_assert_eq!(m.allow(q, k), m2.allow(sigma[q], sigma[k]));
                    }
                }
            }
        }
    }
}
