//! Hierarchical partition of the pool.
//!
//! Scores are cut into `K` ordered strata (cumulative square-root frequency
//! rule, or a uniform threshold grid for PR curves). The strata become the
//! leaves, left to right, of a complete `b`-ary tree of depth `D` with
//! `b^D = K`. Nodes are stored in breadth-first order, so the leaves under
//! any node form a contiguous range.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default histogram resolution for [`csf_bin_edges`].
pub const DEFAULT_HIST_BINS: usize = 1024;

/// Stratum boundaries by the cumulative square-root frequency rule.
///
/// Scores are histogrammed into `hist_bins` equal-width cells over their
/// range; `√f` is accumulated and cut at `K − 1` equally spaced levels. Each
/// edge is the right boundary of the cell where a level is reached. A cell
/// that crosses several levels yields a single edge, so fewer than `K − 1`
/// edges come back when the score distribution is very lumpy.
pub fn csf_bin_edges(scores: &[f64], k: usize, hist_bins: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if k < 2 {
        return Err(Error::Config("CSF stratification needs K >= 2".into()));
    }
    if hist_bins == 0 {
        return Err(Error::Config("histogram needs at least one cell".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateStratification {
            requested: k,
            nonempty: 1,
        });
    }
    let width = (hi - lo) / hist_bins as f64;
    let mut freq = vec![0usize; hist_bins];
    for &s in scores {
        let cell = (((s - lo) / width) as usize).min(hist_bins - 1);
        freq[cell] += 1;
    }
    let nonempty = freq.iter().filter(|&&f| f > 0).count();
    if nonempty < k {
        return Err(Error::DegenerateStratification {
            requested: k,
            nonempty,
        });
    }
    let mut cumulative = Vec::with_capacity(hist_bins);
    let mut total = 0.0;
    for &f in &freq {
        total += libm::sqrt(f as f64);
        cumulative.push(total);
    }
    let mut edges: Vec<f64> = Vec::with_capacity(k - 1);
    let mut cell = 0;
    for level in 1..k {
        let target = total * level as f64 / k as f64;
        while cell < hist_bins && cumulative[cell] < target {
            cell += 1;
        }
        let edge = if cell + 1 == hist_bins { hi } else { lo + width * (cell + 1) as f64 };
        if edges.last().map_or(true, |&last| edge > last) && edge < hi {
            edges.push(edge);
        }
    }
    Ok(edges)
}

/// Block edges for a uniform threshold grid: every `bins_per_block`
/// neighboring grid cells form one block. Grid cell `j` is `[τ_j, τ_{j+1})`.
pub fn grid_block_edges(thresholds: &[f64], bins_per_block: usize) -> Result<Vec<f64>> {
    if bins_per_block == 0 || thresholds.is_empty() {
        return Err(Error::Config("grid partition needs thresholds and a positive block width".into()));
    }
    Ok(thresholds.iter().copied().skip(bins_per_block).step_by(bins_per_block).collect())
}

/// Maps every item to its stratum: the number of edges at or below its
/// score. Scores equal to an edge land in the higher block.
pub fn assign_blocks(raw_scores: &[f64], edges: &[f64]) -> Vec<usize> {
    debug_assert!(edges.windows(2).all(|w| w[0] <= w[1]), "edges must be ascending");
    raw_scores
        .iter()
        .map(|s| edges.partition_point(|e| e <= s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub depth: usize,
    /// Node indices of the children (empty for leaves).
    pub children: Range<usize>,
    /// Leaves reachable from this node.
    pub leaves: Range<usize>,
}

/// Complete `b`-ary tree of depth `D` with `K = b^D` leaves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionTree {
    branching: usize,
    depth: usize,
    nodes: Vec<TreeNode>,
    first_leaf: usize,
}

impl PartitionTree {
    pub fn new(k: usize, branching: usize, depth: usize) -> Result<Self> {
        let shape_err = Error::TreeShape {
            blocks: k,
            branching,
            depth,
        };
        if k == 0 || (depth > 0 && branching < 2) {
            return Err(shape_err);
        }
        let leaves = branching.checked_pow(depth as u32).ok_or_else(|| shape_err.clone())?;
        if leaves != k {
            return Err(shape_err);
        }
        let mut nodes = Vec::new();
        let mut level_start = 0;
        let mut level_len = 1;
        for d in 0..=depth {
            let span = k / level_len;
            for i in 0..level_len {
                let index = level_start + i;
                let children = if d == depth {
                    0..0
                } else {
                    let first = level_start + level_len + i * branching;
                    first..first + branching
                };
                let parent = (d > 0).then(|| {
                    let prev_start = level_start - level_len / branching;
                    prev_start + i / branching
                });
                debug_assert_eq!(nodes.len(), index);
                nodes.push(TreeNode {
                    parent,
                    depth: d,
                    children,
                    leaves: i * span..(i + 1) * span,
                });
            }
            level_start += level_len;
            level_len *= branching.max(1);
        }
        let first_leaf = nodes.len() - k;
        Ok(Self {
            branching,
            depth,
            nodes,
            first_leaf,
        })
    }

    /// Depth-1 tree with every block directly under the root.
    pub fn flat(k: usize) -> Result<Self> {
        if k == 1 {
            Self::new(1, 1, 0)
        } else {
            Self::new(k, k, 1)
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.len() - self.first_leaf
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node(&self, v: usize) -> &TreeNode {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Node index of leaf `k`.
    pub fn leaf_node(&self, k: usize) -> usize {
        self.first_leaf + k
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        v >= self.first_leaf
    }

    /// `δ_ν(k)`: whether node `v` lies on the root-to-leaf-`k` path.
    pub fn on_path(&self, v: usize, k: usize) -> bool {
        self.nodes[v].leaves.contains(&k)
    }

    /// Non-root nodes on the path from the root to leaf `k`, top down.
    pub fn path(&self, k: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.depth);
        let mut v = self.leaf_node(k);
        while let Some(p) = self.nodes[v].parent {
            path.push(v);
            v = p;
        }
        path.reverse();
        path
    }

    /// Internal nodes, root first (breadth-first order).
    pub fn internal_nodes(&self) -> Range<usize> {
        0..self.first_leaf
    }
}

/// Item → block assignment plus the tree over blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    tree: PartitionTree,
    block_of: Vec<usize>,
    block_sizes: Vec<usize>,
}

impl Partition {
    pub fn new(tree: PartitionTree, block_of: Vec<usize>) -> Result<Self> {
        let k = tree.n_leaves();
        let mut block_sizes = vec![0; k];
        for (i, &b) in block_of.iter().enumerate() {
            if b >= k {
                return Err(Error::BlockMap(alloc::format!(
                    "item {i} assigned to block {b}, tree has {k} leaves"
                )));
            }
            block_sizes[b] += 1;
        }
        if block_of.is_empty() {
            return Err(Error::EmptyInput("block map"));
        }
        Ok(Self {
            tree,
            block_of,
            block_sizes,
        })
    }

    /// Stratifies raw scores by CSF and fills a `b`-ary tree of depth `D`.
    pub fn from_scores_csf(raw_scores: &[f64], branching: usize, depth: usize, hist_bins: usize) -> Result<Self> {
        let k = if depth == 0 { 1 } else {
            branching.checked_pow(depth as u32).ok_or(Error::TreeShape {
                blocks: 0,
                branching,
                depth,
            })?
        };
        let tree = PartitionTree::new(k, branching, depth)?;
        let edges = if k == 1 { Vec::new() } else { csf_bin_edges(raw_scores, k, hist_bins)? };
        Self::new(tree, assign_blocks(raw_scores, &edges))
    }

    pub fn tree(&self) -> &PartitionTree {
        &self.tree
    }

    pub fn n_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn n_items(&self) -> usize {
        self.block_of.len()
    }

    #[inline]
    pub fn block_of(&self, item: usize) -> usize {
        self.block_of[item]
    }

    pub fn block_map(&self) -> &[usize] {
        &self.block_of
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        self.block_of
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == k).then_some(i))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csf_two_clusters() {
        let scores = [0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.9];
        let edges = csf_bin_edges(&scores, 2, 16).unwrap();
        assert_eq!(edges.len(), 1);
        assert!(edges[0] > 0.1 && edges[0] <= 0.9);
        assert_eq!(assign_blocks(&scores, &edges), vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn csf_identical_scores_degenerate() {
        let err = csf_bin_edges(&[0.3; 10], 2, 1024).unwrap_err();
        assert!(matches!(err, Error::DegenerateStratification { requested: 2, nonempty: 1 }));
    }

    #[test]
    fn csf_uniform_scores_equal_width() {
        let n = 100_000;
        let scores: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let edges = csf_bin_edges(&scores, 4, 1024).unwrap();
        assert_eq!(edges.len(), 3);
        for (e, want) in edges.iter().zip([0.25, 0.5, 0.75]) {
            assert!((e - want).abs() < 2.0 / 1024.0, "{e} vs {want}");
        }
    }

    #[test]
    fn tie_goes_to_higher_block() {
        assert_eq!(assign_blocks(&[0.2, 0.7, 0.5], &[0.5]), vec![0, 1, 1]);
    }

    #[test]
    fn binary_tree_structure() {
        let t = PartitionTree::new(4, 2, 2).unwrap();
        assert_eq!(t.n_nodes(), 7);
        assert_eq!(t.node(1).leaves, 0..2);
        assert_eq!(t.node(2).leaves, 2..4);
        assert_eq!(t.node(0).children, 1..3);
        assert_eq!(t.node(1).children, 3..5);
        assert_eq!(t.path(0), vec![1, 3]);
        assert_eq!(t.path(3), vec![2, 6]);
        assert_eq!(t.node(6).parent, Some(2));
    }

    #[test]
    fn flat_tree_paths() {
        let t = PartitionTree::new(256, 256, 1).unwrap();
        assert_eq!(t.n_nodes(), 257);
        for k in [0, 17, 255] {
            assert_eq!(t.path(k), vec![t.leaf_node(k)]);
            for v in 1..t.n_nodes() {
                assert_eq!(t.on_path(v, k), v == t.leaf_node(k));
            }
        }
    }

    #[test]
    fn depth_three_paths() {
        let t = PartitionTree::new(8, 2, 3).unwrap();
        for k in 0..8 {
            let path = t.path(k);
            assert_eq!(path.len(), 3);
            assert_eq!(path.iter().filter(|&&v| t.on_path(v, k)).count(), 3);
            let on: usize = (1..t.n_nodes()).filter(|&v| t.on_path(v, k)).count();
            assert_eq!(on, 3);
        }
    }

    #[test]
    fn shape_errors() {
        assert!(PartitionTree::new(6, 2, 2).is_err());
        assert!(PartitionTree::new(4, 1, 2).is_err());
        let single = PartitionTree::new(1, 2, 0).unwrap();
        assert_eq!(single.n_leaves(), 1);
        assert!(single.path(0).is_empty());
    }

    #[test]
    fn grid_blocks_of_four() {
        let grid: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let edges = grid_block_edges(&grid, 4).unwrap();
        assert_eq!(edges.len(), 3);
        let blocks = assign_blocks(&grid, &edges);
        assert_eq!(blocks.iter().max(), Some(&3));
        assert_eq!(blocks.iter().filter(|&&b| b == 0).count(), 4);
    }
}
