//! Undirected node-classification graphs and their client partitions.

mod io;
mod partition;
mod sbm;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

pub use io::{load_graph, save_graph, GraphFormat, LoadReport};
pub use partition::{dirichlet_partition, expand_l_hop, CrossEdge, PartitionPlan};
pub use sbm::{generate_sbm, SbmParams};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class 10/20/70 train/val/test split. Each mask is sorted.
pub fn stratified_masks(labels: &[usize], n_classes: usize, seed: u64) -> Masks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masks = Masks::default();
    for c in 0..n_classes {
        let mut nodes: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        nodes.shuffle(&mut rng);
        let n_train = (nodes.len() as f64 * 0.1).round() as usize;
        let n_val = (nodes.len() as f64 * 0.2).round() as usize;
        masks.train.extend_from_slice(&nodes[..n_train]);
        masks.val.extend_from_slice(&nodes[n_train..n_train + n_val]);
        masks.test.extend_from_slice(&nodes[n_train + n_val..]);
    }
    masks.train.sort_unstable();
    masks.val.sort_unstable();
    masks.test.sort_unstable();
    masks
}

/// Node-classification graph. Edges are stored once as `(u, v)` with `u < v`;
/// self-loops are a model-level concern and never stored.
#[derive(Clone, Debug)]
pub struct Graph {
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    masks: Masks,
}

impl Graph {
    /// Validates and canonicalizes the inputs: edges are deduplicated,
    /// self-loops dropped, and feature rows with norm above one rescaled to
    /// unit norm.
    pub fn new(
        mut features: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        masks: Masks,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return invalid(format!("{} labels for {} nodes", labels.len(), n));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return invalid(format!("label {bad} out of range for {n_classes} classes"));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return invalid(format!("edge ({u}, {v}) references a node outside 0..{n}"));
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for nb in &mut adjacency {
            nb.sort_unstable();
        }

        let mut seen = vec![false; n];
        for &i in masks.train.iter().chain(&masks.val).chain(&masks.test) {
            if i >= n {
                return invalid(format!("mask references node {i} outside 0..{n}"));
            }
            if seen[i] {
                return invalid(format!("node {i} appears in more than one mask"));
            }
            seen[i] = true;
        }

        let d = features.cols();
        for r in 0..n {
            let row = &mut features.data_mut()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        if !features.all_finite() {
            return invalid("non-finite feature value");
        }

        Ok(Graph { features, labels, n_classes, edges, adjacency, masks })
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row_slice(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    /// Neighborhood used by attention: sorted neighbors, plus `i` itself when
    /// `self_loops` is set.
    pub fn attention_neighbors(&self, i: usize, self_loops: bool) -> Vec<usize> {
        let mut nb = self.adjacency[i].clone();
        if self_loops {
            let pos = nb.partition_point(|&j| j < i);
            nb.insert(pos, i);
        }
        nb
    }

    /// Per-class node counts.
    pub fn class_histogram(&self, nodes: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for i in nodes {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Copy of the graph with some edges removed.
    pub fn without_edges(&self, keep: impl Fn(usize, usize) -> bool) -> Graph {
        let edges: Vec<(usize, usize)> = self.edges.iter().copied().filter(|&(u, v)| keep(u, v)).collect();
        Graph::new(self.features.clone(), self.labels.clone(), self.n_classes, edges, self.masks.clone())
            .expect("subset of a valid graph is valid")
    }

    /// Signed feature hashing into `dim` buckets: input coordinate `k` adds
    /// `±x_k` to bucket `h(k)`, with buckets and signs drawn from `seed`.
    /// Rows are rescaled into the unit ball as usual.
    pub fn hashed_features(&self, dim: usize, seed: u64) -> Result<Graph> {
        if dim == 0 {
            return invalid("hash dimension must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map: Vec<(usize, f64)> = (0..self.feature_dim())
            .map(|_| (rng.random_range(0..dim), if rng.random_bool(0.5) { 1.0 } else { -1.0 }))
            .collect();
        let n = self.n_nodes();
        let mut out = Tensor::zeros(n, dim);
        for i in 0..n {
            for (&x, &(b, s)) in self.feature(i).iter().zip(&map) {
                if x != 0.0 {
                    out.set(i, b, out.get(i, b) + s * x);
                }
            }
        }
        Graph::new(out, self.labels.clone(), self.n_classes, self.edges.iter().copied(), self.masks.clone())
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.n_nodes();
        if perm.len() != n {
            return invalid("permutation length differs from node count");
        }
        let mut inv = vec![usize::MAX; n];
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inv[new] != usize::MAX {
                return invalid("not a permutation");
            }
            inv[new] = old;
        }
        let features = self.features.select_rows(&inv);
        let labels = inv.iter().map(|&o| self.labels[o]).collect();
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v]));
        let map = |v: &Vec<usize>| v.iter().map(|&i| perm[i]).collect();
        let masks = Masks { train: map(&self.masks.train), val: map(&self.masks.val), test: map(&self.masks.test) };
        Graph::new(features, labels, self.n_classes, edges, masks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Graph {
        let f = Tensor::matrix(3, 2, vec![3.0, 4.0, 0.1, 0.2, 0.0, 0.0]).unwrap();
        Graph::new(f, vec![0, 1, 0], 2, [(0, 1), (1, 0), (1, 2), (2, 2)], Masks::default()).unwrap()
    }

    #[test]
    fn dedups_and_drops_self_loops() {
        let g = tiny();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(g.neighbors(1), &[0, 2]);
    }

    #[test]
    fn rows_scaled_to_unit_norm() {
        let g = tiny();
        assert!((g.feature(0)[0] - 0.6).abs() < 1e-15);
        // already inside the ball: untouched
        assert_eq!(g.feature(1), &[0.1, 0.2]);
    }

    #[test]
    fn rejects_bad_labels_and_edges() {
        let f = Tensor::zeros(2, 1);
        assert!(Graph::new(f.clone(), vec![0, 2], 2, [], Masks::default()).is_err());
        assert!(Graph::new(f.clone(), vec![0, 1], 2, [(0, 5)], Masks::default()).is_err());
        let overlapping = Masks { train: vec![0], val: vec![0], test: vec![] };
        assert!(Graph::new(f, vec![0, 1], 2, [], overlapping).is_err());
    }

    #[test]
    fn stratified_split_proportions() {
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let m = stratified_masks(&labels, 2, 3);
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (20, 40, 140));
        let train_c0 = m.train.iter().filter(|&&i| labels[i] == 0).count();
        assert_eq!(train_c0, 10);
        assert_eq!(m, stratified_masks(&labels, 2, 3));
    }

    #[test]
    fn attention_neighbors_include_self_in_order() {
        let g = tiny();
        assert_eq!(g.attention_neighbors(1, true), vec![0, 1, 2]);
        assert_eq!(g.attention_neighbors(1, false), vec![0, 2]);
    }

    #[test]
    fn hashed_features_keep_topology_and_norms() {
        let g = tiny();
        let h = g.hashed_features(4, 7).unwrap();
        assert_eq!(h.feature_dim(), 4);
        assert_eq!(h.edges(), g.edges());
        assert!((0..3).all(|i| h.feature(i).iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12));
        assert_eq!(h.features(), g.hashed_features(4, 7).unwrap().features());
        assert!(h.feature(2).iter().all(|&v| v == 0.0));
        assert!(g.hashed_features(0, 7).is_err());
    }
}
