//! Immutable attributed graph with CSR adjacency.

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::{SparseMatrix, Tensor};
use crate::Real;

/// Default ε in `C(i) = ln(deg(i) + ε)`.
pub const DEFAULT_CENTRALITY_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("edge ({u}, {v}) references a node outside 0..{n}")]
    NodeOutOfRange { u: usize, v: usize, n: usize },
    #[error("{labels} labels for {nodes} feature rows")]
    LabelCount { labels: usize, nodes: usize },
    #[error("feature entry ({row}, {col}) is not finite")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("class {0} appears in more than one split")]
    OverlappingSplits(usize),
    #[error("class {0} has labelled nodes but belongs to no split")]
    UnassignedClass(usize),
    #[error("split references class {0}, which has no labelled nodes")]
    UnknownClass(usize),
}

/// How the input edge list is interpreted for centrality.
///
/// Message passing always uses the symmetrised adjacency; the flag only
/// selects undirected degree versus in-degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EdgeDirection {
    #[default]
    Undirected,
    Directed,
}

/// Class-level split into disjoint meta-train / validation / meta-test sets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplits {
    pub fn new(train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Self {
        Self { train, val, test }
    }

    fn normalized(&self) -> Self {
        let norm = |v: &[usize]| {
            let mut v = v.to_vec();
            v.sort_unstable();
            v.dedup();
            v
        };
        Self {
            train: norm(&self.train),
            val: norm(&self.val),
            test: norm(&self.test),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().chain(&self.val).chain(&self.test).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Attributed network `G = (A, X)` with labels and class splits.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    edges: Vec<(usize, usize)>,
    adjacency: SparseMatrix<f64>,
    features: Tensor<f64>,
    labels: Vec<usize>,
    splits: ClassSplits,
    degree: Vec<usize>,
    class_members: Vec<Vec<usize>>,
    dropped_self_loops: usize,
    direction: EdgeDirection,
}

impl AttributedGraph {
    /// Builds an undirected graph. Duplicate and reversed edges collapse;
    /// self-loops are dropped (and counted).
    pub fn build(
        edges: &[(usize, usize)],
        features: Tensor<f64>,
        labels: Vec<usize>,
        splits: ClassSplits,
    ) -> Result<Self, GraphError> {
        Self::build_with(edges, features, labels, splits, EdgeDirection::Undirected)
    }

    pub fn build_with(
        edges: &[(usize, usize)],
        features: Tensor<f64>,
        labels: Vec<usize>,
        splits: ClassSplits,
        direction: EdgeDirection,
    ) -> Result<Self, GraphError> {
        let n = features.rows();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if labels.len() != n {
            return Err(GraphError::LabelCount {
                labels: labels.len(),
                nodes: n,
            });
        }
        for r in 0..n {
            if let Some(c) = features.row(r).iter().position(|x| !x.is_finite()) {
                return Err(GraphError::NonFiniteFeature { row: r, col: c });
            }
        }

        let mut dropped = 0;
        let mut undirected = BTreeSet::new();
        let mut directed = BTreeSet::new();
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::NodeOutOfRange { u, v, n });
            }
            if u == v {
                dropped += 1;
                continue;
            }
            undirected.insert((u.min(v), u.max(v)));
            directed.insert((u, v));
        }
        if dropped > 0 {
            warn!("dropped {dropped} self-loop(s) from the edge list");
        }
        let edges: Vec<(usize, usize)> = undirected.into_iter().collect();

        let mut triplets = Vec::with_capacity(2 * edges.len());
        for &(u, v) in &edges {
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        let adjacency =
            SparseMatrix::from_triplets(n, n, &triplets).expect("edges validated in range");

        let degree = match direction {
            EdgeDirection::Undirected => (0..n).map(|i| adjacency.row(i).0.len()).collect(),
            EdgeDirection::Directed => {
                let mut d = vec![0; n];
                for &(_, v) in &directed {
                    d[v] += 1;
                }
                d
            }
        };

        let splits = splits.normalized();
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut class_members = vec![Vec::new(); num_classes];
        for (node, &c) in labels.iter().enumerate() {
            class_members[c].push(node);
        }
        let mut seen = BTreeSet::new();
        for c in splits.all() {
            if !seen.insert(c) {
                return Err(GraphError::OverlappingSplits(c));
            }
            if c >= num_classes || class_members[c].is_empty() {
                return Err(GraphError::UnknownClass(c));
            }
        }
        if let Some(c) = (0..num_classes).find(|&c| !class_members[c].is_empty() && !seen.contains(&c)) {
            return Err(GraphError::UnassignedClass(c));
        }

        Ok(Self {
            edges,
            adjacency,
            features,
            labels,
            splits,
            degree,
            class_members,
            dropped_self_loops: dropped,
            direction,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of undirected edges after deduplication.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// One past the largest class id.
    pub fn num_classes(&self) -> usize {
        self.class_members.len()
    }

    /// Deduplicated undirected edges as `(min, max)` pairs in sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &SparseMatrix<f64> {
        &self.adjacency
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &ClassSplits {
        &self.splits
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Undirected degree, or in-degree for directed input.
    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    /// Nodes carrying label `class`, ascending.
    pub fn class_members(&self, class: usize) -> &[usize] {
        self.class_members.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn dropped_self_loops(&self) -> usize {
        self.dropped_self_loops
    }

    pub fn direction(&self) -> EdgeDirection {
        self.direction
    }

    /// Copy of the graph with its labels replaced; the class structure and
    /// splits are rebuilt and validated.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self, GraphError> {
        let directed: Vec<(usize, usize)> = self.edges.clone();
        let mut g = Self::build_with(
            &directed,
            self.features.clone(),
            labels,
            self.splits.clone(),
            EdgeDirection::Undirected,
        )?;
        g.degree = self.degree.clone();
        g.direction = self.direction;
        g.dropped_self_loops = self.dropped_self_loops;
        Ok(g)
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalized_adjacency<T: Real>(g: &AttributedGraph) -> SparseMatrix<T> {
    let a = g.adjacency();
    let n = a.n_rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((a.row(i).0.len() + 1) as f64).sqrt())
        .collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(a.nnz() + n);
    let mut values = Vec::with_capacity(a.nnz() + n);
    offsets.push(0);
    for i in 0..n {
        let (cols, _) = a.row(i);
        let split = cols.partition_point(|&c| c < i);
        let row = cols[..split].iter().copied().chain([i]).chain(cols[split..].iter().copied());
        for j in row {
            indices.push(j);
            values.push(T::lit(inv_sqrt[i] * inv_sqrt[j]));
        }
        offsets.push(indices.len());
    }
    SparseMatrix::new(n, offsets, indices, values).expect("rows stay sorted")
}

/// `C(i) = ln(deg(i) + eps)`.
pub fn centrality(g: &AttributedGraph, eps: f64) -> Vec<f64> {
    g.degree().iter().map(|&d| (d as f64 + eps).ln()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)]) -> AttributedGraph {
        AttributedGraph::build(
            edges,
            Tensor::zeros(n, 1),
            vec![0; n],
            ClassSplits::new(vec![0], vec![], vec![]),
        )
        .unwrap()
    }

    #[test]
    fn single_edge_is_symmetric() {
        let g = graph(2, &[(0, 1)]);
        let a = g.adjacency();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 1), 1.0);
        assert_eq!(a.get(1, 0), 1.0);
    }

    #[test]
    fn duplicates_and_reversals_collapse() {
        let g = graph(2, &[(0, 1), (1, 0), (0, 1)]);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g, graph(2, &[(0, 1)]));
    }

    #[test]
    fn triangle_degrees() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(g.degree(), &[2, 2, 2]);
    }

    #[test]
    fn self_loops_are_dropped_and_counted() {
        let g = graph(3, &[(0, 0), (0, 1), (2, 2)]);
        assert_eq!(g.dropped_self_loops(), 2);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.adjacency().get(0, 0), 0.0);
        let a_hat: SparseMatrix<f64> = normalized_adjacency(&g);
        // re-added exactly once during normalisation
        assert!((a_hat.get(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(a_hat.get(2, 2), 1.0);
    }

    #[test]
    fn normalisation_examples() {
        let a: SparseMatrix<f64> = normalized_adjacency(&graph(1, &[]));
        assert_eq!(a.to_dense().as_slice(), &[1.0]);

        let a: SparseMatrix<f64> = normalized_adjacency(&graph(2, &[(0, 1)]));
        assert!(a.to_dense().as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let a: SparseMatrix<f64> = normalized_adjacency(&graph(3, &[(0, 1), (1, 2)]));
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(a.get(0, 2), 0.0);
    }

    #[test]
    fn regular_graphs_normalise_to_one_over_k_plus_one() {
        for k in [2usize, 3] {
            let n = k + 1;
            let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            let a: SparseMatrix<f64> = normalized_adjacency(&graph(n, &edges));
            // brute force over the dense matrix
            let dense = a.to_dense();
            for i in 0..n {
                for j in 0..n {
                    assert!((dense.get(i, j) - 1.0 / (k + 1) as f64).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn centrality_examples() {
        let g = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        let c = centrality(&g, 1e-6);
        assert!((c[0] - (3.0f64 + 1e-6).ln()).abs() < 1e-12);
        assert!((c[0] - 1.0986).abs() < 1e-4);
        let isolated = centrality(&graph(1, &[]), 1e-6);
        assert!((isolated[0] + 13.8155).abs() < 1e-4);
        // deg + eps == 1
        let c = centrality(&graph(1, &[]), 1.0);
        assert_eq!(c[0], 0.0);
    }

    #[test]
    fn directed_flag_uses_in_degree() {
        let g = AttributedGraph::build_with(
            &[(0, 1), (2, 1), (1, 0)],
            Tensor::zeros(3, 1),
            vec![0; 3],
            ClassSplits::new(vec![0], vec![], vec![]),
            EdgeDirection::Directed,
        )
        .unwrap();
        assert_eq!(g.degree(), &[1, 2, 0]);
        // message passing is still symmetric
        assert!(g.adjacency().is_symmetric(0.0));
        assert_eq!(g.num_edges(), 2);
    }

    #[test]
    fn construction_errors() {
        let splits = || ClassSplits::new(vec![0], vec![1], vec![]);
        let x = || Tensor::zeros(2, 1);
        assert_eq!(
            AttributedGraph::build(&[(0, 2)], x(), vec![0, 1], splits()),
            Err(GraphError::NodeOutOfRange { u: 0, v: 2, n: 2 })
        );
        assert_eq!(
            AttributedGraph::build(&[], x(), vec![0], splits()),
            Err(GraphError::LabelCount { labels: 1, nodes: 2 })
        );
        assert_eq!(
            AttributedGraph::build(&[], x(), vec![0, 1], ClassSplits::new(vec![0, 1], vec![1], vec![])),
            Err(GraphError::OverlappingSplits(1))
        );
        assert_eq!(
            AttributedGraph::build(&[], x(), vec![0, 1], ClassSplits::new(vec![0], vec![], vec![])),
            Err(GraphError::UnassignedClass(1))
        );
        assert_eq!(
            AttributedGraph::build(&[], x(), vec![0, 1], ClassSplits::new(vec![0], vec![1], vec![7])),
            Err(GraphError::UnknownClass(7))
        );
        let nan = Tensor::from_vec(2, 1, vec![0.0, f64::NAN]).unwrap();
        assert_eq!(
            AttributedGraph::build(&[], nan, vec![0, 1], splits()),
            Err(GraphError::NonFiniteFeature { row: 1, col: 0 })
        );
        assert_eq!(
            AttributedGraph::build(&[], Tensor::zeros(0, 3), vec![], splits()),
            Err(GraphError::Empty)
        );
    }
}
