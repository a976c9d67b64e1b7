//! Graphs, datasets and episode sampling.

mod dataset;
mod episode;
mod substructure;
mod triangles;

pub use dataset::{parse_dataset, parse_dataset_str, write_dataset, DatasetSplit, SplitName};
pub use episode::{sample_episode, ClassPool, EpisodeTask};
pub use substructure::{ensure_substructures, random_split_substructures};
pub use triangles::{count_triangles, generate_triangles_dataset, TrianglesConfig};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_DEGREE_CAP: usize = 16;

/// Undirected simple graph with node features and a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub id: String,
    pub label: i64,
    num_nodes: usize,
    /// Sorted, each edge once with `u < v`.
    edges: Vec<(usize, usize)>,
    features: Tensor,
    /// Features were given explicitly rather than derived from degrees.
    explicit_features: bool,
    substructures: Option<Vec<Vec<usize>>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Each edge must appear once
    /// (in either orientation) and must not be a self loop. When `features`
    /// is `None`, rows are one-hot node degrees clipped to `degree_cap`.
    pub fn new(
        id: impl Into<String>,
        label: i64,
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Option<Tensor>,
        degree_cap: usize,
    ) -> Result<Self> {
        let id = id.into();
        if num_nodes == 0 {
            return Err(Error::Graph(format!("{id}: num_nodes must be positive")));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Graph(format!("{id}: edge ({u}, {v}) out of range for {num_nodes} nodes")));
            }
            if u == v {
                return Err(Error::Graph(format!("{id}: self loop on node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Graph(format!(
                "{id}: asymmetric edge list, edge ({}, {}) listed more than once",
                w[0].0, w[0].1
            )));
        }

        let explicit_features = features.is_some();
        let features = match features {
            Some(f) => {
                if f.dims2().map(|(r, _)| r) != Some(num_nodes) {
                    return Err(Error::Graph(format!(
                        "{id}: features shape {:?} does not have {num_nodes} rows",
                        f.shape()
                    )));
                }
                if !f.is_finite() {
                    return Err(Error::Graph(format!("{id}: non-finite feature")));
                }
                f
            }
            None => degree_one_hot(num_nodes, &canon, degree_cap),
        };

        Ok(Graph {
            id,
            label,
            num_nodes,
            edges: canon,
            features,
            explicit_features,
            substructures: None,
        })
    }

    pub fn with_substructures(mut self, subs: Vec<Vec<usize>>) -> Result<Self> {
        if subs.is_empty() {
            return Err(Error::Graph(format!("{}: empty substructure list", self.id)));
        }
        for s in &subs {
            if s.is_empty() {
                return Err(Error::Graph(format!("{}: empty substructure", self.id)));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= self.num_nodes) {
                return Err(Error::Graph(format!(
                    "{}: substructure index {bad} out of range for {} nodes",
                    self.id, self.num_nodes
                )));
            }
        }
        self.substructures = Some(subs);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn has_explicit_features(&self) -> bool {
        self.explicit_features
    }

    pub fn substructures(&self) -> Option<&[Vec<usize>]> {
        self.substructures.as_deref()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Dense symmetric 0/1 adjacency with zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let m = self.num_nodes;
        let mut a = Tensor::zeros(&[m, m]);
        let d = a.data_mut();
        for &(u, v) in &self.edges {
            d[u * m + v] = 1.0;
            d[v * m + u] = 1.0;
        }
        a
    }

    /// Subgraph on `nodes` keeping every edge with both ends inside; feature
    /// rows are copied from the parent graph.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Graph> {
        let mut local = vec![usize::MAX; self.num_nodes];
        for (i, &n) in nodes.iter().enumerate() {
            if n >= self.num_nodes {
                return Err(Error::Graph(format!("{}: node {n} out of range", self.id)));
            }
            local[n] = i;
        }
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .filter(|(u, v)| local[*u] != usize::MAX && local[*v] != usize::MAX)
            .map(|&(u, v)| (local[u], local[v]))
            .collect();
        let cols = self.features.cols();
        let mut data = Vec::with_capacity(nodes.len() * cols);
        for &n in nodes {
            data.extend_from_slice(self.features.row_slice(n));
        }
        let features = Tensor::new(vec![nodes.len(), cols], data)?;
        Graph::new(self.id.clone(), self.label, nodes.len(), &edges, Some(features), cols)
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let m = self.num_nodes;
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Graph(format!("{}: not a permutation of {m} nodes", self.id)));
        }
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let cols = self.features.cols();
        let mut data = vec![0.0; m * cols];
        for old in 0..m {
            data[perm[old] * cols..(perm[old] + 1) * cols].copy_from_slice(self.features.row_slice(old));
        }
        let mut g = Graph::new(self.id.clone(), self.label, m, &edges, Some(Tensor::new(vec![m, cols], data)?), cols)?;
        g.explicit_features = self.explicit_features;
        if let Some(subs) = &self.substructures {
            g = g.with_substructures(subs.iter().map(|s| s.iter().map(|&n| perm[n]).collect()).collect())?;
        }
        Ok(g)
    }
}

fn degree_one_hot(m: usize, edges: &[(usize, usize)], cap: usize) -> Tensor {
    let cap = cap.max(1);
    let mut deg = vec![0usize; m];
    for &(u, v) in edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    let mut x = Tensor::zeros(&[m, cap]);
    for (i, d) in deg.into_iter().enumerate() {
        x.data_mut()[i * cap + d.min(cap - 1)] = 1.0;
    }
    x
}
