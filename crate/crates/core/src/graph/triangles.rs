use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_split_substructures, DatasetSplit, Graph, DEFAULT_DEGREE_CAP};
use crate::error::{Error, Result};

/// Exact triangle count, `trace(A^3) / 6`, in integer arithmetic.
pub fn count_triangles(g: &Graph) -> u64 {
    let m = g.num_nodes();
    let mut adj = vec![0u64; m * m];
    for &(u, v) in g.edges() {
        adj[u * m + v] = 1;
        adj[v * m + u] = 1;
    }
    // trace(A^3) = sum_ij (A^2)_ij * A_ji
    let mut trace = 0u64;
    for i in 0..m {
        for j in 0..m {
            if adj[j * m + i] == 0 {
                continue;
            }
            let paths: u64 = (0..m).map(|k| adj[i * m + k] * adj[k * m + j]).sum();
            trace += paths;
        }
    }
    trace / 6
}

/// Parameters of the synthetic triangle-counting benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct TrianglesConfig {
    pub num_classes: usize,
    pub graphs_per_class: usize,
    /// Inclusive node-count range.
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub edge_prob: f64,
    pub seed: u64,
    /// Random graphs drawn per class before giving up.
    pub attempt_budget: usize,
    /// Number of classes, chosen by a seeded shuffle, assigned to the test
    /// split. Defaults to `floor(0.4 * num_classes)`, i.e. 6 train / 4 test for 10.
    pub test_classes: Option<usize>,
    pub degree_cap: usize,
}

impl Default for TrianglesConfig {
    fn default() -> Self {
        TrianglesConfig {
            num_classes: 10,
            graphs_per_class: 50,
            min_nodes: 6,
            max_nodes: 20,
            edge_prob: 0.25,
            seed: 0,
            attempt_budget: 1_000_000,
            test_classes: None,
            degree_cap: DEFAULT_DEGREE_CAP,
        }
    }
}

/// Rejection-samples Erdős–Rényi graphs into classes `1..=num_classes` by
/// exact triangle count. Every graph carries a seeded two-way node split as
/// its substructures.
pub fn generate_triangles_dataset(cfg: &TrianglesConfig) -> Result<DatasetSplit> {
    if cfg.num_classes == 0 || cfg.num_classes > 10 {
        return Err(Error::Config(format!("num_classes must be in 1..=10, got {}", cfg.num_classes)));
    }
    if cfg.min_nodes < 2 || cfg.min_nodes > cfg.max_nodes {
        return Err(Error::Config(format!(
            "node range [{}, {}] must satisfy 2 <= min <= max",
            cfg.min_nodes, cfg.max_nodes
        )));
    }
    if !(cfg.edge_prob > 0.0 && cfg.edge_prob < 1.0) {
        return Err(Error::Config(format!("edge_prob must be in (0, 1), got {}", cfg.edge_prob)));
    }
    let test_classes = cfg.test_classes.unwrap_or(cfg.num_classes * 4 / 10);
    if test_classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "{test_classes} test classes requested out of {}",
            cfg.num_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buckets: Vec<Vec<Graph>> = vec![Vec::new(); cfg.num_classes];
    let mut remaining = cfg.num_classes * cfg.graphs_per_class;
    let budget = cfg.attempt_budget.saturating_mul(cfg.num_classes);
    let mut attempts = 0usize;

    while remaining > 0 {
        if attempts == budget {
            let class = buckets.iter().position(|b| b.len() < cfg.graphs_per_class).unwrap() + 1;
            return Err(Error::Dataset(format!(
                "class {class} unreachable: {attempts} attempts with nodes [{}, {}], edge_prob {}",
                cfg.min_nodes, cfg.max_nodes, cfg.edge_prob
            )));
        }
        attempts += 1;

        let m = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
        let mut edges = Vec::new();
        for u in 0..m {
            for v in u + 1..m {
                if rng.random_bool(cfg.edge_prob) {
                    edges.push((u, v));
                }
            }
        }
        let split_seed: u64 = rng.random();
        let probe = Graph::new(String::new(), 0, m, &edges, None, cfg.degree_cap)?;
        let t = count_triangles(&probe) as usize;
        if t == 0 || t > cfg.num_classes || buckets[t - 1].len() == cfg.graphs_per_class {
            continue;
        }
        let idx = buckets[t - 1].len();
        let mut g = Graph::new(format!("tri-{t}-{idx}"), t as i64, m, &edges, None, cfg.degree_cap)?;
        let (a, b) = random_split_substructures(&g, split_seed)?;
        g = g.with_substructures(vec![a, b])?;
        buckets[t - 1].push(g);
        remaining -= 1;
    }

    // Seeded class partition, drawn after sampling so graphs do not depend on it.
    let mut order: Vec<usize> = (0..cfg.num_classes).collect();
    order.shuffle(&mut rng);
    let test_set: Vec<usize> = order[..test_classes].to_vec();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, graphs) in buckets.into_iter().enumerate() {
        if test_set.contains(&c) {
            test.extend(graphs);
        } else {
            train.extend(graphs);
        }
    }
    DatasetSplit::new(train, Vec::new(), test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::write_dataset;

    fn complete(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        Graph::new("k", 0, n, &edges, None, 16).unwrap()
    }

    #[test]
    fn known_counts() {
        assert_eq!(count_triangles(&complete(3)), 1);
        assert_eq!(count_triangles(&complete(4)), 4);
        let path = Graph::new("p", 0, 4, &[(0, 1), (1, 2), (2, 3)], None, 16).unwrap();
        assert_eq!(count_triangles(&path), 0);
    }

    #[test]
    fn single_class_single_graph() {
        let cfg = TrianglesConfig {
            num_classes: 1,
            graphs_per_class: 1,
            ..Default::default()
        };
        let ds = generate_triangles_dataset(&cfg).unwrap();
        assert_eq!(ds.len(), 1);
        let g = &ds.train[0];
        assert_eq!(g.label, 1);
        assert_eq!(count_triangles(g), 1);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = TrianglesConfig {
            num_classes: 4,
            graphs_per_class: 5,
            seed: 11,
            ..Default::default()
        };
        let a = write_dataset(&generate_triangles_dataset(&cfg).unwrap()).unwrap();
        let b = write_dataset(&generate_triangles_dataset(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreachable_class_is_named() {
        let cfg = TrianglesConfig {
            num_classes: 3,
            graphs_per_class: 1,
            min_nodes: 3,
            max_nodes: 3,
            attempt_budget: 200,
            ..Default::default()
        };
        // three nodes hold at most one triangle
        let err = generate_triangles_dataset(&cfg).unwrap_err().to_string();
        assert!(err.contains("class 2"), "{err}");
    }

    #[test]
    fn default_split_is_six_four() {
        let cfg = TrianglesConfig {
            graphs_per_class: 2,
            ..Default::default()
        };
        let ds = generate_triangles_dataset(&cfg).unwrap();
        assert_eq!(ds.class_inventory(crate::graph::SplitName::Train).len(), 6);
        assert_eq!(ds.class_inventory(crate::graph::SplitName::Test).len(), 4);
    }
}
