//! Browser bindings for a few toolkit operations. Every export returns a
//! JSON string; the `*_json` functions underneath are plain Rust so they can
//! be tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use smfgin::attention::{AttentionKind, AttentionOutput, Pooling};
use smfgin::autodiff::Tape;
use smfgin::fusion::{BranchConfig, SmfModel, Variant};
use smfgin::gin::GinConfig;
use smfgin::graph::{count_triangles, generate_triangles_dataset, Graph, SplitName, TrianglesConfig};
use smfgin::params::ParamStore;
use smfgin::train::{evaluate, train, RunConfig};
use smfgin::{Error, Result};

const DEGREE_CAP: usize = 16;
const MAX_NODES: u32 = 40;
const MAX_ITERATIONS: u32 = 300;

#[derive(Serialize, Deserialize)]
pub struct GraphView {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Serialize)]
struct RandomGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
    triangles: u64,
}

#[derive(Serialize)]
struct LayerAttention {
    kind: &'static str,
    layers: Vec<usize>,
    weights: Vec<f64>,
    embedding_dim: usize,
}

#[derive(Serialize)]
struct EpisodeDemo {
    loss_trace: Vec<f64>,
    best_val_acc: f64,
    best_step: usize,
    test_mean: f64,
    test_std: f64,
    test_tasks: usize,
    test_classes: Vec<i64>,
}

fn to_js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// Erdős–Rényi graph with its exact triangle count.
#[wasm_bindgen]
pub fn random_graph(num_nodes: u32, edge_prob: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(random_graph_json(num_nodes, edge_prob, seed))
}

/// Per-layer weights a freshly initialised global attention assigns to a graph.
#[wasm_bindgen]
pub fn layer_attention(graph_json: &str, kind: &str, seed: u32) -> std::result::Result<String, JsError> {
    to_js(layer_attention_json(graph_json, kind, seed))
}

/// Trains a small model on generated data and scores it on unseen classes.
#[wasm_bindgen]
pub fn episode_demo(iterations: u32, seed: u32) -> std::result::Result<String, JsError> {
    to_js(episode_demo_json(iterations, seed))
}

pub fn random_graph_json(num_nodes: u32, edge_prob: f64, seed: u32) -> Result<String> {
    if !(1..=MAX_NODES).contains(&num_nodes) {
        return Err(Error::Config(format!("node count must be in 1..={MAX_NODES}")));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::Config(format!("edge probability {edge_prob} outside [0, 1]")));
    }
    let m = num_nodes as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
    let edges: Vec<(usize, usize)> = (0..m)
        .flat_map(|u| (u + 1..m).map(move |v| (u, v)))
        .filter(|_| rng.random_bool(edge_prob))
        .collect();
    let g = Graph::new("demo", 0, m, &edges, None, DEGREE_CAP)?;
    Ok(serde_json::to_string(&RandomGraph {
        num_nodes: m,
        edges: g.edges().to_vec(),
        degrees: g.degrees(),
        triangles: count_triangles(&g),
    })?)
}

pub fn layer_attention_json(graph_json: &str, kind: &str, seed: u32) -> Result<String> {
    let view: GraphView = serde_json::from_str(graph_json)?;
    let g = Graph::new("demo", 0, view.num_nodes, &view.edges, None, DEGREE_CAP)?;
    let kind = AttentionKind::from_name(kind, 2, 1, 2)?;
    if !kind.produces_weights() {
        return Err(Error::Config(format!("{} attention aggregates instead of weighting layers", kind.name())));
    }
    let gin = GinConfig {
        hidden_dim: 16,
        ..Default::default()
    };
    let cfg = BranchConfig {
        variant: Variant::GlobalOnly,
        global_attn: Some(kind),
        pooling: Pooling::Mean,
        ..BranchConfig::base(gin)
    };
    let mut store = ParamStore::new();
    let model = SmfModel::new(&cfg, DEGREE_CAP, &mut store, &mut ChaCha8Rng::seed_from_u64(seed.into()))?;
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let layers = model.encoder.encode_layers(&tape, &p, &g)?;
    let attention = model.global.as_ref().expect("global-only model has a global attention");
    let AttentionOutput::Weights(w) = attention.apply(&p, &layers)? else {
        unreachable!("weight kinds return weights")
    };
    Ok(serde_json::to_string(&LayerAttention {
        kind: kind.name(),
        layers: cfg.gin.layers_used.clone(),
        weights: w.value().into_data(),
        embedding_dim: model.embedding_dim(),
    })?)
}

pub fn episode_demo_json(iterations: u32, seed: u32) -> Result<String> {
    if iterations > MAX_ITERATIONS {
        return Err(Error::Config(format!("at most {MAX_ITERATIONS} iterations in the browser")));
    }
    let data = generate_triangles_dataset(&TrianglesConfig {
        num_classes: 6,
        graphs_per_class: 20,
        max_nodes: 14,
        seed: seed.into(),
        test_classes: Some(2),
        ..Default::default()
    })?;
    let cfg = RunConfig {
        n: 2,
        k: 3,
        q: 4,
        hidden_dim: 16,
        num_layers: 3,
        iterations: iterations as usize,
        validate_every: 10,
        val_tasks: 20,
        seed: seed.into(),
        ..Default::default()
    };
    let ck = train(&cfg, &data)?;
    let test = data.graphs(SplitName::Test);
    let report = evaluate(&ck, test, 100, seed.into())?.report;
    let branch = &ck.branches[0];
    Ok(serde_json::to_string(&EpisodeDemo {
        loss_trace: branch.loss_trace.clone(),
        best_val_acc: branch.best_val_acc,
        best_step: branch.best_step,
        test_mean: report.mean,
        test_std: report.std,
        test_tasks: report.tasks,
        test_classes: data.class_inventory(SplitName::Test).into_keys().collect(),
    })?)
}
