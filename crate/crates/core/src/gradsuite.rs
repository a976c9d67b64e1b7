//! Finite-difference checks over every differentiable building block: each
//! autodiff primitive, each attention kind, each GIN layer and the episode
//! loss through a full model. Used by `smfgin grad-check` and the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, AttentionKind, AttentionOutput, Pooling};
use crate::autodiff::{concat, grad_check_multi, Axis, Tape, Tensor, Var};
use crate::error::Result;
use crate::fusion::{weighted_sum, BranchConfig, SmfModel, Variant};
use crate::gin::{GinConfig, GinEncoder};
use crate::graph::{EpisodeTask, Graph};
use crate::params::{Bound, ParamStore};
use crate::train::episode_objective;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_POINTS: usize = 10;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    /// Worst relative error over all points.
    pub max_error: f64,
    pub points: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

type ScalarFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Fixed non-uniform weighting that turns any output into a scalar.
fn probe<'t>(out: &Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape.clone(), (0..n).map(|i| (1.3 * i as f64 + 0.2).cos()).collect())?;
    Ok(out.mul(&out.tape().constant(w))?.sum())
}

fn case_rng(seed: u64, case: usize, point: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((case as u64) << 16) | point as u64);
    rng
}

fn run_case(
    name: String,
    seed: u64,
    case: usize,
    points: usize,
    step: f64,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    f: &ScalarFn,
) -> Result<GradCase> {
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let inputs = make(&mut case_rng(seed, case, p));
        worst = worst.max(grad_check_multi(f, &inputs, step)?);
    }
    Ok(GradCase {
        name,
        max_error: worst,
        points,
    })
}

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, ScalarFn)> {
    fn shapes(s: &[&[usize]]) -> Vec<Vec<usize>> {
        s.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("matmul", shapes(&[&[2, 3], &[3, 4]]), false, Box::new(|_, v| probe(&v[0].matmul(&v[1])?))),
        ("add", shapes(&[&[2, 3], &[2, 3]]), false, Box::new(|_, v| probe(&v[0].add(&v[1])?))),
        ("sub", shapes(&[&[2, 3], &[2, 3]]), false, Box::new(|_, v| probe(&v[0].sub(&v[1])?))),
        ("mul", shapes(&[&[2, 3], &[2, 3]]), false, Box::new(|_, v| probe(&v[0].mul(&v[1])?))),
        ("mul_broadcast", shapes(&[&[2, 3], &[1, 1]]), false, Box::new(|_, v| probe(&v[0].mul(&v[1])?))),
        ("scale", shapes(&[&[2, 3]]), false, Box::new(|_, v| probe(&v[0].scale(-1.7)))),
        ("relu", shapes(&[&[3, 3]]), false, Box::new(|_, v| probe(&v[0].relu()))),
        ("tanh", shapes(&[&[2, 3]]), false, Box::new(|_, v| probe(&v[0].tanh()))),
        ("exp", shapes(&[&[2, 3]]), false, Box::new(|_, v| probe(&v[0].exp()))),
        ("log", shapes(&[&[2, 3]]), true, Box::new(|_, v| probe(&v[0].log()))),
        ("softmax_rows", shapes(&[&[2, 4]]), false, Box::new(|_, v| probe(&v[0].softmax_rows()?))),
        (
            "concat_rows",
            shapes(&[&[2, 3], &[1, 3]]),
            false,
            Box::new(|_, v| probe(&concat(&v[..2], Axis::Rows)?)),
        ),
        (
            "concat_cols",
            shapes(&[&[2, 3], &[2, 2]]),
            false,
            Box::new(|_, v| probe(&concat(&v[..2], Axis::Cols)?)),
        ),
        ("reduce_mean_rows", shapes(&[&[3, 4]]), false, Box::new(|_, v| probe(&v[0].reduce_mean(Axis::Rows)?))),
        ("reduce_mean_cols", shapes(&[&[3, 4]]), false, Box::new(|_, v| probe(&v[0].reduce_mean(Axis::Cols)?))),
        ("reduce_max_rows", shapes(&[&[3, 4]]), false, Box::new(|_, v| probe(&v[0].reduce_max(Axis::Rows)?))),
        ("reduce_max_cols", shapes(&[&[3, 4]]), false, Box::new(|_, v| probe(&v[0].reduce_max(Axis::Cols)?))),
        ("sum", shapes(&[&[2, 3]]), false, Box::new(|_, v| probe(&v[0].sum()))),
        ("l2_norm", shapes(&[&[2, 3]]), false, Box::new(|_, v| probe(&v[0].l2_norm()))),
        ("add_row", shapes(&[&[3, 4], &[1, 4]]), false, Box::new(|_, v| probe(&v[0].add_row(&v[1])?))),
        ("transpose", shapes(&[&[2, 3]]), false, Box::new(|_, v| probe(&v[0].transpose()?))),
        ("gather_rows", shapes(&[&[4, 3]]), false, Box::new(|_, v| probe(&v[0].gather_rows(&[2, 0, 2])?))),
        ("reshape", shapes(&[&[2, 3]]), false, Box::new(|_, v| probe(&v[0].reshape(&[3, 2])?))),
    ]
}

fn attention_kinds() -> [AttentionKind; 5] {
    [
        AttentionKind::LearnedWeight,
        AttentionKind::Vanilla,
        AttentionKind::SelfAttention { heads: 2, layers: 1 },
        AttentionKind::Mlp { depth: 2 },
        AttentionKind::Transformer { heads: 2, layers: 1 },
    ]
}

/// 5 nodes: a 4-cycle with a chord and a pendant vertex.
fn toy_graph(id: &str, label: i64) -> Graph {
    Graph::new(id, label, 5, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (3, 4)], None, 4)
        .expect("valid toy graph")
        .with_substructures(vec![vec![0, 1, 2], vec![3, 4]])
        .expect("valid substructures")
}

fn toy_graph_b(id: &str, label: i64) -> Graph {
    Graph::new(id, label, 4, &[(0, 1), (1, 2), (2, 3)], None, 4)
        .expect("valid toy graph")
        .with_substructures(vec![vec![0, 1], vec![2, 3]])
        .expect("valid substructures")
}

fn model_params<'t>(vars: &[Var<'t>], skip: usize) -> Bound<'t> {
    Bound::from_vars(vars[skip..].to_vec())
}

/// Runs every check; cases are independent of each other given `seed`.
pub fn gradient_suite(seed: u64, points: usize, step: f64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    let mut case = 0;

    for (name, shapes, positive, f) in primitive_cases() {
        let (lo, hi) = if positive { (0.5, 2.0) } else { (-1.0, 1.0) };
        let make = |rng: &mut ChaCha8Rng| shapes.iter().map(|s| random_tensor(rng, s, lo, hi)).collect();
        out.push(run_case(format!("primitive/{name}"), seed, case, points, step, make, &f)?);
        case += 1;
    }

    for kind in attention_kinds() {
        let (seq_len, dim) = (3, 4);
        let build = |rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let attn = Attention::new("a", kind, Pooling::Mean, seq_len, dim, dim, &mut store, rng)
                .expect("valid attention config");
            (attn, store)
        };
        let template = build(&mut ChaCha8Rng::seed_from_u64(0)).0;
        let f: ScalarFn = Box::new(move |_, v| {
            let p = model_params(v, seq_len);
            let out = match template.apply(&p, &v[..seq_len])? {
                AttentionOutput::Weights(w) => weighted_sum(&v[..seq_len], &w)?,
                AttentionOutput::Aggregated(h) => h,
            };
            probe(&out)
        });
        let make = |rng: &mut ChaCha8Rng| {
            let mut inputs: Vec<Tensor> = (0..seq_len).map(|_| random_tensor(rng, &[1, dim], -1.0, 1.0)).collect();
            let (_, store) = build(rng);
            // learned weights start at one; move them so the check is not at a special point
            inputs.extend(store.tensors().map(|t| {
                let n = t.numel();
                let noise = random_tensor(rng, t.shape(), -0.5, 0.5);
                Tensor::new(t.shape().to_vec(), (0..n).map(|i| t.data()[i] + noise.data()[i]).collect()).expect("same shape")
            }));
            inputs
        };
        out.push(run_case(format!("attention/{}", kind.name()), seed, case, points, step, make, &f)?);
        case += 1;
    }

    let gin = GinConfig {
        num_layers: 5,
        hidden_dim: 5,
        mlp_layers: 2,
        eps: 0.0,
        learn_eps: true,
        layers_used: vec![1, 2, 3, 4, 5],
    };
    let graph = toy_graph("gin", 0);
    for layer in 0..gin.num_layers {
        let build = |rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let enc = GinEncoder::new(&gin, graph.feature_dim(), &mut store, rng).expect("valid gin config");
            (enc, store)
        };
        let template = build(&mut ChaCha8Rng::seed_from_u64(0)).0;
        let g = graph.clone();
        let f: ScalarFn = Box::new(move |tape, v| {
            let p = model_params(v, 0);
            probe(&template.encode_layers(tape, &p, &g)?[layer])
        });
        let make = |rng: &mut ChaCha8Rng| {
            let (_, mut store) = build(rng);
            // eps starts at zero; perturb it like every other weight
            store.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1)));
            store.tensors().cloned().collect()
        };
        out.push(run_case(format!("gin/layer{}", layer + 1), seed, case, points, step, make, &f)?);
        case += 1;
    }

    let graphs = vec![toy_graph("s0", 0), toy_graph_b("s1", 1), toy_graph_b("q0", 0), toy_graph("q1", 1)];
    let task = EpisodeTask {
        classes: vec![0, 1],
        support: vec![vec![0], vec![1]],
        query: vec![vec![2], vec![3]],
    };
    let small = GinConfig {
        num_layers: 3,
        hidden_dim: 4,
        layers_used: vec![2, 3],
        ..Default::default()
    };
    let loss_models = [
        ("base", BranchConfig::base(small.clone())),
        (
            "full",
            BranchConfig {
                variant: Variant::Full,
                global_attn: Some(AttentionKind::Vanilla),
                local_attn: Some(AttentionKind::SelfAttention { heads: 2, layers: 1 }),
                ..BranchConfig::base(small)
            },
        ),
    ];
    for (name, cfg) in loss_models {
        let build = |rng: &mut ChaCha8Rng| {
            let mut store = ParamStore::new();
            let model = SmfModel::new(&cfg, 4, &mut store, rng).expect("valid branch config");
            (model, store)
        };
        let template = build(&mut ChaCha8Rng::seed_from_u64(0)).0;
        let (graphs, task) = (graphs.clone(), task.clone());
        let f: ScalarFn = Box::new(move |tape, v| {
            let p = model_params(v, 0);
            episode_objective(&template, tape, &p, &graphs, &task)
        });
        let make = |rng: &mut ChaCha8Rng| build(rng).1.tensors().cloned().collect();
        out.push(run_case(format!("episode_loss/{name}"), seed, case, points, step, make, &f)?);
        case += 1;
    }
    Ok(out)
}
