//! Episodic training of one or more branches.
//!
//! Each training step embeds every graph of the episode on its own tape (in
//! parallel), evaluates the prototype loss on a small tape whose leaves are
//! those embeddings, then pushes the embedding gradients back through each
//! graph tape. The result equals backpropagating one tape holding everything,
//! which [`episode_objective`] builds for checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{BranchState, Checkpoint, FORMAT_VERSION};
use super::config::RunConfig;
use super::optim::Adam;
use crate::autodiff::{concat, Axis, NodeId, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{BranchConfig, SmfModel};
use crate::graph::{ensure_substructures, sample_episode, ClassPool, DatasetSplit, EpisodeTask, Graph, SplitName};
use crate::meta::{self, episode_loss_var, fit_transform, Centroids, EmbeddingTransform};
use crate::params::{collect_grads, Bound, ParamStore};

// Independent random streams derived from one seed.
const STREAM_INIT: u64 = 0;
const STREAM_EPISODES: u64 = 1;
const STREAM_HOLDOUT: u64 = 2;
const STREAM_VALIDATION: u64 = 3;
pub(crate) const STREAM_EVAL: u64 = 4;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Progress notifications emitted during training.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainEvent {
    Step { branch: usize, step: usize, loss: f64 },
    Validation { branch: usize, step: usize, accuracy: f64, improved: bool },
}

/// Per-graph embeddings of one branch; `None` where a graph was not embedded.
pub type EmbeddingTable = Vec<Option<Vec<f64>>>;

/// Adds random-split substructures when the configuration fuses local structure.
pub fn prepare_dataset(cfg: &RunConfig, data: &mut DatasetSplit) -> Result<()> {
    if cfg.needs_substructures() {
        ensure_substructures(data, cfg.seed)?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &DatasetSplit) -> Result<Checkpoint> {
    train_with(cfg, data, |_| {})
}

pub fn train_with(cfg: &RunConfig, data: &DatasetSplit, mut on_event: impl FnMut(TrainEvent)) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut data = data.clone();
    prepare_dataset(cfg, &mut data)?;
    let feature_dim = data
        .feature_dim()
        .ok_or_else(|| Error::Dataset("dataset has no graphs".into()))?;

    let branch_cfgs = cfg.branches()?;
    let mut branches = Vec::with_capacity(branch_cfgs.len());
    for (i, bcfg) in branch_cfgs.iter().enumerate() {
        branches.push(train_branch(cfg, bcfg, i, feature_dim, &data, &mut on_event)?);
    }
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        feature_dim,
        branches,
    })
}

fn branch_seed(cfg: &RunConfig, branch: usize) -> u64 {
    cfg.seed.wrapping_add(branch as u64)
}

struct ValidationSet<'a> {
    graphs: &'a [Graph],
    pool: ClassPool,
}

fn train_branch(
    cfg: &RunConfig,
    bcfg: &BranchConfig,
    branch: usize,
    feature_dim: usize,
    data: &DatasetSplit,
    on_event: &mut impl FnMut(TrainEvent),
) -> Result<BranchState> {
    let seed = branch_seed(cfg, branch);
    let mut store = ParamStore::new();
    let model = SmfModel::new(bcfg, feature_dim, &mut store, &mut rng_stream(seed, STREAM_INIT))?;

    let train_graphs = data.graphs(SplitName::Train);
    let full_pool = ClassPool::from_graphs(train_graphs);
    let val_graphs = data.graphs(SplitName::Validation);
    let (train_pool, val) = if val_graphs.is_empty() {
        let (keep, held) = full_pool.hold_out(cfg.k + cfg.q, &mut rng_stream(seed, STREAM_HOLDOUT))?;
        (
            keep,
            ValidationSet {
                graphs: train_graphs,
                pool: held,
            },
        )
    } else {
        (
            full_pool,
            ValidationSet {
                graphs: val_graphs,
                pool: ClassPool::from_graphs(val_graphs),
            },
        )
    };
    train_pool.check_feasible(cfg.n, cfg.k, cfg.q)?;
    val.pool.check_feasible(cfg.n, cfg.k, cfg.q)?;
    let train_indices: Vec<usize> = train_pool.indices().collect();

    let validate = |store: &ParamStore| -> Result<(f64, EmbeddingTransform)> {
        let mut transform = fit_transform(&embed_graphs(&model, store, train_graphs, &train_indices)?)?;
        transform.epsilon_floor = cfg.epsilon_floor;
        let table = embed_table(&model, store, val.graphs, val.pool.indices(), &transform)?;
        let mut rng = rng_stream(seed, STREAM_VALIDATION);
        let mut correct = 0.0;
        for _ in 0..cfg.val_tasks {
            let task = sample_episode(&val.pool, cfg.n, cfg.k, cfg.q, &mut rng)?;
            correct += task_accuracy(&task, &[&table])?;
        }
        Ok((correct / cfg.val_tasks as f64, transform))
    };

    let (acc, transform) = validate(&store)?;
    on_event(TrainEvent::Validation {
        branch,
        step: 0,
        accuracy: acc,
        improved: true,
    });
    let mut best = (acc, 0, store.clone(), transform);

    let mut adam = Adam::new(cfg.learning_rate, &store);
    let mut episodes = rng_stream(seed, STREAM_EPISODES);
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for step in 1..=cfg.iterations {
        let mut total_loss = 0.0;
        let mut total_grads: Option<Vec<Tensor>> = None;
        for _ in 0..cfg.tasks_per_iteration {
            let task = sample_episode(&train_pool, cfg.n, cfg.k, cfg.q, &mut episodes)?;
            let (loss, grads) = episode_gradients(&model, &store, train_graphs, &task)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            total_loss += loss;
            total_grads = Some(match total_grads {
                None => grads,
                Some(mut acc) => {
                    acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g));
                    acc
                }
            });
        }
        let tasks = cfg.tasks_per_iteration as f64;
        let mut grads = total_grads.expect("tasks_per_iteration is positive");
        if cfg.tasks_per_iteration > 1 {
            grads = grads.into_iter().map(|g| g.map(|v| v / tasks)).collect();
        }
        adam.step(&mut store, &grads);
        let loss = total_loss / tasks;
        loss_trace.push(loss);
        on_event(TrainEvent::Step { branch, step, loss });

        if step % cfg.validate_every == 0 {
            let (acc, transform) = validate(&store)?;
            let improved = acc > best.0;
            on_event(TrainEvent::Validation {
                branch,
                step,
                accuracy: acc,
                improved,
            });
            if improved {
                best = (acc, step, store.clone(), transform);
            }
        }
    }

    let (best_val_acc, best_step, params, transform) = best;
    Ok(BranchState {
        config: bcfg.clone(),
        seed,
        params,
        transform,
        best_val_acc,
        best_step,
        loss_trace,
        episode_rng_word_pos: episodes.get_word_pos(),
    })
}

/// Embeds `graphs[i]` for each index, in index order, without recording gradients.
pub fn embed_graphs(model: &SmfModel, store: &ParamStore, graphs: &[Graph], indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    indices
        .par_iter()
        .map(|&i| {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            Ok(model.encode_graph(&tape, &p, &graphs[i])?.value().into_data())
        })
        .collect()
}

/// Transformed embeddings for `indices`, stored by graph index.
pub fn embed_table(
    model: &SmfModel,
    store: &ParamStore,
    graphs: &[Graph],
    indices: impl IntoIterator<Item = usize>,
    transform: &EmbeddingTransform,
) -> Result<EmbeddingTable> {
    let indices: Vec<usize> = indices.into_iter().collect();
    let raw = embed_graphs(model, store, graphs, &indices)?;
    let mut table = vec![None; graphs.len()];
    for (i, h) in indices.into_iter().zip(raw) {
        table[i] = Some(transform.apply(&h)?);
    }
    Ok(table)
}

fn lookup(table: &EmbeddingTable, g: usize) -> Result<&[f64]> {
    table
        .get(g)
        .and_then(Option::as_deref)
        .ok_or_else(|| Error::Sampling(format!("graph {g} was not embedded")))
}

/// Predicted episode class for every query of `task`, in class-major order.
/// Several tables form an ensemble.
pub fn task_predictions(task: &EpisodeTask, tables: &[&EmbeddingTable]) -> Result<Vec<usize>> {
    let centroids = tables
        .iter()
        .map(|table| {
            let support = task
                .support
                .iter()
                .map(|s| s.iter().map(|&g| lookup(table, g).map(<[f64]>::to_vec)).collect())
                .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;
            meta::class_centroids(&task.classes, &support)
        })
        .collect::<Result<Vec<Centroids>>>()?;
    task.queries()
        .map(|(g, _)| {
            let queries = tables.iter().map(|t| lookup(t, g)).collect::<Result<Vec<&[f64]>>>()?;
            if centroids.len() == 1 {
                meta::predict_nearest(queries[0], &centroids[0])
            } else {
                meta::ensemble_predict(&queries, &centroids)
            }
        })
        .collect()
}

pub fn task_accuracy(task: &EpisodeTask, tables: &[&EmbeddingTable]) -> Result<f64> {
    let preds = task_predictions(task, tables)?;
    let correct = task.queries().zip(&preds).filter(|((_, y), p)| y == *p).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Graph indices of an episode: supports (class-major) then queries.
fn episode_order(task: &EpisodeTask) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = task.supports().map(|(g, _)| g).collect();
    let labels = task
        .queries()
        .map(|(g, y)| {
            order.push(g);
            y
        })
        .collect();
    (order, labels)
}

/// The episode loss on a single tape holding every graph. Slow but direct;
/// used to check [`episode_gradients`].
pub fn episode_objective<'t>(
    model: &SmfModel,
    tape: &'t Tape,
    p: &Bound<'t>,
    graphs: &[Graph],
    task: &EpisodeTask,
) -> Result<Var<'t>> {
    let (order, labels) = episode_order(task);
    let rows = order
        .iter()
        .map(|&g| model.encode_graph(tape, p, &graphs[g]))
        .collect::<Result<Vec<_>>>()?;
    let n_support = order.len() - labels.len();
    let support = concat(&rows[..n_support], Axis::Rows)?;
    let query = concat(&rows[n_support..], Axis::Rows)?;
    episode_loss_var(&support, &query, &labels, task.way())
}

struct GraphPass {
    tape: Tape,
    params: Vec<NodeId>,
    output: NodeId,
    value: Tensor,
}

/// Loss and parameter gradients (store order) for one episode.
pub fn episode_gradients(
    model: &SmfModel,
    store: &ParamStore,
    graphs: &[Graph],
    task: &EpisodeTask,
) -> Result<(f64, Vec<Tensor>)> {
    let (order, labels) = episode_order(task);

    let passes = order
        .par_iter()
        .map(|&g| {
            let tape = Tape::new();
            let (params, output, value) = {
                let p = store.bind(&tape);
                let out = model.encode_graph(&tape, &p, &graphs[g])?;
                (p.node_ids(), out.id(), out.value())
            };
            Ok(GraphPass {
                tape,
                params,
                output,
                value,
            })
        })
        .collect::<Result<Vec<GraphPass>>>()?;

    let loss_tape = Tape::new();
    let leaves: Vec<Var> = passes.iter().map(|p| loss_tape.leaf(p.value.clone())).collect();
    let n_support = order.len() - labels.len();
    let support = concat(&leaves[..n_support], Axis::Rows)?;
    let query = concat(&leaves[n_support..], Axis::Rows)?;
    let loss = episode_loss_var(&support, &query, &labels, task.way())?;
    let loss_value = loss.value().item();
    let mut seeds = loss_tape.backward(&loss)?;
    let seeds: Vec<Tensor> = leaves
        .iter()
        .map(|l| seeds.take_or_zeros(l.id(), &l.shape()))
        .collect();

    let per_graph = passes
        .into_par_iter()
        .zip(seeds)
        .map(|(pass, seed)| {
            let mut grads = pass.tape.backward_with_seed(pass.output, seed)?;
            Ok(collect_grads(store, &pass.params, &mut grads))
        })
        .collect::<Result<Vec<Vec<Tensor>>>>()?;

    let mut total: Vec<Tensor> = store.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    for grads in &per_graph {
        total.iter_mut().zip(grads).for_each(|(a, g)| a.add_assign(g));
    }
    Ok((loss_value, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Variant;
    use crate::gin::GinConfig;
    use crate::graph::{generate_triangles_dataset, TrianglesConfig};

    fn tiny() -> (SmfModel, ParamStore, Vec<Graph>) {
        let data = generate_triangles_dataset(&TrianglesConfig {
            num_classes: 4,
            graphs_per_class: 6,
            min_nodes: 5,
            max_nodes: 8,
            edge_prob: 0.4,
            seed: 5,
            test_classes: Some(0),
            ..Default::default()
        })
        .unwrap();
        let gin = GinConfig {
            num_layers: 3,
            hidden_dim: 6,
            layers_used: vec![2, 3],
            ..Default::default()
        };
        let cfg = BranchConfig::base(gin);
        let mut store = ParamStore::new();
        let model = SmfModel::new(&cfg, data.feature_dim().unwrap(), &mut store, &mut rng_stream(1, 0)).unwrap();
        (model, store, data.graphs(SplitName::Train).to_vec())
    }

    #[test]
    fn split_gradients_match_single_tape() {
        let (model, store, graphs) = tiny();
        let pool = ClassPool::from_graphs(&graphs);
        let task = sample_episode(&pool, 3, 2, 2, &mut rng_stream(3, 0)).unwrap();

        let (loss, grads) = episode_gradients(&model, &store, &graphs, &task).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let whole = episode_objective(&model, &tape, &p, &graphs, &task).unwrap();
        let mut direct = tape.backward(&whole).unwrap();
        let direct = collect_grads(&store, &p.node_ids(), &mut direct);

        assert!((whole.value().item() - loss).abs() < 1e-12);
        for (a, b) in grads.iter().zip(&direct) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn perfect_tables_predict_every_query() {
        let task = EpisodeTask {
            classes: vec![7, 9],
            support: vec![vec![0, 1], vec![2, 3]],
            query: vec![vec![4], vec![5]],
        };
        let table: EmbeddingTable = [[0.0, 1.0], [0.0, 1.2], [1.0, 0.0], [1.1, 0.0], [0.1, 0.9], [0.8, 0.1]]
            .iter()
            .map(|r| Some(r.to_vec()))
            .collect();
        assert_eq!(task_predictions(&task, &[&table]).unwrap(), vec![0, 1]);
        assert_eq!(task_accuracy(&task, &[&table, &table]).unwrap(), 1.0);
        let mut missing = table.clone();
        missing[5] = None;
        assert!(task_accuracy(&task, &[&missing]).is_err());
    }

    #[test]
    fn ensemble_config_trains_two_branches() {
        let data = generate_triangles_dataset(&TrianglesConfig {
            num_classes: 5,
            graphs_per_class: 12,
            min_nodes: 5,
            max_nodes: 8,
            edge_prob: 0.4,
            seed: 2,
            test_classes: Some(2),
            ..Default::default()
        })
        .unwrap();
        let cfg = RunConfig {
            variant: super::super::config::VariantChoice::Ensemble,
            global_attn: "vanilla".into(),
            local_attn: "learned".into(),
            n: 2,
            k: 2,
            q: 2,
            hidden_dim: 4,
            num_layers: 2,
            iterations: 3,
            validate_every: 2,
            val_tasks: 3,
            ..Default::default()
        };
        let ck = train(&cfg, &data).unwrap();
        assert_eq!(ck.branches.len(), 2);
        assert_eq!(ck.branches[0].config.variant, Variant::GlobalOnly);
        assert_eq!(ck.branches[1].config.variant, Variant::LocalOnly);
        assert!(ck.branches.iter().all(|b| b.loss_trace.len() == 3));
    }
}
