use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::trainer::{embed_table, rng_stream, task_accuracy, task_predictions, EmbeddingTable, STREAM_EVAL};
use crate::error::{Error, Result};
use crate::graph::{sample_episode, ClassPool, Graph};

/// Accuracy over sampled test tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    /// Population standard deviation of per-task accuracy.
    pub std: f64,
    /// Half-width of the normal 95% interval, `1.96 * std / sqrt(tasks)`.
    pub ci95: f64,
    pub tasks: usize,
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub per_task: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_task: Vec<f64>, way: usize, shots: usize, queries: usize) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::Sampling("no evaluation tasks".into()));
        }
        let n = per_task.len() as f64;
        let mean = per_task.iter().sum::<f64>() / n;
        let std = (per_task.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        Ok(EvalReport {
            mean,
            std,
            ci95: 1.96 * std / n.sqrt(),
            tasks: per_task.len(),
            way,
            shots,
            queries,
            per_task,
        })
    }
}

/// Report plus the predicted episode class of every query, task by task.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub predictions: Vec<Vec<usize>>,
}

/// Transformed embeddings of every graph under each branch of `ck`.
pub fn embed_for_eval(ck: &Checkpoint, graphs: &[Graph]) -> Result<Vec<EmbeddingTable>> {
    if let Some(g) = graphs.iter().find(|g| g.feature_dim() != ck.feature_dim) {
        return Err(Error::Dataset(format!(
            "{}: feature width {} does not match the checkpoint's {}",
            g.id,
            g.feature_dim(),
            ck.feature_dim
        )));
    }
    ck.branches
        .iter()
        .map(|b| {
            let (model, store) = b.model(ck.feature_dim)?;
            embed_table(&model, &store, graphs, 0..graphs.len(), &b.transform)
        })
        .collect()
}

/// Samples `tasks` episodes from `graphs` with a seeded generator and scores
/// them with nearest-centroid (one branch) or ensemble (several) prediction.
pub fn evaluate(ck: &Checkpoint, graphs: &[Graph], tasks: usize, seed: u64) -> Result<EvalOutcome> {
    let (n, k, q) = (ck.config.n, ck.config.k, ck.config.q);
    let pool = ClassPool::from_graphs(graphs);
    pool.check_feasible(n, k, q)?;
    if tasks == 0 {
        return Err(Error::Config("eval_tasks must be positive".into()));
    }
    let tables = embed_for_eval(ck, graphs)?;
    let refs: Vec<&EmbeddingTable> = tables.iter().collect();
    let mut rng = rng_stream(seed, STREAM_EVAL);
    let mut per_task = Vec::with_capacity(tasks);
    let mut predictions = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        let task = sample_episode(&pool, n, k, q, &mut rng)?;
        per_task.push(task_accuracy(&task, &refs)?);
        predictions.push(task_predictions(&task, &refs)?);
    }
    Ok(EvalOutcome {
        report: EvalReport::from_accuracies(per_task, n, k, q)?,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![1.0, 0.0, 0.5, 0.5], 2, 1, 1).unwrap();
        assert_eq!(r.mean, 0.5);
        let std = (0.5f64 / 4.0).sqrt();
        assert!((r.std - std).abs() < 1e-15);
        assert!((r.ci95 - 1.96 * std / 2.0).abs() < 1e-15);
        assert!(EvalReport::from_accuracies(vec![], 2, 1, 1).is_err());
    }
}
