//! Prototype classification: centroids, nearest-centroid prediction, the
//! episodic training loss and the meta-test centering + L2 transform.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One mean embedding per episode class.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    /// Dataset label of each episode class, in episode order.
    pub classes: Vec<i64>,
    pub vectors: Vec<Vec<f64>>,
}

impl Centroids {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// `c_n = (1/K) sum_i h_(i,n)`; `support[n]` holds the K embeddings of class `n`.
pub fn class_centroids(classes: &[i64], support: &[Vec<Vec<f64>>]) -> Result<Centroids> {
    if classes.len() != support.len() || support.is_empty() {
        return Err(Error::Sampling(format!(
            "{} class labels for {} support groups",
            classes.len(),
            support.len()
        )));
    }
    let k = support[0].len();
    let dim = support[0].first().map_or(0, Vec::len);
    if k == 0 || support.iter().any(|s| s.len() != k) {
        return Err(Error::Sampling(format!(
            "ragged support set: {:?} embeddings per class",
            support.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let mut vectors = Vec::with_capacity(support.len());
    for group in support {
        let mut c = vec![0.0; dim];
        for h in group {
            if h.len() != dim {
                return Err(Error::shape("class_centroids", &[&[dim], &[h.len()]]));
            }
            for (acc, v) in c.iter_mut().zip(h) {
                *acc += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= k as f64);
        vectors.push(c);
    }
    Ok(Centroids {
        classes: classes.to_vec(),
        vectors,
    })
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared Euclidean distance from `query` to every centroid.
pub fn centroid_distances(query: &[f64], centroids: &Centroids) -> Result<Vec<f64>> {
    if centroids.is_empty() {
        return Err(Error::Sampling("no centroids".into()));
    }
    centroids
        .vectors
        .iter()
        .map(|c| {
            if c.len() == query.len() {
                Ok(squared_distance(c, query))
            } else {
                Err(Error::shape("predict_nearest", &[&[c.len()], &[query.len()]]))
            }
        })
        .collect()
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Episode class of the nearest centroid under squared Euclidean distance.
pub fn predict_nearest(query: &[f64], centroids: &Centroids) -> Result<usize> {
    Ok(argmin(&centroid_distances(query, centroids)?))
}

/// Averages each class's distance over branches, then takes the argmin.
/// `queries[b]` is the query embedding in branch `b`'s space.
pub fn ensemble_predict(queries: &[&[f64]], branches: &[Centroids]) -> Result<usize> {
    if branches.is_empty() || queries.len() != branches.len() {
        return Err(Error::Sampling(format!(
            "{} query embeddings for {} branches",
            queries.len(),
            branches.len()
        )));
    }
    let classes = &branches[0].classes;
    if let Some(b) = branches.iter().find(|b| &b.classes != classes) {
        return Err(Error::Sampling(format!(
            "branch class order mismatch: {:?} vs {:?}",
            classes, b.classes
        )));
    }
    let mut total = vec![0.0; classes.len()];
    for (q, c) in queries.iter().zip(branches) {
        for (acc, d) in total.iter_mut().zip(centroid_distances(q, c)?) {
            *acc += d;
        }
    }
    let n = branches.len() as f64;
    total.iter_mut().for_each(|d| *d /= n);
    Ok(argmin(&total))
}

/// Differentiable episode loss on a tape.
///
/// `support` is `(N*K) x D` in class-major order, `query` is `M x D` with
/// episode-class labels `labels`. Returns the mean over queries of
/// `-log softmax_n(-||c_n - h_q||^2)[y_q]`.
pub fn episode_loss_var<'t>(
    support: &Var<'t>,
    query: &Var<'t>,
    labels: &[usize],
    way: usize,
) -> Result<Var<'t>> {
    let tape = support.tape();
    let (s_shape, q_shape) = (support.shape(), query.shape());
    if way == 0 || s_shape[0] % way != 0 || s_shape[1] != q_shape[1] || q_shape[0] != labels.len() {
        return Err(Error::shape("episode_loss", &[&s_shape, &q_shape, &[labels.len(), way]]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= way) {
        return Err(Error::Sampling(format!("query label {bad} outside the {way} episode classes")));
    }
    let k = s_shape[0] / way;
    let m = q_shape[0];

    let mut avg = Tensor::zeros(&[way, way * k]);
    for n in 0..way {
        for i in 0..k {
            avg.data_mut()[n * way * k + n * k + i] = 1.0 / k as f64;
        }
    }
    let centroids = tape.constant(avg).matmul(support)?;

    // ||q||^2 + ||c||^2 - 2 q.c
    let q_sq = query.mul(query)?.matmul(&tape.constant(Tensor::full(&[q_shape[1], 1], 1.0)))?;
    let c_sq = centroids.mul(&centroids)?.matmul(&tape.constant(Tensor::full(&[q_shape[1], 1], 1.0)))?;
    let cross = query.matmul(&centroids.transpose()?)?;
    let dist = q_sq
        .matmul(&tape.constant(Tensor::full(&[1, way], 1.0)))?
        .add_row(&c_sq.transpose()?)?
        .sub(&cross.scale(2.0))?;
    let logits = dist.scale(-1.0);

    // log-sum-exp with max subtraction
    let max = logits.reduce_max(Axis::Cols)?;
    let spread = max.matmul(&tape.constant(Tensor::full(&[1, way], 1.0)))?;
    let lse = logits.sub(&spread)?.exp().reduce_mean(Axis::Cols)?.scale(way as f64).log().add(&max)?;

    let mut onehot = Tensor::zeros(&[m, way]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * way + y] = 1.0;
    }
    let picked = logits.mul(&tape.constant(onehot))?.sum();
    Ok(lse.sum().sub(&picked)?.scale(1.0 / m as f64))
}

/// [`episode_loss_var`] on plain embeddings.
pub fn episode_loss(support: &[Vec<f64>], query: &[Vec<f64>], labels: &[usize], way: usize) -> Result<f64> {
    let tape = Tape::new();
    let to_var = |rows: &[Vec<f64>]| Tensor::from_rows(rows).map(|t| tape.constant(t));
    let loss = episode_loss_var(&to_var(support)?, &to_var(query)?, labels, way)?;
    Ok(loss.value().item())
}

/// Centering by the meta-train mean followed by L2 scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTransform {
    pub mean: Vec<f64>,
    pub l2: bool,
    /// Floor the centered norm at 1e-12 instead of rejecting it.
    pub epsilon_floor: bool,
}

pub const DEGENERATE_NORM: f64 = 1e-12;

/// Mean over the meta-train embeddings.
pub fn fit_transform(train: &[Vec<f64>]) -> Result<EmbeddingTransform> {
    let Some(first) = train.first() else {
        return Err(Error::Sampling("cannot fit a transform on zero embeddings".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for h in train {
        if h.len() != mean.len() {
            return Err(Error::shape("fit_transform", &[&[mean.len()], &[h.len()]]));
        }
        for (acc, v) in mean.iter_mut().zip(h) {
            *acc += v;
        }
    }
    let n = train.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(EmbeddingTransform {
        mean,
        l2: true,
        epsilon_floor: false,
    })
}

impl EmbeddingTransform {
    pub fn identity(dim: usize) -> Self {
        EmbeddingTransform {
            mean: vec![0.0; dim],
            l2: false,
            epsilon_floor: false,
        }
    }

    /// `(h - mean) / ||h - mean||`.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.mean.len() {
            return Err(Error::shape("apply_transform", &[&[self.mean.len()], &[h.len()]]));
        }
        let centered: Vec<f64> = h.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        if !self.l2 {
            return Ok(centered);
        }
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm = if norm < DEGENERATE_NORM {
            if !self.epsilon_floor {
                return Err(Error::Degenerate(norm));
            }
            DEGENERATE_NORM
        } else {
            norm
        };
        Ok(centered.into_iter().map(|v| v / norm).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centroid_trivia() {
        let c = class_centroids(&[7], &[vec![vec![1.0, -2.0]]]).unwrap();
        assert_eq!(c.vectors, vec![vec![1.0, -2.0]]);
        let c = class_centroids(&[0], &[vec![vec![0.0, 0.0], vec![2.0, 2.0]]]).unwrap();
        assert_eq!(c.vectors, vec![vec![1.0, 1.0]]);
        assert!(class_centroids(&[0, 1], &[vec![vec![0.0]], vec![vec![0.0], vec![1.0]]]).is_err());
    }

    #[test]
    fn nearest_and_tie_break() {
        let c = Centroids {
            classes: vec![0, 1, 2],
            vectors: vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 5.0]],
        };
        assert_eq!(predict_nearest(&[2.0, 0.0], &c).unwrap(), 1);
        assert_eq!(predict_nearest(&[1.0, 0.0], &c).unwrap(), 0);
        let empty = Centroids {
            classes: vec![],
            vectors: vec![],
        };
        assert!(predict_nearest(&[1.0], &empty).is_err());
    }

    #[test]
    fn equidistant_loss_is_log_n() {
        // query at the origin, three centroids on the unit circle
        let support = vec![vec![1.0, 0.0], vec![-0.5, 0.75f64.sqrt()], vec![-0.5, -(0.75f64.sqrt())]];
        let loss = episode_loss(&support, &[vec![0.0, 0.0]], &[2], 3).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn far_centroids_give_vanishing_loss() {
        let support = vec![vec![0.0, 0.0], vec![1e3, 0.0]];
        let loss = episode_loss(&support, &[vec![0.0, 0.0]], &[0], 2).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn label_outside_episode_is_rejected() {
        let support = vec![vec![0.0], vec![1.0]];
        assert!(episode_loss(&support, &[vec![0.5]], &[2], 2).is_err());
    }

    #[test]
    fn transform_trivia() {
        let t = fit_transform(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(t.mean, vec![1.0, 2.0]);
        let t = fit_transform(&[vec![1.0, -3.0], vec![-1.0, 3.0]]).unwrap();
        assert_eq!(t.mean, vec![0.0, 0.0]);

        let t = EmbeddingTransform {
            mean: vec![1.0, 1.0],
            l2: true,
            epsilon_floor: false,
        };
        let out = t.apply(&[4.0, 5.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
        assert!(matches!(t.apply(&[1.0, 1.0]), Err(Error::Degenerate(_))));
        let floored = EmbeddingTransform {
            epsilon_floor: true,
            ..t
        };
        assert_eq!(floored.apply(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ensemble_trivia() {
        let a = Centroids {
            classes: vec![3, 4],
            vectors: vec![vec![0.0], vec![2.0]],
        };
        let b = Centroids {
            classes: vec![3, 4],
            vectors: vec![vec![2.0], vec![0.0]],
        };
        // distances (1, 1) in both: average tie -> class 0
        assert_eq!(ensemble_predict(&[&[1.0], &[1.0]], &[a.clone(), b.clone()]).unwrap(), 0);
        // (1, 9) and (9, 1) average to (5, 5)
        assert_eq!(ensemble_predict(&[&[-1.0], &[-1.0]], &[a.clone(), b.clone()]).unwrap(), 0);
        // (1, 9) and (1, 9): clear winner
        assert_eq!(ensemble_predict(&[&[-1.0], &[3.0]], &[a.clone(), b]).unwrap(), 0);
        let swapped = Centroids {
            classes: vec![4, 3],
            ..a.clone()
        };
        assert!(ensemble_predict(&[&[0.0], &[0.0]], &[a, swapped]).is_err());
    }
}
