use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::Graph;
use crate::error::{Error, Result};

/// Graph indices grouped by class label, in label order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassPool {
    classes: BTreeMap<i64, Vec<usize>>,
}

impl ClassPool {
    pub fn from_graphs(graphs: &[Graph]) -> Self {
        Self::from_indices(graphs, 0..graphs.len())
    }

    pub fn from_indices(graphs: &[Graph], indices: impl IntoIterator<Item = usize>) -> Self {
        let mut classes: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for i in indices {
            classes.entry(graphs[i].label).or_default().push(i);
        }
        ClassPool { classes }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = i64> + '_ {
        self.classes.keys().copied()
    }

    pub fn members(&self, label: i64) -> &[usize] {
        self.classes.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.values().flatten().copied()
    }

    /// Splits off `per_class` randomly chosen members of every class.
    pub fn hold_out<R: Rng>(&self, per_class: usize, rng: &mut R) -> Result<(ClassPool, ClassPool)> {
        let mut keep = BTreeMap::new();
        let mut held = BTreeMap::new();
        for (&label, members) in &self.classes {
            if members.len() <= per_class {
                return Err(Error::Sampling(format!(
                    "class {label} has {} graphs, cannot hold out {per_class} and keep any",
                    members.len()
                )));
            }
            let mut shuffled = members.clone();
            shuffled.shuffle(rng);
            let (h, k) = shuffled.split_at(per_class);
            let (mut h, mut k) = (h.to_vec(), k.to_vec());
            h.sort_unstable();
            k.sort_unstable();
            held.insert(label, h);
            keep.insert(label, k);
        }
        Ok((ClassPool { classes: keep }, ClassPool { classes: held }))
    }

    /// Checks that `(n, k, q)` episodes can be drawn.
    pub fn check_feasible(&self, n: usize, k: usize, q: usize) -> Result<()> {
        if n == 0 || k == 0 || q == 0 {
            return Err(Error::Sampling(format!("N, K, Q must be positive, got {n}, {k}, {q}")));
        }
        let eligible = self.classes.values().filter(|m| m.len() >= k + q).count();
        if self.classes.len() < n {
            return Err(Error::Sampling(format!(
                "{n}-way episodes need {n} classes, only {} available",
                self.classes.len()
            )));
        }
        if eligible < self.classes.len() {
            let (label, m) = self.classes.iter().find(|(_, m)| m.len() < k + q).unwrap();
            return Err(Error::Sampling(format!(
                "class {label} has {} graphs, {} required for K={k} plus Q={q}",
                m.len(),
                k + q
            )));
        }
        Ok(())
    }
}

/// One N-way K-shot task: indices into the graph collection it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTask {
    /// Episode class `n` corresponds to dataset label `classes[n]`.
    pub classes: Vec<i64>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl EpisodeTask {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// `(graph index, episode class)` for every query, class-major.
    pub fn queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query.iter().enumerate().flat_map(|(c, qs)| qs.iter().map(move |&g| (g, c)))
    }

    pub fn supports(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.support.iter().enumerate().flat_map(|(c, ss)| ss.iter().map(move |&g| (g, c)))
    }
}

/// Draws `n` classes without replacement, then `k + q` graphs per class
/// without replacement: the first `k` form the support set, the rest the query.
pub fn sample_episode<R: Rng>(pool: &ClassPool, n: usize, k: usize, q: usize, rng: &mut R) -> Result<EpisodeTask> {
    pool.check_feasible(n, k, q)?;
    let labels: Vec<i64> = pool.labels().collect();
    let mut chosen: Vec<usize> = index::sample(rng, labels.len(), n).into_vec();
    chosen.sort_unstable();

    let mut task = EpisodeTask {
        classes: Vec::with_capacity(n),
        support: Vec::with_capacity(n),
        query: Vec::with_capacity(n),
    };
    for ci in chosen {
        let label = labels[ci];
        let members = pool.members(label);
        let picks = index::sample(rng, members.len(), k + q);
        let picked: Vec<usize> = picks.iter().map(|i| members[i]).collect();
        task.classes.push(label);
        task.support.push(picked[..k].to_vec());
        task.query.push(picked[k..].to_vec());
    }
    Ok(task)
}
