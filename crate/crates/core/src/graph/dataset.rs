//! JSON Lines dataset files, one graph per line:
//!
//! ```text
//! {"id": "g0", "split": "train", "label": 3, "num_nodes": 4,
//!  "edges": [[0,1],[1,2]], "features": [[..],..], "substructures": [[0,1],[2,3]]}
//! ```
//!
//! `features` and `substructures` are optional.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Graph;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    id: String,
    split: SplitName,
    label: i64,
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    substructures: Option<Vec<Vec<usize>>>,
}

/// Graphs partitioned into meta-train, validation and meta-test collections
/// whose class sets are pairwise disjoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Graph>,
    pub validation: Vec<Graph>,
    pub test: Vec<Graph>,
}

impl DatasetSplit {
    pub fn new(train: Vec<Graph>, validation: Vec<Graph>, test: Vec<Graph>) -> Result<Self> {
        let split = DatasetSplit {
            train,
            validation,
            test,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn graphs(&self, name: SplitName) -> &[Graph] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn graphs_mut(&mut self, name: SplitName) -> &mut Vec<Graph> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Validation => &mut self.validation,
            SplitName::Test => &mut self.test,
        }
    }

    /// Class label -> number of graphs, for one split.
    pub fn class_inventory(&self, name: SplitName) -> BTreeMap<i64, usize> {
        let mut inv = BTreeMap::new();
        for g in self.graphs(name) {
            *inv.entry(g.label).or_insert(0) += 1;
        }
        inv
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.iter().next().map(|(_, g)| g.feature_dim())
    }

    pub fn iter(&self) -> impl Iterator<Item = (SplitName, &Graph)> {
        [SplitName::Train, SplitName::Validation, SplitName::Test]
            .into_iter()
            .flat_map(move |s| self.graphs(s).iter().map(move |g| (s, g)))
    }

    fn validate(&self) -> Result<()> {
        let names = [SplitName::Train, SplitName::Validation, SplitName::Test];
        let sets: Vec<BTreeSet<i64>> = names
            .iter()
            .map(|&s| self.graphs(s).iter().map(|g| g.label).collect())
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                if let Some(c) = sets[i].intersection(&sets[j]).next() {
                    return Err(Error::Dataset(format!(
                        "class {c} appears in both {:?} and {:?} splits",
                        names[i], names[j]
                    )));
                }
            }
        }
        if let Some(d) = self.feature_dim() {
            if let Some((_, g)) = self.iter().find(|(_, g)| g.feature_dim() != d) {
                return Err(Error::Dataset(format!(
                    "graph {} has feature width {}, expected {d}",
                    g.id,
                    g.feature_dim()
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_dataset(path: impl AsRef<Path>, degree_cap: usize) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_str(&text, degree_cap)
}

pub fn parse_dataset_str(text: &str, degree_cap: usize) -> Result<DatasetSplit> {
    let mut split = DatasetSplit::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Parse { line: line_no, msg };
        let rec: GraphRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let edges: Vec<(usize, usize)> = rec.edges.iter().map(|e| (e[0], e[1])).collect();
        let features = rec
            .features
            .map(|rows| Tensor::from_rows(&rows))
            .transpose()
            .map_err(|e| at(e.to_string()))?;
        let mut g = Graph::new(rec.id, rec.label, rec.num_nodes, &edges, features, degree_cap)
            .map_err(|e| at(e.to_string()))?;
        if let Some(subs) = rec.substructures {
            g = g.with_substructures(subs).map_err(|e| at(e.to_string()))?;
        }
        split.graphs_mut(rec.split).push(g);
    }
    split.validate()?;
    Ok(split)
}

/// Serializes to the JSON Lines format. Degree-derived features are omitted so
/// the output parses back to the same dataset.
pub fn write_dataset(split: &DatasetSplit) -> Result<String> {
    let mut out = String::new();
    for (name, g) in split.iter() {
        let rec = GraphRecord {
            id: g.id.clone(),
            split: name,
            label: g.label,
            num_nodes: g.num_nodes(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            features: g
                .has_explicit_features()
                .then(|| (0..g.num_nodes()).map(|r| g.features().row_slice(r).to_vec()).collect()),
            substructures: g.substructures().map(<[_]>::to_vec),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?).expect("write to String");
    }
    Ok(out)
}
