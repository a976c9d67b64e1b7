//! Composition of encoder outputs into the final graph embedding.
//!
//! * `Base`: concatenation of the selected layer readouts.
//! * `GlobalOnly`: layer readouts weighted (or aggregated) by the global attention.
//! * `LocalOnly`: concatenated readouts of the graph and of each substructure,
//!   fused by the local attention.
//! * `Full`: global attention on the graph and each substructure (shared
//!   parameters), then the local attention.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{stack_rows, Attention, AttentionKind, AttentionOutput, Pooling};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gin::{GinConfig, GinEncoder};
use crate::graph::Graph;
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    GlobalOnly,
    LocalOnly,
    Full,
}

impl Variant {
    pub fn needs_substructures(&self) -> bool {
        matches!(self, Variant::LocalOnly | Variant::Full)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "g" => Ok(Variant::GlobalOnly),
            "l" => Ok(Variant::LocalOnly),
            "full" => Ok(Variant::Full),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "base",
            Variant::GlobalOnly => "g",
            Variant::LocalOnly => "l",
            Variant::Full => "full",
        })
    }
}

/// Everything needed to rebuild one branch's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub variant: Variant,
    pub global_attn: Option<AttentionKind>,
    pub local_attn: Option<AttentionKind>,
    pub pooling: Pooling,
    pub gin: GinConfig,
    /// Substructures per graph expected by the local attention.
    pub num_substructures: usize,
}

impl BranchConfig {
    pub fn base(gin: GinConfig) -> Self {
        BranchConfig {
            variant: Variant::Base,
            global_attn: None,
            local_attn: None,
            pooling: Pooling::Mean,
            gin,
            num_substructures: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gin.validate()?;
        let (needs_global, needs_local) = match self.variant {
            Variant::Base => (false, false),
            Variant::GlobalOnly => (true, false),
            Variant::LocalOnly => (false, true),
            Variant::Full => (true, true),
        };
        if needs_global != self.global_attn.is_some() || needs_local != self.local_attn.is_some() {
            return Err(Error::Config(format!(
                "variant {} needs global attention: {needs_global}, local attention: {needs_local}",
                self.variant
            )));
        }
        if needs_local && self.num_substructures == 0 {
            return Err(Error::Config("local fusion needs at least one substructure".into()));
        }
        Ok(())
    }
}

/// The encoder plus the attention heads of one branch.
#[derive(Clone, Debug)]
pub struct SmfModel {
    pub config: BranchConfig,
    pub encoder: GinEncoder,
    pub global: Option<Attention>,
    pub local: Option<Attention>,
}

impl SmfModel {
    /// Registers all parameters in `store` (which should be empty) in a fixed order.
    pub fn new<R: Rng>(config: &BranchConfig, feature_dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = GinEncoder::new(&config.gin, feature_dim, store, rng)?;
        let hidden = config.gin.hidden_dim;
        let layers = config.gin.layers_used.len();
        let concat_dim = layers * hidden;

        let global = config
            .global_attn
            .map(|kind| Attention::new("global", kind, config.pooling, layers, hidden, hidden, store, rng))
            .transpose()?;
        let graph_dim = match &global {
            Some(a) if !a.kind.produces_weights() => a.output_dim(),
            _ => concat_dim,
        };
        let local = config
            .local_attn
            .map(|kind| {
                Attention::new("local", kind, config.pooling, config.num_substructures + 1, graph_dim, hidden, store, rng)
            })
            .transpose()?;

        Ok(SmfModel {
            config: config.clone(),
            encoder,
            global,
            local,
        })
    }

    /// Length of every embedding this branch produces.
    pub fn embedding_dim(&self) -> usize {
        let concat_dim = self.config.gin.layers_used.len() * self.config.gin.hidden_dim;
        let last = self.local.as_ref().or(self.global.as_ref());
        match last {
            Some(a) if !a.kind.produces_weights() => a.output_dim(),
            _ => concat_dim,
        }
    }

    pub fn encode_graph<'t>(&self, tape: &'t Tape, p: &Bound<'t>, g: &Graph) -> Result<Var<'t>> {
        let layers = self.encoder.encode_layers(tape, p, g)?;
        match self.config.variant {
            Variant::Base => concat_layers(&layers),
            Variant::GlobalOnly => global_fuse(&layers, self.global.as_ref(), p),
            Variant::LocalOnly | Variant::Full => {
                let subs = g.substructures().filter(|s| !s.is_empty()).ok_or_else(|| {
                    Error::Graph(format!("{}: variant {} needs substructures", g.id, self.config.variant))
                })?;
                let global = self.global.as_ref();
                let h_graph = global_fuse(&layers, global, p)?;
                let mut h_subs = Vec::with_capacity(subs.len());
                for nodes in subs {
                    let sg = g.induced_subgraph(nodes)?;
                    let sub_layers = self.encoder.encode_layers(tape, p, &sg)?;
                    h_subs.push(global_fuse(&sub_layers, global, p)?);
                }
                local_fuse(&h_graph, &h_subs, self.local.as_ref().expect("validated"), p)
            }
        }
    }
}

/// `con(h^1, ..., h^l)` as a single row.
pub fn concat_layers<'t>(layers: &[Var<'t>]) -> Result<Var<'t>> {
    let stacked = stack_rows(layers)?;
    let s = stacked.shape();
    stacked.reshape(&[1, s[0] * s[1]])
}

/// `con(w_1 h^1, ..., w_l h^l)`, where the row `weights` is `1 x l`.
pub fn weighted_concat<'t>(layers: &[Var<'t>], weights: &Var<'t>) -> Result<Var<'t>> {
    let stacked = stack_rows(layers)?;
    let s = stacked.shape();
    if weights.shape() != [1, s[0]] {
        return Err(Error::shape("weighted_concat", &[&weights.shape(), &s]));
    }
    let ones = stacked.tape().constant(Tensor::full(&[1, s[1]], 1.0));
    let spread = weights.transpose()?.matmul(&ones)?;
    stacked.mul(&spread)?.reshape(&[1, s[0] * s[1]])
}

/// Global-structure fusion over layer readouts. Without an attention model
/// this is plain concatenation.
pub fn global_fuse<'t>(layers: &[Var<'t>], attention: Option<&Attention>, p: &Bound<'t>) -> Result<Var<'t>> {
    match attention {
        None => concat_layers(layers),
        Some(a) => match a.apply(p, layers)? {
            AttentionOutput::Weights(w) => weighted_concat(layers, &w),
            AttentionOutput::Aggregated(h) => Ok(h),
        },
    }
}

/// Local-structure fusion over `[h_graph, h_sub_1, ..., h_sub_n]`. Weight
/// kinds return `r_0 h_graph + sum_i r_i h_sub_i`.
pub fn local_fuse<'t>(h_graph: &Var<'t>, h_subs: &[Var<'t>], attention: &Attention, p: &Bound<'t>) -> Result<Var<'t>> {
    if h_subs.is_empty() {
        return Err(Error::Attention("local fusion needs at least one substructure".into()));
    }
    let width = h_graph.shape();
    if let Some(bad) = h_subs.iter().find(|h| h.shape() != width) {
        return Err(Error::shape("local_fuse", &[&width, &bad.shape()]));
    }
    let mut seq = Vec::with_capacity(h_subs.len() + 1);
    seq.push(*h_graph);
    seq.extend_from_slice(h_subs);
    match attention.apply(p, &seq)? {
        AttentionOutput::Weights(r) => weighted_sum(&seq, &r),
        AttentionOutput::Aggregated(h) => Ok(h),
    }
}

/// `sum_j r_j h_j` for a `1 x L` weight row.
pub fn weighted_sum<'t>(rows: &[Var<'t>], weights: &Var<'t>) -> Result<Var<'t>> {
    weights.matmul(&stack_rows(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_weights_match_concat() {
        let tape = Tape::new();
        let layers = [tape.constant(Tensor::row(&[1.0, 2.0])), tape.constant(Tensor::row(&[3.0, -4.0]))];
        let ones = tape.constant(Tensor::row(&[1.0, 1.0]));
        let a = weighted_concat(&layers, &ones).unwrap().value();
        assert_eq!(a, concat_layers(&layers).unwrap().value());
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, -4.0]);
        let basis = tape.constant(Tensor::row(&[0.0, 1.0]));
        assert_eq!(weighted_concat(&layers, &basis).unwrap().value().data(), &[0.0, 0.0, 3.0, -4.0]);
    }

    #[test]
    fn degenerate_and_uniform_local_weights() {
        let tape = Tape::new();
        let rows = [
            tape.constant(Tensor::row(&[1.0, 2.0])),
            tape.constant(Tensor::row(&[5.0, 0.0])),
            tape.constant(Tensor::row(&[-3.0, 7.0])),
        ];
        let first = tape.constant(Tensor::row(&[1.0, 0.0, 0.0]));
        assert_eq!(weighted_sum(&rows, &first).unwrap().value().data(), &[1.0, 2.0]);
        let third = 1.0 / 3.0;
        let uniform = tape.constant(Tensor::row(&[third; 3]));
        let m = weighted_sum(&rows, &uniform).unwrap().value();
        assert!((m.data()[0] - 1.0).abs() < 1e-12 && (m.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn local_variants_require_substructures() {
        let gin = GinConfig {
            num_layers: 2,
            hidden_dim: 4,
            layers_used: vec![1, 2],
            ..Default::default()
        };
        let cfg = BranchConfig {
            variant: Variant::LocalOnly,
            local_attn: Some(AttentionKind::Vanilla),
            ..BranchConfig::base(gin)
        };
        let mut store = ParamStore::new();
        let model = SmfModel::new(&cfg, 4, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = Graph::new("g", 0, 3, &[(0, 1)], None, 4).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(model.encode_graph(&tape, &p, &g).is_err());
        let g = g.with_substructures(vec![vec![0, 1], vec![2]]).unwrap();
        assert_eq!(model.encode_graph(&tape, &p, &g).unwrap().shape(), vec![1, 8]);
    }

    #[test]
    fn variant_attention_legality() {
        let cfg = BranchConfig {
            variant: Variant::GlobalOnly,
            ..BranchConfig::base(GinConfig::default())
        };
        assert!(cfg.validate().is_err());
    }
}
