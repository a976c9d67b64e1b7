//! Aggregation over an ordered set of representations.
//!
//! Learned-weight and vanilla attention produce one weight per input; the
//! self-attention, MLP and Transformer kinds produce an aggregated vector
//! directly. Sequence models use no positional encoding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Axis, Tensor, Var};
use crate::error::{Error, Result};
use crate::gin::Affine;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionKind {
    LearnedWeight,
    Vanilla,
    SelfAttention { heads: usize, layers: usize },
    Mlp { depth: usize },
    Transformer { heads: usize, layers: usize },
}

impl AttentionKind {
    pub fn produces_weights(&self) -> bool {
        matches!(self, AttentionKind::LearnedWeight | AttentionKind::Vanilla)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::LearnedWeight => "learned",
            AttentionKind::Vanilla => "vanilla",
            AttentionKind::SelfAttention { .. } => "self",
            AttentionKind::Mlp { .. } => "mlp",
            AttentionKind::Transformer { .. } => "transformer",
        }
    }

    /// Parses a kind name, filling in the structural hyperparameters.
    pub fn from_name(name: &str, heads: usize, layers: usize, mlp_depth: usize) -> Result<Self> {
        Ok(match name {
            "learned" => AttentionKind::LearnedWeight,
            "vanilla" => AttentionKind::Vanilla,
            "self" => AttentionKind::SelfAttention { heads, layers },
            "mlp" => AttentionKind::Mlp { depth: mlp_depth },
            "transformer" => AttentionKind::Transformer { heads, layers },
            other => {
                return Err(Error::Config(format!(
                    "unknown attention kind {other:?} (expected learned, vanilla, self, mlp or transformer)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    First,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "first" => Ok(Pooling::First),
            other => Err(Error::Config(format!("unknown pooling {other:?} (expected mean, max or first)"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::First => "first",
        })
    }
}

/// Collapses an `L x d` sequence into one `1 x d` row.
pub fn pool<'t>(seq: &Var<'t>, strategy: Pooling) -> Result<Var<'t>> {
    match strategy {
        Pooling::Mean => seq.reduce_mean(Axis::Rows),
        Pooling::Max => seq.reduce_max(Axis::Rows),
        Pooling::First => seq.gather_rows(&[0]),
    }
}

/// Stacks `1 x d` rows into an `L x d` matrix.
pub fn stack_rows<'t>(rows: &[Var<'t>]) -> Result<Var<'t>> {
    if rows.is_empty() {
        return Err(Error::Attention("empty input set".into()));
    }
    concat(rows, Axis::Rows)
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub heads: Vec<HeadParams>,
    pub head_dim: usize,
    pub output: Affine,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: MultiHead,
    pub norm1: LayerNormParams,
    pub ff1: Affine,
    pub ff2: Affine,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub enum AttentionParams {
    LearnedWeight { weights: ParamId },
    Vanilla { proj: Affine, context: ParamId },
    SelfAttention { layers: Vec<MultiHead> },
    Mlp { layers: Vec<Affine> },
    Transformer { input_proj: Option<ParamId>, blocks: Vec<TransformerBlock> },
}

#[derive(Clone, Copy, Debug)]
pub enum AttentionOutput<'t> {
    /// `1 x L` weights, one per input.
    Weights(Var<'t>),
    /// `1 x hidden_dim` aggregated representation.
    Aggregated(Var<'t>),
}

/// One attention model with its parameters registered in a store.
#[derive(Clone, Debug)]
pub struct Attention {
    pub kind: AttentionKind,
    pub pooling: Pooling,
    /// Number of inputs, fixed for the kinds whose parameters depend on it.
    pub seq_len: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub params: AttentionParams,
}

const LAYER_NORM_EPS: f64 = 1e-9;

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        kind: AttentionKind,
        pooling: Pooling,
        seq_len: usize,
        input_dim: usize,
        hidden_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if seq_len == 0 || input_dim == 0 || hidden_dim == 0 {
            return Err(Error::Attention("sequence length and widths must be positive".into()));
        }
        let params = match kind {
            AttentionKind::LearnedWeight => AttentionParams::LearnedWeight {
                weights: store.add(format!("{name}.weights"), Tensor::full(&[1, seq_len], 1.0)),
            },
            AttentionKind::Vanilla => AttentionParams::Vanilla {
                proj: Affine::new(store, &format!("{name}.proj"), input_dim, hidden_dim, rng),
                context: store.add_uniform(format!("{name}.context"), &[hidden_dim, 1], hidden_dim, rng),
            },
            AttentionKind::SelfAttention { heads, layers } => {
                check_heads(hidden_dim, heads, layers)?;
                let layers = (0..layers)
                    .map(|l| {
                        let in_dim = if l == 0 { input_dim } else { hidden_dim };
                        MultiHead::new(store, &format!("{name}.layer{l}"), in_dim, hidden_dim, heads, rng)
                    })
                    .collect();
                AttentionParams::SelfAttention { layers }
            }
            AttentionKind::Mlp { depth } => {
                if depth == 0 {
                    return Err(Error::Attention("MLP depth must be at least 1".into()));
                }
                let layers = (0..depth)
                    .map(|k| {
                        let in_dim = if k == 0 { seq_len * input_dim } else { hidden_dim };
                        Affine::new(store, &format!("{name}.mlp{k}"), in_dim, hidden_dim, rng)
                    })
                    .collect();
                AttentionParams::Mlp { layers }
            }
            AttentionKind::Transformer { heads, layers } => {
                check_heads(hidden_dim, heads, layers)?;
                let input_proj = (input_dim != hidden_dim)
                    .then(|| store.add_uniform(format!("{name}.input_proj"), &[input_dim, hidden_dim], input_dim, rng));
                let blocks = (0..layers)
                    .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), hidden_dim, heads, rng))
                    .collect();
                AttentionParams::Transformer { input_proj, blocks }
            }
        };
        Ok(Attention {
            kind,
            pooling,
            seq_len,
            input_dim,
            hidden_dim,
            params,
        })
    }

    /// Width of the aggregated output for sequence and MLP kinds.
    pub fn output_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, inputs: &[Var<'t>]) -> Result<AttentionOutput<'t>> {
        let seq = stack_rows(inputs)?;
        let (len, width) = (inputs.len(), seq.shape()[1]);
        if width != self.input_dim {
            return Err(Error::Attention(format!(
                "{} attention expects width {}, got {width}",
                self.kind.name(),
                self.input_dim
            )));
        }
        match &self.params {
            AttentionParams::LearnedWeight { weights } => {
                Ok(AttentionOutput::Weights(learned_weights(p, *weights, len)?))
            }
            AttentionParams::Vanilla { proj, context } => {
                Ok(AttentionOutput::Weights(vanilla_attention_weights(&seq, proj, *context, p)?))
            }
            AttentionParams::SelfAttention { layers } => {
                Ok(AttentionOutput::Aggregated(self_attention_aggregate(&seq, layers, p, self.pooling)?))
            }
            AttentionParams::Mlp { layers } => Ok(AttentionOutput::Aggregated(mlp_aggregate(&seq, layers, p)?)),
            AttentionParams::Transformer { input_proj, blocks } => Ok(AttentionOutput::Aggregated(
                transformer_aggregate(&seq, *input_proj, blocks, p, self.pooling)?,
            )),
        }
    }
}

fn check_heads(width: usize, heads: usize, layers: usize) -> Result<()> {
    if heads == 0 || layers == 0 {
        return Err(Error::Attention("heads and layers must be at least 1".into()));
    }
    if !width.is_multiple_of(heads) {
        return Err(Error::Attention(format!("model width {width} is not divisible by {heads} heads")));
    }
    Ok(())
}

/// The raw learnable weight vector, shared by every graph.
pub fn learned_weights<'t>(p: &Bound<'t>, weights: ParamId, count: usize) -> Result<Var<'t>> {
    let w = p.get(weights);
    let have = w.shape()[1];
    if have != count {
        return Err(Error::Attention(format!("learned weights hold {have} entries, {count} inputs given")));
    }
    Ok(w)
}

/// `w = softmax_j(c^T tanh(W h_j + b))` over the rows of `seq`; returns `1 x L`.
pub fn vanilla_attention_weights<'t>(seq: &Var<'t>, proj: &Affine, context: ParamId, p: &Bound<'t>) -> Result<Var<'t>> {
    if seq.shape()[1] != proj.in_dim {
        return Err(Error::Attention(format!(
            "vanilla attention expects width {}, got {}",
            proj.in_dim,
            seq.shape()[1]
        )));
    }
    let scores = proj.forward(p, seq)?.tanh().matmul(&p.get(context))?;
    scores.transpose()?.softmax_rows()
}

impl MultiHead {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, width: usize, heads: usize, rng: &mut R) -> Self {
        let head_dim = width / heads;
        let heads = (0..heads)
            .map(|h| HeadParams {
                query: store.add_uniform(format!("{name}.head{h}.query"), &[in_dim, head_dim], in_dim, rng),
                key: store.add_uniform(format!("{name}.head{h}.key"), &[in_dim, head_dim], in_dim, rng),
                value: store.add_uniform(format!("{name}.head{h}.value"), &[in_dim, head_dim], in_dim, rng),
            })
            .collect();
        MultiHead {
            heads,
            head_dim,
            output: Affine::new(store, &format!("{name}.out"), width, width, rng),
        }
    }

    /// Scaled dot-product attention per head; returns the projected output and
    /// each head's `L x L` attention matrix.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut maps = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let q = x.matmul(&p.get(h.query))?;
            let k = x.matmul(&p.get(h.key))?;
            let v = x.matmul(&p.get(h.value))?;
            let attn = q.matmul(&k.transpose()?)?.scale(scale).softmax_rows()?;
            outs.push(attn.matmul(&v)?);
            maps.push(attn);
        }
        let joined = concat(&outs, Axis::Cols)?;
        Ok((self.output.forward(p, &joined)?, maps))
    }
}

/// Stacked multi-head self-attention over the rows of `seq`, then pooling.
pub fn self_attention_aggregate<'t>(seq: &Var<'t>, layers: &[MultiHead], p: &Bound<'t>, pooling: Pooling) -> Result<Var<'t>> {
    let mut x = *seq;
    for layer in layers {
        x = layer.forward(p, &x)?.0;
    }
    pool(&x, pooling)
}

/// `k` stacked `relu(W h + b)` maps over the concatenated inputs.
pub fn mlp_aggregate<'t>(seq: &Var<'t>, layers: &[Affine], p: &Bound<'t>) -> Result<Var<'t>> {
    let shape = seq.shape();
    let flat = shape[0] * shape[1];
    if layers.first().map(|l| l.in_dim) != Some(flat) {
        return Err(Error::Attention(format!(
            "MLP aggregation expects concatenated width {}, got {flat}",
            layers.first().map_or(0, |l| l.in_dim)
        )));
    }
    let mut h = seq.reshape(&[1, flat])?;
    for layer in layers {
        h = layer.forward(p, &h)?.relu();
    }
    Ok(h)
}

impl TransformerBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        let norm = |store: &mut ParamStore, n: &str| LayerNormParams {
            gain: store.add(format!("{name}.{n}.gain"), Tensor::full(&[1, width], 1.0)),
            bias: store.add(format!("{name}.{n}.bias"), Tensor::zeros(&[1, width])),
        };
        let attention = MultiHead::new(store, &format!("{name}.attn"), width, width, heads, rng);
        let norm1 = norm(store, "norm1");
        let ff1 = Affine::new(store, &format!("{name}.ff1"), width, 2 * width, rng);
        let ff2 = Affine::new(store, &format!("{name}.ff2"), 2 * width, width, rng);
        let norm2 = norm(store, "norm2");
        TransformerBlock {
            attention,
            norm1,
            ff1,
            ff2,
            norm2,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let (a, _) = self.attention.forward(p, x)?;
        let x = layer_norm(&x.add(&a)?, &self.norm1, p)?;
        let f = self.ff2.forward(p, &self.ff1.forward(p, &x)?.relu())?;
        layer_norm(&x.add(&f)?, &self.norm2, p)
    }
}

/// Row-wise standardization (before the gain and bias).
pub fn normalize_rows<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape();
    let shape = x.shape();
    let ones = tape.constant(Tensor::full(&[1, shape[1]], 1.0));
    let mean = x.reduce_mean(Axis::Cols)?;
    let centered = x.sub(&mean.matmul(&ones)?)?;
    let var = centered.mul(&centered)?.reduce_mean(Axis::Cols)?;
    let eps = tape.constant(Tensor::full(&[shape[0], 1], LAYER_NORM_EPS));
    let inv_std = var.add(&eps)?.log().scale(-0.5).exp();
    centered.mul(&inv_std.matmul(&ones)?)
}

fn layer_norm<'t>(x: &Var<'t>, norm: &LayerNormParams, p: &Bound<'t>) -> Result<Var<'t>> {
    let n = normalize_rows(x)?;
    let rows = x.shape()[0];
    let ones = x.tape().constant(Tensor::full(&[rows, 1], 1.0));
    n.mul(&ones.matmul(&p.get(norm.gain))?)?.add_row(&p.get(norm.bias))
}

/// Transformer encoder layers (post-norm, residual) over `seq`, then pooling.
pub fn transformer_aggregate<'t>(
    seq: &Var<'t>,
    input_proj: Option<ParamId>,
    blocks: &[TransformerBlock],
    p: &Bound<'t>,
    pooling: Pooling,
) -> Result<Var<'t>> {
    let mut x = match input_proj {
        Some(w) => seq.matmul(&p.get(w))?,
        None => *seq,
    };
    for block in blocks {
        x = block.forward(p, &x)?;
    }
    pool(&x, pooling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows<'t>(tape: &'t Tape, data: &[&[f64]]) -> Vec<Var<'t>> {
        data.iter().map(|r| tape.constant(Tensor::row(r))).collect()
    }

    fn build(kind: AttentionKind, seq_len: usize, dim: usize, pooling: Pooling) -> (Attention, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Attention::new("att", kind, pooling, seq_len, dim, dim, &mut store, &mut rng).unwrap();
        (a, store)
    }

    #[test]
    fn learned_weights_start_at_one_and_are_shared() {
        let (a, store) = build(AttentionKind::LearnedWeight, 4, 2, Pooling::Mean);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g1 = rows(&tape, &[&[1.0, 2.0], &[0.0, 1.0], &[3.0, 3.0], &[1.0, 0.0]]);
        let g2 = rows(&tape, &[&[-1.0, 5.0], &[2.0, 2.0], &[0.5, 0.5], &[9.0, 1.0]]);
        let (AttentionOutput::Weights(w1), AttentionOutput::Weights(w2)) =
            (a.apply(&p, &g1).unwrap(), a.apply(&p, &g2).unwrap())
        else {
            panic!("expected weights")
        };
        assert_eq!(w1.value().data(), &[1.0; 4]);
        assert_eq!(w1.value(), w2.value());
        assert!(a.apply(&p, &g1[..3]).is_err());
    }

    #[test]
    fn vanilla_weight_trivia() {
        let (a, mut store) = build(AttentionKind::Vanilla, 3, 2, Pooling::Mean);
        let weights = |store: &ParamStore, data: &[&[f64]]| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            match a.apply(&p, &rows(&tape, data)).unwrap() {
                AttentionOutput::Weights(w) => w.value().into_data(),
                _ => unreachable!(),
            }
        };
        let same = weights(&store, &[&[0.3, -1.0], &[0.3, -1.0], &[0.3, -1.0]]);
        assert!(same.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(weights(&store, &[&[4.0, 2.0]]), vec![1.0]);

        let AttentionParams::Vanilla { proj, .. } = &a.params else { unreachable!() };
        *store.get_mut(proj.weight) = Tensor::zeros(&[2, 2]);
        let flat = weights(&store, &[&[1.0, 9.0], &[-7.0, 0.0], &[2.0, 2.0]]);
        assert!(flat.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn width_must_divide_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kind = AttentionKind::SelfAttention { heads: 3, layers: 1 };
        let err = Attention::new("a", kind, Pooling::Mean, 2, 4, 4, &mut store, &mut rng).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mh = MultiHead::new(&mut store, "m", 4, 4, 2, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let (_, maps) = mh.forward(&p, &x).unwrap();
        for m in maps {
            let m = m.value();
            for r in 0..3 {
                assert!((m.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singleton_sequence_pooling_agrees() {
        for kind in [
            AttentionKind::SelfAttention { heads: 2, layers: 1 },
            AttentionKind::Transformer { heads: 2, layers: 1 },
        ] {
            let mut outs = Vec::new();
            for pooling in [Pooling::First, Pooling::Mean, Pooling::Max] {
                let (a, store) = build(kind, 1, 4, pooling);
                let tape = Tape::new();
                let p = store.bind(&tape);
                let AttentionOutput::Aggregated(h) = a.apply(&p, &rows(&tape, &[&[0.5, -1.0, 2.0, 0.0]])).unwrap() else {
                    unreachable!()
                };
                outs.push(h.value());
            }
            assert_eq!(outs[0], outs[1]);
            assert_eq!(outs[0], outs[2]);
        }
    }

    #[test]
    fn mlp_zero_weights() {
        let (a, mut store) = build(AttentionKind::Mlp { depth: 1 }, 1, 2, Pooling::Mean);
        let AttentionParams::Mlp { layers } = &a.params else { unreachable!() };
        *store.get_mut(layers[0].weight) = Tensor::zeros(&[2, 2]);
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            match a.apply(&p, &rows(&tape, &[&[3.0, -4.0]])).unwrap() {
                AttentionOutput::Aggregated(h) => h.value().into_data(),
                _ => unreachable!(),
            }
        };
        *store.get_mut(layers[0].bias) = Tensor::zeros(&[1, 2]);
        assert_eq!(run(&store), vec![0.0, 0.0]);
        *store.get_mut(layers[0].bias) = Tensor::row(&[1.0, -1.0]);
        assert_eq!(run(&store), vec![1.0, 0.0]);
    }

    #[test]
    fn mlp_width_mismatch() {
        let (a, store) = build(AttentionKind::Mlp { depth: 2 }, 3, 2, Pooling::Mean);
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(a.apply(&p, &rows(&tape, &[&[1.0, 2.0], &[3.0, 4.0]])).is_err());
    }

    #[test]
    fn pooling_strategies() {
        let tape = Tape::new();
        let seq = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        assert_eq!(pool(&seq, Pooling::Max).unwrap().value().data(), &[3.0, 5.0]);
        assert_eq!(pool(&seq, Pooling::Mean).unwrap().value().data(), &[2.0, 3.5]);
        assert_eq!(pool(&seq, Pooling::First).unwrap().value().data(), &[1.0, 5.0]);
        let one = tape.constant(Tensor::row(&[7.0, -1.0]));
        for s in [Pooling::Mean, Pooling::Max, Pooling::First] {
            assert_eq!(pool(&one, s).unwrap().value().data(), &[7.0, -1.0]);
        }
    }

    #[test]
    fn normalized_rows_are_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = tape.constant(Tensor::new(vec![3, 8], data).unwrap());
        let n = normalize_rows(&x).unwrap().value();
        for r in 0..3 {
            let row = n.row_slice(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
        }
    }
}
