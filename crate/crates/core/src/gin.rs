//! GIN message passing with a mean READOUT after each layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_layers: usize,
    /// Initial value of every layer's epsilon.
    pub eps: f64,
    pub learn_eps: bool,
    /// 1-based indices of the layers whose readouts form the graph
    /// representation, in increasing order.
    pub layers_used: Vec<usize>,
}

impl Default for GinConfig {
    fn default() -> Self {
        GinConfig {
            num_layers: 5,
            hidden_dim: 64,
            mlp_layers: 2,
            eps: 0.0,
            learn_eps: false,
            layers_used: vec![2, 3, 4, 5],
        }
    }
}

impl GinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.mlp_layers == 0 {
            return Err(Error::Config("GIN layers, hidden_dim and mlp_layers must be positive".into()));
        }
        if self.layers_used.is_empty()
            || self.layers_used.iter().any(|&l| l == 0 || l > self.num_layers)
            || self.layers_used.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "layers_used {:?} must be a non-empty increasing subset of 1..={}",
                self.layers_used, self.num_layers
            )));
        }
        Ok(())
    }
}

/// `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Affine {
            weight: store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng),
            bias: store.add_uniform(format!("{name}.bias"), &[1, out_dim], in_dim, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&p.get(self.weight))?.add_row(&p.get(self.bias))
    }
}

/// Affine maps with relu between consecutive ones (none after the last).
pub fn mlp_forward<'t>(layers: &[Affine], p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    let mut h = *x;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            h = h.relu();
        }
        h = layer.forward(p, &h)?;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct GinLayer {
    pub mlp: Vec<Affine>,
    pub eps: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct GinEncoder {
    pub config: GinConfig,
    pub input_dim: usize,
    pub layers: Vec<GinLayer>,
}

impl GinEncoder {
    pub fn new<R: Rng>(config: &GinConfig, input_dim: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut mlp = Vec::with_capacity(config.mlp_layers);
            for k in 0..config.mlp_layers {
                let in_dim = if l == 0 && k == 0 { input_dim } else { config.hidden_dim };
                mlp.push(Affine::new(store, &format!("gin.{l}.mlp.{k}"), in_dim, config.hidden_dim, rng));
            }
            let eps = config
                .learn_eps
                .then(|| store.add(format!("gin.{l}.eps"), Tensor::scalar(config.eps)));
            layers.push(GinLayer { mlp, eps });
        }
        Ok(GinEncoder {
            config: config.clone(),
            input_dim,
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Readouts of the configured layers for `g`, each `1 x hidden_dim`.
    pub fn encode_layers<'t>(&self, tape: &'t Tape, p: &Bound<'t>, g: &Graph) -> Result<Vec<Var<'t>>> {
        if g.feature_dim() != self.input_dim {
            return Err(Error::shape("encode_layers", &[g.features().shape(), &[self.input_dim]]));
        }
        let adj = tape.constant(g.adjacency());
        let mut h = tape.constant(g.features().clone());
        let mut out = Vec::with_capacity(self.config.layers_used.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let eps = match layer.eps {
                Some(id) => EpsTerm::Learned(p.get(id)),
                None => EpsTerm::Fixed(self.config.eps),
            };
            h = gin_layer_forward(&h, &adj, &layer.mlp, p, eps)?;
            if self.config.layers_used.contains(&(l + 1)) {
                out.push(readout(&h)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum EpsTerm<'t> {
    Fixed(f64),
    Learned(Var<'t>),
}

/// `MLP((1 + eps) * H_v + sum_{u in N(v)} H_u)` for every node `v`.
pub fn gin_layer_forward<'t>(
    h: &Var<'t>,
    adj: &Var<'t>,
    mlp: &[Affine],
    p: &Bound<'t>,
    eps: EpsTerm<'t>,
) -> Result<Var<'t>> {
    let (hs, as_) = (h.shape(), adj.shape());
    if as_.len() != 2 || as_[0] != as_[1] || hs[0] != as_[0] {
        return Err(Error::shape("gin_layer", &[&hs, &as_]));
    }
    let neigh = adj.matmul(h)?;
    let own = match eps {
        EpsTerm::Fixed(0.0) => *h,
        EpsTerm::Fixed(e) => h.scale(1.0 + e),
        EpsTerm::Learned(e) => {
            let one = h.tape().constant(Tensor::scalar(1.0));
            one.add(&e)?.mul(h)?
        }
    };
    mlp_forward(mlp, p, &own.add(&neigh)?)
}

/// Column-wise mean of node representations.
pub fn readout<'t>(h: &Var<'t>) -> Result<Var<'t>> {
    h.reduce_mean(Axis::Rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_mlp(store: &mut ParamStore, d: usize) -> Vec<Affine> {
        (0..2)
            .map(|k| Affine {
                weight: store.add(format!("w{k}"), Tensor::identity(d)),
                bias: store.add(format!("b{k}"), Tensor::zeros(&[1, d])),
                in_dim: d,
                out_dim: d,
            })
            .collect()
    }

    #[test]
    fn isolated_nodes_pass_through_identity() {
        let mut store = ParamStore::new();
        let mlp = identity_mlp(&mut store, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.5]]).unwrap());
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let out = gin_layer_forward(&x, &a, &mlp, &p, EpsTerm::Fixed(0.0)).unwrap();
        assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 0.5]);
    }

    #[test]
    fn single_edge_sums_neighbours() {
        let mut store = ParamStore::new();
        let mlp = identity_mlp(&mut store, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let g = Graph::new("e", 0, 2, &[(0, 1)], None, 2).unwrap();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.5]]).unwrap());
        let a = tape.constant(g.adjacency());
        let out = gin_layer_forward(&x, &a, &mlp, &p, EpsTerm::Fixed(0.0)).unwrap().value();
        assert_eq!(out.row_slice(0), &[4.0, 2.5]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut store = ParamStore::new();
        let mlp = identity_mlp(&mut store, 2);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(gin_layer_forward(&x, &a, &mlp, &p, EpsTerm::Fixed(0.0)).is_err());
    }

    #[test]
    fn readout_cases() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::row(&[1.0, -2.0]));
        assert_eq!(readout(&one).unwrap().value().data(), &[1.0, -2.0]);
        let pair = tape.constant(Tensor::from_rows(&[vec![1.5, -3.0], vec![-1.5, 3.0]]).unwrap());
        assert_eq!(readout(&pair).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_layer_edgeless_is_feature_mean() {
        let cfg = GinConfig {
            num_layers: 1,
            hidden_dim: 3,
            layers_used: vec![1],
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let enc = GinEncoder::new(&cfg, 3, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (i, t) in store.tensors_mut().enumerate() {
            *t = if i % 2 == 0 { Tensor::identity(3) } else { Tensor::zeros(&[1, 3]) };
        }
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 4.0, 1.0]]).unwrap();
        let g = Graph::new("g", 0, 2, &[], Some(x), 3).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let h = enc.encode_layers(&tape, &p, &g).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].value().data(), &[0.5, 2.0, 1.5]);
    }

    #[test]
    fn default_config_gives_four_64_vectors() {
        let mut store = ParamStore::new();
        let enc = GinEncoder::new(&GinConfig::default(), 16, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for m in [1, 7] {
            let edges: Vec<_> = (1..m).map(|i| (i - 1, i)).collect();
            let g = Graph::new("p", 0, m, &edges, None, 16).unwrap();
            let tape = Tape::new();
            let h = enc.encode_layers(&tape, &store.bind(&tape), &g).unwrap();
            assert_eq!(h.len(), 4);
            assert!(h.iter().all(|v| v.shape() == vec![1, 64]));
        }
    }

    #[test]
    fn rejects_bad_layer_selection() {
        let cfg = GinConfig {
            layers_used: vec![0, 2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GinConfig {
            layers_used: vec![6],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
