use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use smfgin::attention::{AttentionKind, Pooling};
use smfgin::autodiff::{grad_check, grad_check_multi, Tensor};
use smfgin::fusion::{BranchConfig, SmfModel, Variant};
use smfgin::gin::{GinConfig, GinEncoder};
use smfgin::graph::Graph;
use smfgin::params::{Bound, ParamStore};

fn toy_graph() -> Graph {
    Graph::new("toy", 2, 5, &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (1, 4)], None, 6)
        .unwrap()
        .with_substructures(vec![vec![0, 1, 2], vec![3, 4]])
        .unwrap()
}

fn kinds() -> Vec<AttentionKind> {
    ["learned", "vanilla", "self", "mlp", "transformer"]
        .iter()
        .map(|k| AttentionKind::from_name(k, 2, 1, 2).unwrap())
        .collect()
}

/// Nudges every parameter so no check sits at a special point (unit weights, zero eps).
fn jitter(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    store
        .tensors()
        .map(|t| {
            let data = t.data().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

#[test]
fn softmax_weighted_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::row(&[0.3, -1.2, 2.0, 0.7]);
    for _ in 0..10 {
        let x = Tensor::row(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
        let w = w.clone();
        let err = grad_check(
            move |tape, x| Ok(x.softmax_rows()?.mul(&tape.constant(w.clone()))?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn every_variant_and_kind_is_differentiable_end_to_end() {
    let g = toy_graph();
    let gin = GinConfig {
        num_layers: 3,
        hidden_dim: 4,
        layers_used: vec![2, 3],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in [Variant::Base, Variant::GlobalOnly, Variant::LocalOnly, Variant::Full] {
        let kinds = if variant == Variant::Base { vec![AttentionKind::Vanilla] } else { kinds() };
        for kind in kinds {
            for pooling in [Pooling::Mean, Pooling::Max] {
                let cfg = BranchConfig {
                    variant,
                    global_attn: matches!(variant, Variant::GlobalOnly | Variant::Full).then_some(kind),
                    local_attn: matches!(variant, Variant::LocalOnly | Variant::Full).then_some(kind),
                    pooling,
                    ..BranchConfig::base(gin.clone())
                };
                let mut store = ParamStore::new();
                let model = SmfModel::new(&cfg, 6, &mut store, &mut rng).unwrap();
                let points = jitter(&store, &mut rng);
                let g = g.clone();
                let err = grad_check_multi(
                    move |tape, vars| {
                        let p = Bound::from_vars(vars.to_vec());
                        Ok(model.encode_graph(tape, &p, &g)?.sum())
                    },
                    &points,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "{variant} {} {pooling}: {err}", kind.name());
            }
        }
    }
}

#[test]
fn encoder_gradient_flows_to_every_layer() {
    let g = toy_graph();
    let cfg = GinConfig {
        hidden_dim: 8,
        learn_eps: true,
        layers_used: vec![1, 2, 3, 4, 5],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let enc = GinEncoder::new(&cfg, 6, &mut store, &mut rng).unwrap();
    let points = jitter(&store, &mut rng);
    let err = grad_check_multi(
        move |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let layers = enc.encode_layers(tape, &p, &g)?;
            Ok(smfgin::fusion::concat_layers(&layers)?.sum())
        },
        &points,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
