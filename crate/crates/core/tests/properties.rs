use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smfgin::autodiff::Tape;
use smfgin::fusion::{BranchConfig, SmfModel};
use smfgin::gin::GinConfig;
use smfgin::graph::{parse_dataset_str, sample_episode, write_dataset, ClassPool, DatasetSplit, Graph};
use smfgin::meta::{argmin, fit_transform};
use smfgin::params::ParamStore;
use smfgin::train::EvalReport;

/// Random simple graph on `m` nodes from an edge mask.
fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..9).prop_flat_map(|m| {
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|u| (u + 1..m).map(move |v| (u, v))).collect();
        let n = pairs.len();
        (Just(m), proptest::collection::vec(any::<bool>(), n)).prop_map(move |(m, mask)| {
            (m, pairs.iter().zip(mask).filter(|(_, keep)| *keep).map(|(e, _)| *e).collect())
        })
    })
}

fn permutation(m: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..m).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_text_round_trips(graphs in proptest::collection::vec((graph_strategy(), 0i64..4, any::<bool>()), 1..8)) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, ((m, edges), label, explicit)) in graphs.into_iter().enumerate() {
            let features = explicit.then(|| {
                smfgin::autodiff::Tensor::from_rows(&(0..m).map(|v| vec![v as f64 * 0.5, -1.25, 0.0, 1e-7]).collect::<Vec<_>>()).unwrap()
            });
            let label = if explicit { 10 + label } else { label };
            let g = Graph::new(format!("g{i}"), label, m, &edges, features, 4).unwrap();
            if explicit { test.push(g) } else { train.push(g) }
        }
        let split = DatasetSplit::new(train, Vec::new(), test).unwrap();
        let text = write_dataset(&split).unwrap();
        let back = parse_dataset_str(&text, 4).unwrap();
        prop_assert_eq!(back, split);
    }

    #[test]
    fn embeddings_ignore_node_order((m, edges) in graph_strategy(), seed in 0u64..1000, perm_seed in any::<u64>()) {
        let g = Graph::new("g", 0, m, &edges, None, 5).unwrap();
        let perm = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..m).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            p
        };
        let cfg = BranchConfig::base(GinConfig { hidden_dim: 8, ..Default::default() });
        let mut store = ParamStore::new();
        let model = SmfModel::new(&cfg, 5, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let embed = |g: &Graph| {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            model.encode_graph(&tape, &p, g).unwrap().value().into_data()
        };
        let (a, b) = (embed(&g), embed(&g.permuted(&perm).unwrap()));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn permuting_twice_by_inverse_restores_graph((m, edges) in graph_strategy(), p in (2usize..9).prop_flat_map(permutation)) {
        prop_assume!(p.len() == m);
        let g = Graph::new("g", 1, m, &edges, None, 16).unwrap();
        let mut inv = vec![0; m];
        for (i, &j) in p.iter().enumerate() { inv[j] = i; }
        let back = g.permuted(&p).unwrap().permuted(&inv).unwrap();
        prop_assert_eq!(back.edges(), g.edges());
        prop_assert_eq!(back.degrees(), g.degrees());
    }

    #[test]
    fn transformed_embeddings_are_centered_and_unit(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 3..20)) {
        let t = fit_transform(&rows).unwrap();
        for j in 0..4 {
            let m = rows.iter().map(|r| r[j] - t.mean[j]).sum::<f64>() / rows.len() as f64;
            prop_assert!(m.abs() <= 1e-9);
        }
        for r in &rows {
            if let Ok(z) = t.apply(r) {
                let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn squared_and_plain_distances_pick_the_same_class(
        q in proptest::collection::vec(-3.0f64..3.0, 3),
        cs in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 2..6),
    ) {
        let sq: Vec<f64> = cs.iter().map(|c| c.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let plain: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
        prop_assert_eq!(argmin(&sq), argmin(&plain));
    }

    #[test]
    fn episodes_have_disjoint_sets_and_exact_counts(seed in any::<u64>(), n in 1usize..4, k in 1usize..4, q in 1usize..4) {
        let graphs: Vec<Graph> = (0..40).map(|i| Graph::new(format!("g{i}"), (i % 5) as i64, 3, &[(0, 1)], None, 4).unwrap()).collect();
        let pool = ClassPool::from_graphs(&graphs);
        let task = sample_episode(&pool, n, k, q, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(task.way(), n);
        let mut seen = std::collections::BTreeSet::new();
        for (c, (s, qs)) in task.support.iter().zip(&task.query).enumerate() {
            prop_assert_eq!((s.len(), qs.len()), (k, q));
            for &g in s.iter().chain(qs) {
                prop_assert!(seen.insert(g));
                prop_assert_eq!(graphs[g].label, task.classes[c]);
            }
        }
    }

    #[test]
    fn report_std_matches_recomputation(acc in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
        let r = EvalReport::from_accuracies(acc.clone(), 3, 5, 15).unwrap();
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((r.std - var.sqrt()).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.mean));
        prop_assert!((r.ci95 - 1.96 * r.std / n.sqrt()).abs() <= 1e-12);
    }
}
