mod common;

use featroute::attribution::{feature_saliency, LayerKeep, LayerScores};
use featroute::autodiff::Target;
use featroute::network::{lenet, LayerSpec};
use featroute::routeviz::{shared_ratio, RouteGraph};
use featroute::surgery::bridge;
use featroute::tensor::softmax_prob;
use featroute::{build_mask_raw, AttributionMap, Model, RouteMask, SaliencyMode, Tensor};
use proptest::prelude::*;

fn small_model() -> Model {
    let layers = vec![
        LayerSpec::conv(4, 1, 3),
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::linear(6, 4 * 4 * 4),
        LayerSpec::Relu,
        LayerSpec::linear(3, 6),
    ];
    Model::build(layers, [1, 6, 6], vec![0, 1, 2], 3).unwrap()
}

fn attr_for(scores: Vec<Vec<f64>>) -> AttributionMap {
    AttributionMap {
        class: 1,
        mode: SaliencyMode::Positive,
        target: Target::Probability,
        image_count: 1,
        images: vec![0],
        policy_deviation: None,
        layers: scores
            .into_iter()
            .enumerate()
            .map(|(index, scores)| LayerScores { index, scores })
            .collect(),
    }
}

fn scores_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (
        prop::collection::vec(0.0f64..10.0, 4),
        prop::collection::vec(0.0f64..10.0, 6),
        prop::collection::vec(0.0f64..10.0, 3),
    )
        .prop_map(|(a, b, c)| vec![a, b, c])
}

fn keep_strategy(widths: &'static [usize]) -> impl Strategy<Value = Vec<Vec<bool>>> {
    widths
        .iter()
        .map(|&n| prop::collection::vec(any::<bool>(), n))
        .collect::<Vec<_>>()
}

fn mask_of(keeps: Vec<Vec<bool>>) -> RouteMask {
    RouteMask {
        classes: vec![0],
        mode: SaliencyMode::Positive,
        multiplier: 1.0,
        depth: keeps.len() - 1,
        fallback_layers: vec![],
        layers: keeps
            .into_iter()
            .enumerate()
            .map(|(index, keep)| LayerKeep { index, keep })
            .collect(),
    }
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let t = Tensor::vector(logits.clone());
        let p = softmax_prob(&t).unwrap();
        let sum: f64 = p.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.data().iter().all(|&v| v > 0.0));
        let q = softmax_prob(&Tensor::vector(logits.iter().map(|v| v + shift).collect())).unwrap();
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn f32_softmax_sums_to_one(logits in prop::collection::vec(-80.0f32..80.0, 1..16)) {
        let p = softmax_prob(&Tensor::vector(logits)).unwrap();
        let sum: f64 = p.data().iter().map(|&v| f64::from(v)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn saliency_modes_decompose(grad in prop::collection::vec(-5.0f64..5.0, 0..64)) {
        let pos = feature_saliency(&grad, SaliencyMode::Positive);
        let neg = feature_saliency(&grad, SaliencyMode::Negative);
        let abs = feature_saliency(&grad, SaliencyMode::Absolute);
        prop_assert!((abs - (pos + neg)).abs() < 1e-6);
        prop_assert!(pos >= 0.0 && neg >= 0.0);
    }

    #[test]
    fn positive_saliency_ignores_negative_gradients(grad in prop::collection::vec(-5.0f64..-1e-9, 1..32)) {
        prop_assert_eq!(feature_saliency(&grad, SaliencyMode::Positive), 0.0);
    }

    #[test]
    fn raising_the_threshold_never_adds_units(scores in scores_strategy(), x in 0.0f64..3.0, dx in 0.0f64..2.0) {
        let m = small_model();
        let attr = attr_for(scores);
        for depth in 0..3 {
            let lo = build_mask_raw(&attr, x, &m, depth).unwrap();
            let hi = build_mask_raw(&attr, x + dx, &m, depth).unwrap();
            for (a, b) in lo.layers.iter().zip(&hi.layers) {
                for (ka, kb) in a.keep.iter().zip(&b.keep) {
                    prop_assert!(*ka || !*kb);
                }
            }
            prop_assert!(bridge(&hi, &m).unwrap().param_count(&m) <= bridge(&lo, &m).unwrap().param_count(&m));
        }
    }

    #[test]
    fn shared_ratio_is_symmetric_and_bounded(
        a in keep_strategy(&[4, 6, 3]),
        b in keep_strategy(&[4, 6, 3]),
    ) {
        let (ma, mb) = (mask_of(a), mask_of(b));
        let ab = shared_ratio(&ma, &mb).unwrap();
        let ba = shared_ratio(&mb, &ma).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!(ab.iter().all(|&r| (0.0..=1.0).contains(&r)));
        for (l, r) in ma.layers.iter().zip(shared_ratio(&ma, &ma).unwrap()) {
            prop_assert_eq!(r, if l.keep.contains(&true) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn mask_round_trips_through_json(a in keep_strategy(&[4, 6, 3]), x in 0.0f64..4.0) {
        let mut m = mask_of(a);
        m.multiplier = x;
        let text = serde_json::to_string(&m).unwrap();
        prop_assert_eq!(serde_json::from_str::<RouteMask>(&text).unwrap(), m);
    }

    #[test]
    fn attribution_round_trips_through_json(scores in scores_strategy()) {
        let a = attr_for(scores);
        let text = serde_json::to_string(&a).unwrap();
        prop_assert_eq!(serde_json::from_str::<AttributionMap>(&text).unwrap(), a);
    }

    #[test]
    fn route_graph_round_trips_and_counts_nodes(a in keep_strategy(&[4, 6, 3]), b in keep_strategy(&[4, 6, 3])) {
        let m = small_model();
        let masks = [mask_of(a), mask_of(b)];
        let g = RouteGraph::build(&masks, &m).unwrap();
        let union = featroute::union_masks(&masks).unwrap();
        prop_assert_eq!(g.nodes.len(), union.kept_counts().iter().sum::<usize>());
        prop_assert!(g.edges.iter().all(|e| e.layer + 1 < 3));
        prop_assert!(g.nodes.iter().all(|n| !n.owners.is_empty()));
        prop_assert_eq!(RouteGraph::from_structured(&g.to_structured().unwrap()).unwrap(), g);
    }

    #[test]
    fn model_round_trips_bit_exactly(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m");
        let m = Model::build(lenet([1, 16, 16], 3), [1, 16, 16], vec![4, 7, 9], seed).unwrap();
        featroute::save_model(&m, &path).unwrap();
        let back = featroute::load_model(&path).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a.weight), bits(&b.weight));
            prop_assert_eq!(bits(&a.bias), bits(&b.bias));
        }
        prop_assert_eq!(back, m);
    }
}
