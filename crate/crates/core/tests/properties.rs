use forge_core::model::{init_model, ModelSpec};
use forge_core::params::Parameters;
use forge_core::surgery::{build_control_variant, build_surrogate, plan_surgery};
use forge_core::trajectory::{kl_deviation, transition_layer};
use forge_core::training::dynamic_loss_weights;
use ndarray::Array2;
use proptest::prelude::*;

fn small_spec(n_layers: usize) -> ModelSpec {
    let mut s = ModelSpec::toy(72);
    s.n_layers = n_layers;
    s.d_model = 16;
    s.n_heads = 2;
    s.max_seq_len = 16;
    s
}

fn plan_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (4usize..=16).prop_flat_map(|l| (Just(l), 1..l - 1)).prop_flat_map(|(l, a)| (Just(l), Just(a), a..l - 1))
}

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn weights_sum_to_token_count(lengths in prop::collection::vec(2usize..300, 1..40), ord in 0.0f64..3.0) {
        let w = dynamic_loss_weights(&lengths, ord).unwrap();
        let total: f64 = lengths.iter().map(|&l| l as f64).sum();
        prop_assert!((w.iter().sum::<f64>() - total).abs() <= 1e-9 * total);
        prop_assert!(w.iter().all(|&x| x > 0.0 && x.is_finite()));
    }

    #[test]
    fn longer_groups_never_weigh_more(lengths in prop::collection::vec(2usize..300, 2..20), ord in 0.0f64..3.0) {
        let w = dynamic_loss_weights(&lengths, ord).unwrap();
        for i in 0..lengths.len() {
            for j in 0..lengths.len() {
                if lengths[i] < lengths[j] {
                    prop_assert!(w[i] >= w[j] * (1.0 - 1e-12));
                }
            }
        }
    }

    #[test]
    fn single_group_weight_is_its_length(l in 2usize..1000, ord in 0.0f64..5.0) {
        prop_assert_eq!(dynamic_loss_weights(&[l], ord).unwrap(), vec![l as f64]);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal((q, p) in (2usize..80).prop_flat_map(|n| (probs(n), probs(n)))) {
        prop_assert!(kl_deviation(&q, &p).unwrap() >= -1e-12);
        prop_assert_eq!(kl_deviation(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn transition_moves_down_as_spread_tolerance_grows(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..4.0, 12), 2..8),
        lo in 0.0f64..0.5,
        extra in 0.0f64..0.5,
        tol_mono in 0.0f64..0.5,
    ) {
        let n = rows.len();
        let kl = Array2::from_shape_vec((n, 12), rows.concat()).unwrap();
        let a = transition_layer(&kl.view(), lo, tol_mono).unwrap();
        let b = transition_layer(&kl.view(), lo + extra, tol_mono).unwrap();
        if let Some(x) = a {
            prop_assert!(matches!(b, Some(y) if y <= x));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn surgery_plans_keep_their_invariants((l, a, b) in plan_strategy(), seed in 0u64..1000) {
        let spec = small_spec(l);
        let target = init_model(&spec, seed).unwrap();
        let plan = plan_surgery(&spec, a, b).unwrap();
        let s = build_surrogate(&target, &plan).unwrap();
        prop_assert_eq!(s.model.n_layers(), l - (b - a + 1) + 1);
        let origin = s.layer_origin();
        prop_assert_eq!(origin.iter().filter(|o| o.is_none()).count(), 1);
        for (j, o) in origin.iter().enumerate() {
            let src = o.unwrap_or(a);
            prop_assert!(s.model.layers[j] == target.layers[src]);
        }
        prop_assert_eq!(origin[0], Some(0));
        prop_assert_eq!(*origin.last().unwrap(), Some(l - 1));
        prop_assert!(s.frozen_intact(&target).unwrap());
        let prefix = format!("layers.{a}.");
        prop_assert!(s.trainable_mask.iter().all(|n| n.starts_with(&prefix)));

        let ids: Vec<u32> = (0..10).map(|i| (i * 7 + seed as u32) % 72).collect();
        let x = target.forward_prefix(&ids, &[], a).unwrap();
        let y = s.model.forward_prefix(&ids, &[], a).unwrap();
        prop_assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));

        let c = build_control_variant(&target, &plan).unwrap();
        prop_assert_eq!(c.model.checksum(), s.model.checksum());
        prop_assert!(c.trainable_mask.is_superset(&s.trainable_mask));
        let opened = (0..a).filter(|j| (a - j) % 2 == 0).count();
        let per_block = s.trainable_mask.len();
        prop_assert_eq!(c.trainable_mask.len(), per_block * (1 + opened));
    }
}

#[test]
fn invalid_plans_are_refused() {
    let spec = small_spec(8);
    assert!(plan_surgery(&spec, 0, 3).is_err());
    assert!(plan_surgery(&spec, 2, 7).is_err());
    assert!(plan_surgery(&spec, 5, 4).is_err());
    assert!(plan_surgery(&spec, 1, 6).is_ok());
}
