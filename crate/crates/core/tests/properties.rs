use proptest::prelude::*;

use ordseg_core::encoding::{consistency_correct, CumulativeMap};
use ordseg_core::losses::{cross_entropy, csdt_term, csnp_term, o2_term, LossConfig};
use ordseg_core::maps::{one_hot, softmax, ChannelGrid, LogitMap, ProbabilityMap, SegmentationMask};
use ordseg_core::metrics::{contact_surface, dice_macro, unimodal_pixels, unimodal_pixels_ordered};
use ordseg_core::order::ClassOrder;

fn dag() -> impl Strategy<Value = ClassOrder> {
    (2usize..=10).prop_flat_map(|k| {
        let slots = k * (k - 1) / 2;
        (
            prop::collection::vec(prop::bool::weighted(0.3), slots),
            Just((0..k).collect::<Vec<_>>()).prop_shuffle(),
        )
            .prop_map(move |(keep, perm)| {
                // upward edges under a random relabelling
                let pairs = (0..k).flat_map(|m| (m + 1..k).map(move |n| (m, n)));
                let edges = pairs.zip(keep).filter(|(_, keep)| *keep).map(|((m, n), _)| (perm[m], perm[n]));
                ClassOrder::from_edges(k, edges).unwrap()
            })
    })
}

fn probs_and_mask(max_k: usize) -> impl Strategy<Value = (ProbabilityMap, SegmentationMask)> {
    (2usize..=max_k, 1usize..=6, 1usize..=6).prop_flat_map(|(k, h, w)| {
        (
            prop::collection::vec(-4.0..4.0f64, k * h * w),
            prop::collection::vec(0..k, h * w),
        )
            .prop_map(move |(z, labels)| {
                let probs = softmax(&LogitMap::from_vec(k, h, w, z).unwrap()).unwrap();
                (probs, SegmentationMask::new(h, w, k, labels).unwrap())
            })
    })
}

fn exhaustive_unimodal(values: &[f64]) -> bool {
    (0..values.len()).any(|mode| {
        values[..=mode].windows(2).all(|w| w[0] <= w[1]) && values[mode..].windows(2).all(|w| w[0] >= w[1])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dag_costs_are_symmetric(order in dag()) {
        let k = order.num_classes();
        let costs = order.cost_matrix();
        let lengths = order.path_lengths();
        for m in 0..k {
            for n in 0..k {
                prop_assert_eq!(costs.get(m, n), costs.get(n, m));
                prop_assert_eq!(lengths.get(m, n).min(lengths.get(n, m)), 0);
            }
        }
        let again = ClassOrder::from_edges(k, order.edges().to_vec()).unwrap();
        prop_assert_eq!(again.path_lengths(), lengths);
    }

    #[test]
    fn loss_signs_and_bounds((probs, target) in probs_and_mask(6), use_dag in any::<bool>(), seed in any::<u64>()) {
        let k = probs.num_classes();
        let order = if use_dag {
            let edges = (1..k).map(|n| ((seed as usize + n) % n, n));
            ClassOrder::from_edges(k, edges).unwrap()
        } else {
            ClassOrder::chain(k).unwrap()
        };
        let c = LossConfig::default();
        prop_assert!(cross_entropy(&probs, &target).unwrap().value >= 0.0);
        prop_assert!(o2_term(&probs, &target, &order, c.delta_margin).unwrap().value >= 0.0);
        prop_assert!(csnp_term(&probs, &order).unwrap().value >= 0.0);
        let csdt = csdt_term(&probs, &order, c.delta_dt, c.gamma, c.dt_metric).unwrap().value;
        let bound = order.cost_matrix().max_cost() * (k.saturating_sub(2).max(1)) as f64;
        prop_assert!(csdt <= 0.0 && csdt >= -bound, "csdt {} bound {}", csdt, bound);
    }

    #[test]
    fn csnp_vanishes_exactly_without_costly_contacts(k in 2usize..=6, h in 1usize..=6, w in 1usize..=6, seed in any::<u64>()) {
        let labels = (0..h * w).map(|p| (seed.rotate_left(p as u32 % 64) as usize ^ p) % k).collect();
        let mask = SegmentationMask::new(h, w, k, labels).unwrap();
        let order = ClassOrder::chain(k).unwrap();
        let probs = one_hot(&mask, k).unwrap();
        let value = csnp_term(&probs, &order).unwrap().value;
        let costs = order.cost_matrix();
        let mut costly = false;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w && costs.get(mask.get(i, j), mask.get(i, j + 1)) > 0.0 { costly = true; }
                if i + 1 < h && costs.get(mask.get(i, j), mask.get(i + 1, j)) > 0.0 { costly = true; }
            }
        }
        prop_assert_eq!(value == 0.0, !costly);
        prop_assert_eq!(value == 0.0, contact_surface(&mask, &order).unwrap() == 0.0);
    }

    #[test]
    fn csnp_is_reversal_invariant((probs, _) in probs_and_mask(6)) {
        let (k, h, w) = probs.grid().shape();
        let n = h * w;
        let mut reversed = Vec::with_capacity(k * n);
        for c in (0..k).rev() {
            reversed.extend_from_slice(probs.grid().channel(c));
        }
        let reversed = ProbabilityMap::from_vec(k, h, w, reversed).unwrap();
        let order = ClassOrder::chain(k).unwrap();
        let a = csnp_term(&probs, &order).unwrap().value;
        let b = csnp_term(&reversed, &order).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn metrics_are_fractions((probs, target) in probs_and_mask(5), labels in prop::collection::vec(0usize..5, 36)) {
        let (k, h, w) = probs.grid().shape();
        let pred = SegmentationMask::new(h, w, k, labels[..h * w].iter().map(|l| l % k).collect()).unwrap();
        let order = ClassOrder::chain(k).unwrap();
        let cs = contact_surface(&pred, &order).unwrap();
        prop_assert!((0.0..=1.0).contains(&cs));
        let up = unimodal_pixels(&probs);
        prop_assert!((0.0..=1.0).contains(&up));
        let dice = dice_macro(&pred, &target, k).unwrap();
        for d in dice.dice_per_class.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(d));
        }
    }

    #[test]
    fn unimodal_pixels_match_mode_enumeration(k in 2usize..=6, h in 1usize..=5, w in 1usize..=5, levels in prop::collection::vec(0u8..4, 180)) {
        // coarse levels produce plenty of ties
        let n = h * w;
        let mut data = vec![0.0; k * n];
        for p in 0..n {
            let raw: Vec<f64> = (0..k).map(|c| 1.0 + levels[(c * n + p) % levels.len()] as f64).collect();
            let total: f64 = raw.iter().sum();
            for c in 0..k {
                data[c * n + p] = raw[c] / total;
            }
        }
        let probs = ProbabilityMap::from_vec(k, h, w, data.clone()).unwrap();
        let expected = (0..n)
            .filter(|&p| exhaustive_unimodal(&(0..k).map(|c| data[c * n + p]).collect::<Vec<_>>()))
            .count() as f64 / n as f64;
        prop_assert_eq!(unimodal_pixels(&probs), expected);
        prop_assert_eq!(unimodal_pixels_ordered(&probs, &ClassOrder::chain(k).unwrap()).unwrap(), expected);
    }

    #[test]
    fn corrected_maps_are_monotone(k in 2usize..=8, h in 1usize..=6, w in 1usize..=6, raw in prop::collection::vec(0.0..=1.0f64, 7 * 36)) {
        let n = h * w;
        let grid = ChannelGrid::new(k - 1, h, w, raw[..(k - 1) * n].to_vec()).unwrap();
        let corrected = consistency_correct(&CumulativeMap::new(grid).unwrap());
        let data = corrected.grid().as_slice();
        for c in 1..k - 1 {
            for p in 0..n {
                prop_assert!(data[c * n + p] <= data[(c - 1) * n + p]);
            }
        }
    }
}
