//! Property tests for invariants that should hold for any input.

use ebm_lens::attacks::project_linf;
use ebm_lens::data::{synth_mixture, Dataset, Split};
use ebm_lens::energy;
use ebm_lens::ndcore::Array;
use ebm_lens::nets::{ModelSpec, ModelState};
use ebm_lens::shell::Histogram;
use ebm_lens::train::{cyclic_lr, moving_average, quantile};
use proptest::prelude::*;

fn logits(k: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_is_feasible_and_idempotent(
        pairs in prop::collection::vec((-0.5f64..1.5, 0.0f64..1.0), 1..64),
        eps in 0.0f64..0.5,
    ) {
        let n = pairs.len();
        let cand = Array::new(vec![n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let orig = Array::new(vec![n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let p = project_linf(&cand, &orig, eps, [0.0, 1.0]).unwrap();
        for (a, o) in p.data().iter().zip(orig.data()) {
            prop_assert!((a - o).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(a));
        }
        prop_assert_eq!(project_linf(&p, &orig, eps, [0.0, 1.0]).unwrap(), p);
    }

    #[test]
    fn cross_entropy_is_the_energy_gap(z in logits(2..40), pick in 0usize..1000) {
        let y = pick % z.len();
        let pair = energy::EnergyPair::from_logits(&z, y).unwrap();
        let ce = energy::softmax_cross_entropy(&z, y).unwrap();
        prop_assert!((pair.cross_entropy() - ce).abs() < 1e-9);
        prop_assert!(ce >= 0.0);
        // E(x) ≤ E(x, y): the marginal never exceeds any joint energy
        prop_assert!(pair.marginal <= pair.joint + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_decomposes(a in logits(2..20), shift in -5.0f64..5.0) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift * (i % 3) as f64).collect();
        let d = energy::kl_ebm(&a, &b).unwrap();
        prop_assert!(d.total >= -1e-12);
        prop_assert!((d.total - energy::kl_direct(&a, &b).unwrap()).abs() < 1e-9);
        // shifting every logit by a constant changes nothing
        let c: Vec<f64> = a.iter().map(|v| v + 7.5).collect();
        prop_assert!(energy::kl_direct(&a, &c).unwrap().abs() < 1e-9);
    }

    #[test]
    fn weat_weight_is_bounded_and_decreasing(e in -200.0f64..200.0, extra in 0.0f64..50.0) {
        let w = energy::weat_weight(e);
        prop_assert!(w > 0.0 && w <= 1.0 / std::f64::consts::LN_2 + 1e-15);
        prop_assert!((w - energy::weat_weight(-e)).abs() < 1e-15);
        prop_assert!(energy::weat_weight(e.abs() + extra) <= w + 1e-15);
    }

    #[test]
    fn histograms_keep_every_value(
        nat in prop::collection::vec(-50.0f64..50.0, 1..200),
        adv in prop::collection::vec(-50.0f64..50.0, 1..200),
        bins in 1usize..60,
    ) {
        let h = Histogram::shared(&nat, &adv, bins).unwrap();
        prop_assert_eq!(h.natural.iter().sum::<usize>(), nat.len());
        prop_assert_eq!(h.adversarial.iter().sum::<usize>(), adv.len());
        prop_assert_eq!(h.edges.len(), bins + 1);
        prop_assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cyclic_lr_stays_in_range(peak in 1e-4f64..1.0, progress in 0.0f64..=1.0) {
        let lr = cyclic_lr(peak, progress);
        prop_assert!((0.0..=peak + 1e-15).contains(&lr));
        prop_assert!((lr - cyclic_lr(peak, 1.0 - progress)).abs() < 1e-12);
    }

    #[test]
    fn smoothing_and_quantiles(v in prop::collection::vec(-10.0f64..10.0, 1..80), q in 0.0f64..=1.0) {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = moving_average(&v, 5);
        prop_assert_eq!(s.len(), v.len());
        prop_assert!(s.iter().all(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12));
        let x = quantile(&v, q);
        prop_assert!(x >= lo && x <= hi);
        prop_assert!(quantile(&v, q * 0.5) <= x + 1e-12);
    }

    #[test]
    fn checkpoints_round_trip(hidden in prop::collection::vec(1usize..12, 1..3), k in 2usize..5, seed in any::<u64>()) {
        let m = ModelState::init(ModelSpec::mlp(5, &hidden, k), seed).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        let back = ModelState::read_checkpoint(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back.spec, &m.spec);
        prop_assert_eq!(&back.params, &m.params);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 1usize..200) {
        let m = ModelState::init(ModelSpec::mlp(3, &[4], 2), 1).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(ModelState::read_checkpoint(&mut &bytes[..keep]).is_err());
    }

    #[test]
    fn holdout_partitions_the_data(n in 20usize..200, frac in 0.01f64..0.4, seed in any::<u64>()) {
        let images = Array::new(vec![n, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        let labels = (0..n).map(|i| i % 2).collect();
        let d = Dataset::new(images, labels, 2, Split::Train, "ids").unwrap();
        let (train, val) = d.split_holdout(frac, seed);
        let mut ids: Vec<f64> = train.images.data().to_vec();
        if let Some(v) = &val {
            ids.extend_from_slice(v.images.data());
        }
        ids.sort_by(f64::total_cmp);
        prop_assert_eq!(ids, (0..n).map(|i| i as f64 / n as f64).collect::<Vec<_>>());
    }
}

#[test]
fn mixture_is_deterministic_and_balanced() {
    let a = synth_mixture(3, 50, 4, 6.0, 9).unwrap();
    let b = synth_mixture(3, 50, 4, 6.0, 9).unwrap();
    assert_eq!(a.images, b.images);
    for y in 0..3 {
        assert_eq!(a.class_indices(y).len(), 50);
    }
    assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
