mod common;

use footwatch_core::detector::NullDistribution;
use footwatch_core::evaluation::{
    best_balanced_accuracy, best_f1, cost_curve, evaluate, expected_random_cost, roc_auc, LabeledScore,
};
use footwatch_core::footprint::{footprint_at, log_likelihood, FootprintModel};
use footwatch_core::report::{rle_decode, rle_encode};
use footwatch_core::spectral::{smooth, ProbMap, ProbMapSeries};
use proptest::collection::vec;
use proptest::prelude::*;

/// Scores with at least one positive and one negative.
fn labeled() -> impl Strategy<Value = Vec<LabeledScore>> {
    vec((-5.0f64..5.0, any::<bool>()), 2..40)
        .prop_filter("both classes", |v| v.iter().any(|s| s.1) && v.iter().any(|s| !s.1))
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (score, label))| LabeledScore::new(format!("l{i:02}"), score, label, None))
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_ignore_monotone_rescaling(scores in labeled()) {
        let mapped: Vec<LabeledScore> = scores
            .iter()
            .map(|s| LabeledScore { score: s.score.exp(), ..s.clone() })
            .collect();
        let (pts, auc) = roc_auc(&scores).unwrap();
        let (pts_m, auc_m) = roc_auc(&mapped).unwrap();
        prop_assert!((auc - auc_m).abs() < 1e-12);
        prop_assert_eq!(pts, pts_m);
        let ba = best_balanced_accuracy(&scores).unwrap().value;
        prop_assert!((ba - best_balanced_accuracy(&mapped).unwrap().value).abs() < 1e-12);
        prop_assert!(ba >= 0.5 - 1e-12);
        let f1 = best_f1(&scores).unwrap().value;
        prop_assert!((f1 - best_f1(&mapped).unwrap().value).abs() < 1e-12);
        let a = evaluate(&scores, 0, 1).unwrap();
        let b = evaluate(&mapped, 0, 1).unwrap();
        prop_assert_eq!(a.cost_curve, b.cost_curve);
    }

    #[test]
    fn roc_is_monotone_from_origin_to_corner(scores in labeled()) {
        let (pts, auc) = roc_auc(&scores).unwrap();
        prop_assert_eq!(pts.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(pts.last().copied(), Some((1.0, 1.0)));
        for w in pts.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn cost_curve_is_non_decreasing(ranked in vec(any::<bool>(), 0..60)) {
        let curve = cost_curve(&ranked);
        prop_assert_eq!(curve.len(), ranked.iter().filter(|&&b| b).count());
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn random_cost_scales_with_target(total in 2usize..2000, m_frac in 0.0f64..1.0, n_frac in 0.0f64..1.0) {
        let m = 1 + ((total - 1) as f64 * m_frac) as usize;
        let n = 1 + ((m - 1) as f64 * n_frac) as usize;
        let one = expected_random_cost(total, m, 1).unwrap().trials;
        let cost = expected_random_cost(total, m, n).unwrap();
        prop_assert!((cost.trials - n as f64 * one).abs() <= 1e-9 * cost.trials);
        prop_assert!(cost.false_positives >= -1e-9);
        if m < total {
            let more = expected_random_cost(total, m + 1, n).unwrap().trials;
            prop_assert!(more < cost.trials);
        }
    }

    #[test]
    fn rle_round_trips(bits in vec(any::<bool>(), 0..200)) {
        let runs = rle_encode(&bits);
        prop_assert!(runs.chunks(2).all(|p| p[1] > 0));
        prop_assert_eq!(rle_decode(&runs, bits.len()).unwrap(), bits);
    }

    #[test]
    fn null_percentiles_lie_in_unit_interval(values in vec(-100.0f64..100.0, 1..50), query in -150.0f64..150.0) {
        let null = NullDistribution::from_values(values).unwrap();
        prop_assert!((0.0..=1.0).contains(&null.percentile(query)));
        prop_assert_eq!(null.percentile(f64::INFINITY), 1.0);
    }

    #[test]
    fn smoothing_stays_within_input_range(
        (w, h, values, mask) in (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), vec(0.0f32..=1.0, w * h), vec(any::<bool>(), w * h))
        }),
        half in 0usize..3,
    ) {
        let pm = ProbMap::new(w, h, values.clone(), mask.clone(), common::day(0)).unwrap();
        let out = smooth(&pm, 2 * half + 1).unwrap();
        let present: Vec<f32> = values.iter().zip(&mask).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
        if let (Some(lo), Some(hi)) = (
            present.iter().copied().reduce(f32::min),
            present.iter().copied().reduce(f32::max),
        ) {
            for (&v, &m) in out.values().iter().zip(out.mask()) {
                prop_assert!(m || (lo - 1e-6 <= v && v <= hi + 1e-6));
            }
        } else {
            prop_assert!(out.mask().iter().all(|&m| m));
        }
        if half == 0 {
            prop_assert_eq!(out.mask(), pm.mask());
        }
    }

    #[test]
    fn footprint_never_shrinks(
        f in vec((0.0f64..=1.0, 0.0f64..=1.0), 1..20),
        t_star in 1.0f64..20.0,
        alpha in 0.2f64..3.0,
    ) {
        let (f0, fplus): (Vec<f64>, Vec<f64>) = f.into_iter().unzip();
        let n = f0.len();
        let model = FootprintModel::new(n, 1, f0, fplus, t_star, alpha).unwrap();
        let mut previous = footprint_at(&model, 1.0);
        for t in 2..=20 {
            let z = footprint_at(&model, t as f64);
            prop_assert!(z.iter().zip(&previous).all(|(a, b)| a >= b && *a <= 1.0));
            previous = z;
        }
    }

    #[test]
    fn likelihood_ignores_pixel_order(seed in any::<u64>(), shift in 1usize..12) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (w, t) = (12, 6);
        let series = common::random_series(&mut rng, w, 1, t, 0.2);
        let f0: Vec<f64> = (0..w).map(|_| rng.gen()).collect();
        let fplus: Vec<f64> = (0..w).map(|_| rng.gen()).collect();
        let rotate = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(shift); v };
        let maps = series
            .maps()
            .iter()
            .map(|m| {
                let mut values = m.values().to_vec();
                let mut mask = m.mask().to_vec();
                values.rotate_left(shift);
                mask.rotate_left(shift);
                ProbMap::new(w, 1, values, mask, m.timestamp()).unwrap()
            })
            .collect();
        let rotated = ProbMapSeries::new("rot", maps, 3.0).unwrap();
        let a = FootprintModel::new(w, 1, f0.clone(), fplus.clone(), 3.5, 1.0).unwrap();
        let b = FootprintModel::new(w, 1, rotate(&f0), rotate(&fplus), 3.5, 1.0).unwrap();
        let la = log_likelihood(&a, &series).unwrap();
        let lb = log_likelihood(&b, &rotated).unwrap();
        prop_assert!((la - lb).abs() <= 1e-9 * la.abs().max(1.0));
    }
}
