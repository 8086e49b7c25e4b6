mod common;

use footwatch_core::detector::{detect, fit_static, fit_unrestricted, test_statistic, FitConfig};
use footwatch_core::spectral::{ProbMap, ProbMapSeries};
use footwatch_core::synthgen::{generate_location, Rect, SyntheticSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noiseless(added: Option<Rect>) -> SyntheticSpec {
    SyntheticSpec {
        width: 40,
        height: 40,
        n_frames: 100,
        base_sheds: vec![Rect::new(2, 2, 12, 8)],
        added_shed: added,
        true_t_star: 50,
        noise: 0.0,
        missing_rate: 0.0,
        degraded_frame_rate: 0.0,
        seed: 3,
        ..SyntheticSpec::default()
    }
}

fn ts(series: &ProbMapSeries) -> f64 {
    detect(series, &FitConfig::default(), None).unwrap().test_statistic
}

fn map_values(series: &ProbMapSeries, f: impl Fn(usize, usize, f32) -> f32) -> ProbMapSeries {
    let maps = series
        .maps()
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let values = m.values().iter().enumerate().map(|(i, &v)| f(k + 1, i, v)).collect();
            ProbMap::new(m.width(), m.height(), values, m.mask().to_vec(), m.timestamp()).unwrap()
        })
        .collect();
    ProbMapSeries::new(series.location_id(), maps, series.pixel_size_m()).unwrap()
}

#[test]
fn static_scene_has_no_expansion() {
    let loc = generate_location(&noiseless(None)).unwrap();
    let report = detect(&loc.probs, &FitConfig::default(), None).unwrap();
    assert!(report.test_statistic <= 1e-6 * report.log_likelihood_unrestricted.abs());
    assert_eq!(report.expansion_area_m2, 0.0);
}

#[test]
fn block_area_and_timing_are_recovered() {
    let loc = generate_location(&noiseless(Some(Rect::new(20, 15, 10, 20)))).unwrap();
    assert_eq!(loc.truth.true_added_area_m2, 1800.0);
    let report = detect(&loc.probs, &FitConfig::default(), None).unwrap();
    assert!(
        (report.expansion_area_m2 - 1800.0).abs() <= 60.0,
        "{}",
        report.expansion_area_m2
    );
    assert!((report.t_star_index - 50.0).abs() <= 1.0, "{}", report.t_star_index);
}

#[test]
fn step_change_locates_transition() {
    let before = vec![0.0f32; 36];
    let mut after = before.clone();
    for v in &mut after[..18] {
        *v = 1.0;
    }
    let series = common::switching_series(6, 6, 100, &before, &after, 51);
    let fit = fit_unrestricted(&series, &FitConfig::default()).unwrap();
    assert!((fit.model.t_star - 50.5).abs() <= 1.0, "{}", fit.model.t_star);
}

#[test]
fn unrestricted_fit_nests_static_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = FitConfig::default();
    for _ in 0..10 {
        let series = common::random_series(&mut rng, 5, 4, 12, 0.1);
        let u = fit_unrestricted(&series, &config).unwrap();
        let s = fit_static(&series, &config).unwrap();
        assert!(s.log_likelihood <= u.log_likelihood + 1e-6 * u.log_likelihood.abs());
        assert!(test_statistic(&u, &s).unwrap() >= 0.0);
    }
}

/// Reversing time turns construction into removal, which the model cannot
/// express. Reversal together with `p -> 1 - p` maps the model onto itself
/// (`f0 -> 1 - f0 - fplus`, `t* -> T + 1 - t*`), so the statistic survives.
#[test]
fn reversal_with_complement_preserves_statistic() {
    let loc = generate_location(&noiseless(Some(Rect::new(20, 15, 10, 20)))).unwrap();
    let forward = ts(&loc.probs);
    let mirrored = map_values(&loc.probs.reversed(), |_, _, v| 1.0 - v);
    let back = ts(&mirrored);
    assert!((forward - back).abs() <= 0.01 * forward, "{forward} vs {back}");
    assert!(ts(&loc.probs.reversed()) < 0.5 * forward);
}

#[test]
fn pasted_block_raises_statistic() {
    let loc = generate_location(&noiseless(None)).unwrap();
    let base = ts(&loc.probs);
    let mut previous = base;
    for side in [5usize, 7, 9] {
        let pasted = map_values(&loc.probs, |t, i, v| {
            let (col, row) = (i % 40, i / 40);
            if t > 50 && (25..25 + side).contains(&col) && (25..25 + side).contains(&row) {
                1.0
            } else {
                v
            }
        });
        let value = ts(&pasted);
        assert!(value > base, "side {side}: {value} vs {base}");
        assert!(value >= previous - 1e-6 * value, "side {side}: {value} vs {previous}");
        previous = value;
    }
}

#[test]
fn detection_is_deterministic() {
    let spec = SyntheticSpec {
        noise: 0.15,
        ..noiseless(Some(Rect::new(20, 15, 10, 20)))
    };
    let loc = generate_location(&spec).unwrap();
    let a = detect(&loc.probs, &FitConfig::default(), None).unwrap();
    let b = detect(&loc.probs, &FitConfig::default(), None).unwrap();
    assert_eq!(a, b);
}
