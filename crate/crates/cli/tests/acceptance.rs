//! Acceptance run. Prints one PASS/FAIL line per criterion, then fails the
//! test if any criterion failed. Runs the full default benchmark through the
//! binary, so expect several minutes.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use footwatch_core::evaluation::{
    self, expected_random_cost, monte_carlo_random_cost, read_labels, EvalReport, Label, LabeledScore,
};
use footwatch_core::footprint::{self, FootprintModel, LOG_EPS};
use footwatch_core::report::{read_records, DetectionRecord, Record};
use footwatch_core::scene_store::{Band, Frame};
use footwatch_core::spectral::{self, ProbMap, ProbMapSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Written straight to stdout so the lines show without `--nocapture`.
fn announce(n: usize, title: &str, o: &Outcome) {
    let line = format!(
        "criterion {n} {}: {title}: {}\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn footwatch(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_footwatch"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "footwatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn day(d: u64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(d)
}

fn random_series(rng: &mut ChaCha8Rng, w: usize, h: usize, t: usize) -> ProbMapSeries {
    let maps = (0..t)
        .map(|k| {
            let values = (0..w * h).map(|_| rng.gen::<f32>()).collect();
            let mask = (0..w * h).map(|_| rng.gen_bool(0.1)).collect();
            ProbMap::new(w, h, values, mask, day(7 * k as u64)).unwrap()
        })
        .collect();
    ProbMapSeries::new("random", maps, 3.0).unwrap()
}

fn detections(records: &[Record]) -> Vec<&DetectionRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            Record::Detection(d) => Some(d),
            Record::Baseline(_) => None,
        })
        .collect()
}

fn criterion_gradient() -> Outcome {
    const STEP: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let (w, h, t) = if case == 0 {
            (16, 16, 10)
        } else {
            (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(3..=10))
        };
        let series = random_series(&mut rng, w, h, t);
        let n = w * h;
        let f0 = (0..n).map(|_| rng.gen_range(0.05..0.45)).collect();
        let fplus = (0..n).map(|_| rng.gen_range(0.05..0.45)).collect();
        let model = FootprintModel::new(w, h, f0, fplus, rng.gen_range(1.5..t as f64 - 0.5), 1.0).unwrap();
        let grad = footprint::grad_log_likelihood(&model, &series).unwrap();
        let ll = |m: &FootprintModel| footprint::log_likelihood(m, &series).unwrap();
        let mut check = |analytic: f64, bump: &dyn Fn(&mut FootprintModel, f64)| {
            let (mut up, mut down) = (model.clone(), model.clone());
            bump(&mut up, STEP);
            bump(&mut down, -STEP);
            let numeric = (ll(&up) - ll(&down)) / (2.0 * STEP);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0));
        };
        for i in 0..n {
            check(grad.d_f0[i], &|m, d| m.f0[i] += d);
            check(grad.d_fplus[i], &|m, d| m.fplus[i] += d);
        }
        check(grad.d_t_star, &|m, d| m.t_star += d);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= REL_TOL && elapsed < Duration::from_secs(30),
        format!(
            "20 cases, worst relative error {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_nesting(dets: &[&DetectionRecord]) -> Outcome {
    let violations = dets
        .iter()
        .filter(|d| {
            let tol = 1e-6 * d.log_likelihood_unrestricted.abs();
            d.test_statistic < -tol || d.log_likelihood_unrestricted - d.log_likelihood_static < -tol
        })
        .count();
    outcome(
        violations == 0 && dets.len() == 250,
        format!("{} locations, {violations} below tolerance", dets.len()),
    )
}

const CASES: usize = 30;

type Oracle = fn(&mut ChaCha8Rng) -> bool;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn oracle_log_likelihood(rng: &mut ChaCha8Rng) -> bool {
    let (w, h, t) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(2..8));
    let series = random_series(rng, w, h, t);
    let n = w * h;
    let f0: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let fplus: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let model = FootprintModel::new(w, h, f0, fplus, rng.gen_range(1.0..t as f64), 1.5).unwrap();
    let mut want = 0.0;
    for (k, map) in series.maps().iter().enumerate() {
        let s = 1.0 / (1.0 + (-((k + 1) as f64 - model.t_star) / model.alpha).exp());
        for i in (0..n).filter(|&i| !map.mask()[i]) {
            let p = map.values()[i] as f64;
            let z = (model.f0[i] + model.fplus[i] * s).min(1.0);
            want += (p * z + (1.0 - p) * (1.0 - z)).clamp(LOG_EPS, 1.0).ln();
        }
    }
    close(footprint::log_likelihood(&model, &series).unwrap(), want)
}

fn oracle_smooth(rng: &mut ChaCha8Rng) -> bool {
    let (w, h) = (rng.gen_range(1..9), rng.gen_range(1..9));
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let values: Vec<f32> = (0..w * h).map(|_| rng.gen()).collect();
    let mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.3)).collect();
    let pm = ProbMap::new(w, h, values.clone(), mask.clone(), day(0)).unwrap();
    let out = spectral::smooth(&pm, k).unwrap();
    let r = (k / 2) as isize;
    (0..w * h).all(|i| {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        let (mut sum, mut count) = (0.0f64, 0);
        for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
            for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                let j = yy as usize * w + xx as usize;
                if !mask[j] {
                    sum += values[j] as f64;
                    count += 1;
                }
            }
        }
        out.mask()[i] == (count == 0)
            && (count == 0 || close(out.values()[i] as f64, (sum / count as f64) as f32 as f64))
    })
}

fn oracle_ndvi(rng: &mut ChaCha8Rng) -> bool {
    let (w, h) = (rng.gen_range(1..7), rng.gen_range(1..7));
    let n = w * h;
    let red: Vec<f32> = (0..n)
        .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen() })
        .collect();
    let nir: Vec<f32> = (0..n).map(|i| if red[i] == 0.0 { 0.0 } else { rng.gen() }).collect();
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
    let frame = Frame::new(
        w,
        h,
        vec![Band::Red, Band::Nir],
        vec![red.clone(), nir.clone()],
        mask.clone(),
        day(0),
    )
    .unwrap();
    let got = spectral::ndvi(&frame).unwrap();
    (0..n).all(|i| {
        let (r, ni) = (red[i] as f64, nir[i] as f64);
        let defined = !mask[i] && r + ni != 0.0;
        got.mask[i] == !defined && (!defined || close(got.values[i], (ni - r) / (ni + r)))
    })
}

fn oracle_pixel_count(rng: &mut ChaCha8Rng) -> bool {
    let (w, h) = (rng.gen_range(1..9), rng.gen_range(1..9));
    let values: Vec<f32> = (0..w * h).map(|_| rng.gen_range(0..5) as f32 / 4.0).collect();
    let mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.2)).collect();
    let threshold = rng.gen_range(0..5) as f64 / 4.0;
    let pm = ProbMap::new(w, h, values.clone(), mask.clone(), day(0)).unwrap();
    let want = (0..w * h)
        .filter(|&i| !mask[i] && values[i] as f64 >= threshold)
        .count();
    spectral::cafo_pixel_count(&pm, threshold) == want
}

fn random_scores(rng: &mut ChaCha8Rng) -> Vec<LabeledScore> {
    let n = rng.gen_range(2..50);
    let mut out: Vec<LabeledScore> = (0..n)
        .map(|i| {
            LabeledScore::new(
                format!("l{i:03}"),
                rng.gen_range(0..12) as f64 * 0.5,
                rng.gen_bool(0.35),
                None,
            )
        })
        .collect();
    out[0].label = true;
    out[1].label = false;
    out
}

fn oracle_auc(rng: &mut ChaCha8Rng) -> bool {
    let scores = random_scores(rng);
    let (mut wins, mut pairs) = (0.0, 0.0);
    for a in scores.iter().filter(|s| s.label) {
        for b in scores.iter().filter(|s| !s.label) {
            pairs += 1.0;
            wins += if a.score > b.score {
                1.0
            } else if a.score == b.score {
                0.5
            } else {
                0.0
            };
        }
    }
    close(evaluation::roc_auc(&scores).unwrap().1, wins / pairs)
}

/// Best value over every cut between distinct scores, by direct counting.
fn best_over_cuts(scores: &[LabeledScore], metric: fn(f64, f64, f64, f64) -> f64) -> f64 {
    let mut cuts: Vec<f64> = scores.iter().map(|s| s.score).collect();
    cuts.push(f64::NEG_INFINITY);
    cuts.push(f64::INFINITY);
    let mut best = f64::NEG_INFINITY;
    for &cut in &cuts {
        // `score > cut` over a score value is the same split as the cut just above it.
        let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for s in scores {
            match (s.score > cut, s.label) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        best = best.max(metric(tp, fp, fn_, tn));
    }
    best
}

fn oracle_balanced_accuracy(rng: &mut ChaCha8Rng) -> bool {
    let scores = random_scores(rng);
    let want = best_over_cuts(&scores, |tp, fp, fn_, tn| 0.5 * (tp / (tp + fn_) + tn / (tn + fp)));
    close(evaluation::best_balanced_accuracy(&scores).unwrap().value, want)
}

fn oracle_f1(rng: &mut ChaCha8Rng) -> bool {
    let scores = random_scores(rng);
    let want = best_over_cuts(&scores, |tp, fp, fn_, _| {
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    });
    close(evaluation::best_f1(&scores).unwrap().value, want)
}

fn oracle_cost_curve(rng: &mut ChaCha8Rng) -> bool {
    let ranked: Vec<bool> = (0..rng.gen_range(0..60)).map(|_| rng.gen_bool(0.3)).collect();
    let want: Vec<usize> = (0..ranked.len())
        .filter(|&i| ranked[i])
        .map(|i| ranked[..i].iter().filter(|&&b| !b).count())
        .collect();
    evaluation::cost_curve(&ranked) == want
}

fn criterion_oracles() -> Outcome {
    let checks: [(&str, Oracle); 8] = [
        ("log_likelihood", oracle_log_likelihood),
        ("smooth", oracle_smooth),
        ("ndvi", oracle_ndvi),
        ("cafo_pixel_count", oracle_pixel_count),
        ("roc_auc", oracle_auc),
        ("best balanced accuracy", oracle_balanced_accuracy),
        ("best F1", oracle_f1),
        ("cost_curve", oracle_cost_curve),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|(name, check)| {
            let bad = (0..CASES).filter(|_| !check(&mut rng)).count();
            (bad > 0).then(|| format!("{name} ({bad}/{CASES})"))
        })
        .collect();
    if failed.is_empty() {
        outcome(true, format!("8 functions x {CASES} instances within 1e-9"))
    } else {
        outcome(false, format!("mismatches: {}", failed.join(", ")))
    }
}

fn criterion_auc(evals: &HashMap<String, EvalReport>, elapsed: Duration) -> Outcome {
    let mle = evals["MLE"].auc;
    let best_baseline = evals
        .iter()
        .filter(|(m, _)| *m != "MLE")
        .map(|(m, e)| (m.as_str(), e.auc))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    outcome(
        mle >= 0.95 && mle > best_baseline.1 && elapsed < Duration::from_secs(600) && evals.len() == 5,
        format!(
            "MLE AUC {mle:.4}, best baseline {} {:.4}, pipeline {:.0}s",
            best_baseline.0,
            best_baseline.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_timing(dets: &[&DetectionRecord], labels: &[Label]) -> Outcome {
    let by_id: HashMap<&str, &Label> = labels.iter().map(|l| (l.location_id.as_str(), l)).collect();
    let errors: Vec<f64> = dets
        .iter()
        .filter_map(|d| {
            let truth = by_id[d.location_id.as_str()].true_t_star?;
            Some((d.t_star_index - truth as f64).abs())
        })
        .collect();
    let within = errors.iter().filter(|&&e| e <= 2.0).count();
    let share = within as f64 / errors.len() as f64;
    outcome(
        share >= 0.8 && !errors.is_empty(),
        format!(
            "noise 0.05: {within}/{} expansions within 2 frames ({:.0}%)",
            errors.len(),
            100.0 * share
        ),
    )
}

fn criterion_correlation(evals: &HashMap<String, EvalReport>) -> Outcome {
    match evals["MLE"].size_correlation {
        Some(c) => outcome(
            c.r >= 0.6 && c.p_value < 0.01,
            format!(
                "r = {:.3}, permutation p = {:.2e} ({} permutations)",
                c.r, c.p_value, c.permutations
            ),
        ),
        None => outcome(false, "no size correlation reported"),
    }
}

fn criterion_random_cost() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (total, m, n)) in [(10, 2, 2), (100, 5, 5), (1436, 22, 22)].into_iter().enumerate() {
        let exact = expected_random_cost(total, m, n).unwrap();
        let mc = monte_carlo_random_cost(total, m, n, 100_000, 7 + k as u64).unwrap();
        let rel = (exact.trials - mc.trials).abs() / exact.trials;
        pass &= rel <= 0.01;
        parts.push(format!(
            "({total},{m},{n}) exact {:.2} trials / {:.2} false positives, shuffles {:.2} ({:.2}% off)",
            exact.trials,
            exact.false_positives,
            mc.trials,
            100.0 * rel
        ));
    }
    let alt = expected_random_cost(1414, 22, 22).unwrap();
    parts.push(format!(
        "published 3,836 false positives not reproduced (N=1414 gives {:.2})",
        alt.false_positives
    ));
    outcome(pass, parts.join("; "))
}

fn criterion_separation(dets: &[&DetectionRecord], labels: &[Label]) -> Outcome {
    let expanded: HashMap<&str, bool> = labels.iter().map(|l| (l.location_id.as_str(), l.expanded)).collect();
    let mean = |want: bool| {
        let v: Vec<f64> = dets
            .iter()
            .filter(|d| expanded[d.location_id.as_str()] == want)
            .map(|d| d.test_statistic)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (e, s) = (mean(true), mean(false));
    outcome(
        e >= 3.0 * s && e > 0.0,
        format!("mean TS {e:.1} over expansions, {s:.3} over statics"),
    )
}

fn read_evals(path: &Path) -> HashMap<String, EvalReport> {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, title: &'static str, o: Outcome| {
        announce(n, title, &o);
        results.push((n, title, o));
    };

    record(1, "gradient matches central differences", criterion_gradient());

    // Default benchmark through the binary: 200 static, 50 expanded, noise 0.15.
    let bench = tmp.path().join("bench");
    let out = tmp.path().join("out");
    let eval = tmp.path().join("eval");
    let start = Instant::now();
    footwatch(&["synth", "--out", p(&bench)]);
    footwatch(&["detect", "--input", p(&bench), "--out", p(&out), "--threads", "8"]);
    footwatch(&["baseline", "--input", p(&bench), "--out", p(&out), "--threads", "8"]);
    let reports = out.join("reports.jsonl");
    let labels_path = bench.join("labels.csv");
    footwatch(&[
        "evaluate",
        "--reports",
        p(&reports),
        "--labels",
        p(&labels_path),
        "--out",
        p(&eval),
    ]);
    let elapsed = start.elapsed();
    let records = read_records(&reports).unwrap();
    let dets = detections(&records);
    let labels = read_labels(&labels_path).unwrap();
    let evals = read_evals(&eval.join("eval.json"));
    // The scene stacks are large; drop them before the next runs.
    std::fs::remove_dir_all(&bench).unwrap();

    record(
        2,
        "test statistic non-negative within tolerance",
        criterion_nesting(&dets),
    );
    record(3, "brute-force oracles", criterion_oracles());
    record(
        4,
        "detector AUC on the default benchmark",
        criterion_auc(&evals, elapsed),
    );

    let quiet = tmp.path().join("quiet");
    let quiet_out = tmp.path().join("quiet_out");
    footwatch(&[
        "synth",
        "--out",
        p(&quiet),
        "--static",
        "0",
        "--expanded",
        "50",
        "--noise",
        "0.05",
        "--seed",
        "5",
        "--no-scenes",
    ]);
    footwatch(&["detect", "--input", p(&quiet), "--out", p(&quiet_out), "--threads", "8"]);
    let quiet_records = read_records(quiet_out.join("reports.jsonl")).unwrap();
    let quiet_labels = read_labels(quiet.join("labels.csv")).unwrap();
    record(
        5,
        "transition time recovered at low noise",
        criterion_timing(&detections(&quiet_records), &quiet_labels),
    );

    record(6, "test statistic tracks expansion area", criterion_correlation(&evals));
    record(7, "random-search cost matches shuffles", criterion_random_cost());

    let small = tmp.path().join("small");
    footwatch(&[
        "synth",
        "--out",
        p(&small),
        "--static",
        "20",
        "--expanded",
        "5",
        "--seed",
        "9",
        "--no-scenes",
    ]);
    let (one, eight) = (tmp.path().join("one"), tmp.path().join("eight"));
    footwatch(&["detect", "--input", p(&small), "--out", p(&one), "--threads", "1"]);
    footwatch(&["detect", "--input", p(&small), "--out", p(&eight), "--threads", "8"]);
    let same = ["reports.jsonl", "ranking.csv"]
        .iter()
        .all(|f| std::fs::read(one.join(f)).unwrap() == std::fs::read(eight.join(f)).unwrap());
    record(
        8,
        "thread count leaves reports unchanged",
        outcome(
            same,
            format!(
                "25 locations, reports {}",
                if same { "byte-identical" } else { "differ" }
            ),
        ),
    );

    record(9, "expansions outscore statics", criterion_separation(&dets, &labels));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
