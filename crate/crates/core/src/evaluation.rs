//! Ranking metrics over labeled confidences and the random-search cost model.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// A location's confidence of expansion next to its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub location_id: String,
    pub score: f64,
    /// True for an expansion.
    pub label: bool,
    /// Expansion area, true or estimated.
    pub size: Option<f64>,
}

impl LabeledScore {
    pub fn new(location_id: impl Into<String>, score: f64, label: bool, size: Option<f64>) -> Self {
        LabeledScore {
            location_id: location_id.into(),
            score,
            label,
            size,
        }
    }
}

/// A threshold together with the metric value it achieves. Locations whose
/// score exceeds the threshold are predicted to have expanded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdValue {
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub permutations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomCost {
    pub trials: f64,
    pub false_positives: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_locations: usize,
    pub n_expansions: usize,
    pub roc_points: Vec<(f64, f64)>,
    pub auc: f64,
    pub best_balanced_accuracy: ThresholdValue,
    pub best_f1: ThresholdValue,
    /// Absent when fewer than 3 expansions carry sizes or either coordinate
    /// is constant.
    pub size_correlation: Option<Correlation>,
    /// False positives examined before each expansion, in ranking order.
    pub cost_curve: Vec<usize>,
    pub random_cost: RandomCost,
}

fn check_scores(scores: &[LabeledScore]) -> Result<()> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "score of {} is not finite",
            s.location_id
        )));
    }
    Ok(())
}

fn class_counts(scores: &[LabeledScore]) -> Result<(usize, usize)> {
    check_scores(scores)?;
    let pos = scores.iter().filter(|s| s.label).count();
    let neg = scores.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass("negatives"));
    }
    if neg == 0 {
        return Err(Error::SingleClass("positives"));
    }
    Ok((pos, neg))
}

/// Scores ascending with positives and negatives counted per distinct value.
fn tied_groups(scores: &[LabeledScore]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<(f64, bool)> = scores.iter().map(|s| (s.score, s.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (score, label) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == score => {
                if label {
                    g.1 += 1;
                } else {
                    g.2 += 1;
                }
            }
            _ => groups.push((score, label as usize, !label as usize)),
        }
    }
    groups
}

/// ROC points from `(0, 0)` to `(1, 1)`, one step per distinct score, and
/// the trapezoidal area under them.
pub fn roc_auc(scores: &[LabeledScore]) -> Result<(Vec<(f64, f64)>, f64)> {
    let (pos, neg) = class_counts(scores)?;
    let (pos, neg) = (pos as f64, neg as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    for &(_, p, n) in tied_groups(scores).iter().rev() {
        let (x0, y0) = (fp as f64 / neg, tp as f64 / pos);
        tp += p;
        fp += n;
        let (x1, y1) = (fp as f64 / neg, tp as f64 / pos);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok((points, auc))
}

/// Confusion counts `(tp, fp, fn, tn)` for every cut, lowest threshold
/// first: `-inf`, the midpoints between adjacent distinct scores, `+inf`.
fn cuts(scores: &[LabeledScore]) -> Vec<(f64, [usize; 4])> {
    let groups = tied_groups(scores);
    let pos: usize = groups.iter().map(|g| g.1).sum();
    let neg: usize = groups.iter().map(|g| g.2).sum();
    let (mut tp, mut fp) = (pos, neg);
    let mut out = Vec::with_capacity(groups.len() + 1);
    out.push((f64::NEG_INFINITY, [tp, fp, 0, 0]));
    for (k, &(score, p, n)) in groups.iter().enumerate() {
        tp -= p;
        fp -= n;
        let threshold = match groups.get(k + 1) {
            Some(next) => score + (next.0 - score) / 2.0,
            None => f64::INFINITY,
        };
        out.push((threshold, [tp, fp, pos - tp, neg - fp]));
    }
    out
}

fn best_cut(scores: &[LabeledScore], metric: impl Fn([usize; 4]) -> f64) -> ThresholdValue {
    let mut best = ThresholdValue {
        threshold: f64::NAN,
        value: f64::NEG_INFINITY,
    };
    for (threshold, counts) in cuts(scores) {
        let value = metric(counts);
        if value > best.value {
            best = ThresholdValue { threshold, value };
        }
    }
    best
}

fn balanced_accuracy([tp, fp, fn_, tn]: [usize; 4]) -> f64 {
    let tpr = tp as f64 / (tp + fn_) as f64;
    let tnr = tn as f64 / (tn + fp) as f64;
    (tpr + tnr) / 2.0
}

fn f1([tp, fp, fn_, _]: [usize; 4]) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Highest mean of sensitivity and specificity over all cuts, at the lowest
/// threshold achieving it.
pub fn best_balanced_accuracy(scores: &[LabeledScore]) -> Result<ThresholdValue> {
    class_counts(scores)?;
    Ok(best_cut(scores, balanced_accuracy))
}

/// Highest F1 over all cuts, at the lowest threshold achieving it.
pub fn best_f1(scores: &[LabeledScore]) -> Result<ThresholdValue> {
    check_scores(scores)?;
    if !scores.iter().any(|s| s.label) {
        return Err(Error::SingleClass("negatives"));
    }
    Ok(best_cut(scores, f1))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between score and size over the expansions that
/// carry a size, with a two-sided permutation p-value
/// `(1 + #{|r_perm| >= |r|}) / (1 + permutations)`.
pub fn size_correlation(scores: &[LabeledScore], permutations: usize, seed: u64) -> Result<Correlation> {
    check_scores(scores)?;
    let (x, mut y): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .filter(|s| s.label)
        .filter_map(|s| s.size.map(|z| (s.score, z)))
        .unzip();
    if x.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "size correlation needs at least 3 sized expansions, got {}",
            x.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("sizes must be finite".into()));
    }
    let r = pearson(&x, &y).ok_or(Error::DegenerateVariance("score or size"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Slack for permutations that reproduce the observed pairing up to
    // rounding.
    let cutoff = r.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..permutations {
        y.shuffle(&mut rng);
        let rp = pearson(&x, &y).expect("variance survives shuffling");
        if rp.abs() >= cutoff {
            extreme += 1;
        }
    }
    Ok(Correlation {
        r,
        p_value: (1 + extreme) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

fn check_cost_args(total: usize, expansions: usize, found: usize) -> Result<()> {
    if found == 0 || found > expansions || expansions >= total {
        return Err(Error::InvalidArgument(format!(
            "random cost needs 0 < n <= M < N, got N={total} M={expansions} n={found}"
        )));
    }
    Ok(())
}

/// Expected trials, and the false positives among them, for a random search
/// without replacement to find `found` of `expansions` positives among
/// `total` locations: `E[T_n] = n (N + 1) / (M + 1)`.
pub fn expected_random_cost(total: usize, expansions: usize, found: usize) -> Result<RandomCost> {
    check_cost_args(total, expansions, found)?;
    let trials = found as f64 * (total as f64 + 1.0) / (expansions as f64 + 1.0);
    Ok(RandomCost {
        trials,
        false_positives: trials - found as f64,
    })
}

/// Monte Carlo estimate of [`expected_random_cost`]. Each shuffle draws the
/// positions of the positives in a uniformly random order and records the
/// position of the `found`-th one.
pub fn monte_carlo_random_cost(
    total: usize,
    expansions: usize,
    found: usize,
    shuffles: usize,
    seed: u64,
) -> Result<RandomCost> {
    check_cost_args(total, expansions, found)?;
    if shuffles == 0 {
        return Err(Error::InvalidArgument("at least one shuffle is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0u64;
    for _ in 0..shuffles {
        let mut positions = index::sample(&mut rng, total, expansions).into_vec();
        positions.select_nth_unstable(found - 1);
        sum += positions[found - 1] as u64 + 1;
    }
    let trials = sum as f64 / shuffles as f64;
    Ok(RandomCost {
        trials,
        false_positives: trials - found as f64,
    })
}

/// For each positive in ranking order, the number of negatives ranked above it.
pub fn cost_curve(ranked: &[bool]) -> Vec<usize> {
    let mut negatives = 0;
    let mut out = Vec::new();
    for &label in ranked {
        if label {
            out.push(negatives);
        } else {
            negatives += 1;
        }
    }
    out
}

/// Labels ordered by descending score, ties by location id.
pub fn ranked_labels(scores: &[LabeledScore]) -> Vec<bool> {
    let mut order: Vec<&LabeledScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.location_id.cmp(&b.location_id))
    });
    order.into_iter().map(|s| s.label).collect()
}

/// All metrics for one method.
pub fn evaluate(scores: &[LabeledScore], permutations: usize, seed: u64) -> Result<EvalReport> {
    let (pos, neg) = class_counts(scores)?;
    let (roc_points, auc) = roc_auc(scores)?;
    let size_correlation = match size_correlation(scores, permutations, seed) {
        Ok(c) => Some(c),
        Err(Error::InvalidArgument(_) | Error::DegenerateVariance(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        n_locations: pos + neg,
        n_expansions: pos,
        roc_points,
        auc,
        best_balanced_accuracy: best_balanced_accuracy(scores)?,
        best_f1: best_f1(scores)?,
        size_correlation,
        cost_curve: cost_curve(&ranked_labels(scores)),
        random_cost: expected_random_cost(pos + neg, pos, pos)?,
    })
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub location_id: String,
    #[serde(with = "zero_one")]
    pub expanded: bool,
    #[serde(default)]
    pub true_t_star: Option<usize>,
    #[serde(default)]
    pub true_area_m2: Option<f64>,
}

mod zero_one {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(de::Error::custom(format!("expanded must be 0 or 1, got {v}"))),
        }
    }
}

/// JSON has no infinities; they travel as the strings "inf" and "-inf".
mod extended_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("expected a number, got {t:?}"))),
        }
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Label>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let labels = reader.deserialize().collect::<std::result::Result<Vec<Label>, _>>()?;
    Ok(labels)
}

pub fn write_labels(labels: &[Label], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    for label in labels {
        writer.serialize(label)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
