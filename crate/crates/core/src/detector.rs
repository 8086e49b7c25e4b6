//! Maximum-likelihood fits of the footprint model and the delta
//! log-likelihood test statistic built from them.
//!
//! Both fits run projected heavy-ball ascent over logits of the footprint
//! entries, with entries on the logit box held at exactly 0 or 1. The
//! transition time moves in frame units, its step normalized by the peak
//! RMS of its slope, and is clamped to `[1, T]`. The unrestricted fit is
//! restarted from several transition times and the best run is kept.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ascent::{Ascent, PixelData, RunOutcome};
use crate::error::{Error, Result};
use crate::footprint::{FootprintModel, Observations, DEFAULT_ALPHA};
use crate::spectral::ProbMapSeries;

/// Initial footprint entries this close to 0 or 1 start on the box.
const INIT_SNAP: f64 = 0.1;

/// Optimizer settings shared by both fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub step_size: f64,
    pub momentum: f64,
    /// Stop once the relative objective change between checks drops below this.
    pub convergence_tol: f64,
    /// Transition-duration scale, held fixed during the fit.
    pub alpha: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Optional `lambda * sum(fplus)` penalty; zero reproduces the plain MLE.
    pub sparsity: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 500,
            step_size: 0.05,
            momentum: 0.9,
            convergence_tol: 1e-6,
            alpha: DEFAULT_ALPHA,
            restarts: 3,
            seed: 0,
            sparsity: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol > 0.0) {
            return bad("convergence_tol must be positive");
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.restarts == 0 {
            return bad("restarts must be positive");
        }
        if !(self.sparsity.is_finite() && self.sparsity >= 0.0) {
            return bad("sparsity must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitKind {
    Unrestricted,
    /// `fplus` pinned to zero.
    Static,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub location_id: String,
    pub kind: FitKind,
    pub model: FootprintModel,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations_used: usize,
    pub restart_index: usize,
}

impl FitResult {
    /// Fitted transition time; absent for the static fit.
    pub fn t_star(&self) -> Option<f64> {
        match self.kind {
            FitKind::Unrestricted => Some(self.model.t_star),
            FitKind::Static => None,
        }
    }
}

/// Per-location output of [`detect`].
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionReport {
    pub location_id: String,
    pub test_statistic: f64,
    pub log_likelihood_unrestricted: f64,
    pub log_likelihood_static: f64,
    pub t_star_index: f64,
    pub t_star_date: NaiveDate,
    pub expansion_area_m2: f64,
    pub width: usize,
    pub height: usize,
    pub footprint_before: Vec<bool>,
    pub footprint_added: Vec<bool>,
    pub null_percentile: Option<f64>,
}

impl DetectionReport {
    pub fn added_pixels(&self) -> usize {
        self.footprint_added.iter().filter(|&&b| b).count()
    }
}

/// Test statistics of locations presumed not to have changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    values: Vec<f64>,
}

impl NullDistribution {
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("null distribution"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("null sample must be finite".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(NullDistribution { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Empirical CDF as rank / n. A query equal to sample members takes the
    /// midpoint rank of the tied block; otherwise the rank is the number of
    /// members strictly below it.
    pub fn percentile(&self, ts: f64) -> f64 {
        let below = self.values.partition_point(|&v| v < ts);
        let at_or_below = self.values.partition_point(|&v| v <= ts);
        let ties = at_or_below - below;
        let rank = if ties == 0 {
            below as f64
        } else {
            below as f64 + (ties as f64 + 1.0) / 2.0
        };
        rank / self.values.len() as f64
    }
}

/// Per-pixel mean of the present observations in `frames`, or `None` when
/// every observation of the pixel is masked.
fn window_means(obs: &Observations, frames: std::ops::Range<usize>) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; obs.n_pixels];
    let mut count = vec![0usize; obs.n_pixels];
    for frame in &obs.frames[frames] {
        for (i, &p) in frame.iter().enumerate() {
            if !p.is_nan() {
                sum[i] += p as f64;
                count[i] += 1;
            }
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

fn quartile_init(obs: &Observations) -> (Vec<f64>, Vec<f64>) {
    let t = obs.n_frames();
    let q = t.div_ceil(4);
    let overall = window_means(obs, 0..t);
    let first = window_means(obs, 0..q);
    let last = window_means(obs, t - q..t);
    let mut f0 = Vec::with_capacity(obs.n_pixels);
    let mut fp = Vec::with_capacity(obs.n_pixels);
    for i in 0..obs.n_pixels {
        let fallback = overall[i].unwrap_or(0.5);
        let a = first[i].unwrap_or(fallback);
        let b = last[i].unwrap_or(fallback);
        f0.push(a);
        fp.push((b - a).max(0.0));
    }
    (f0, fp)
}

fn check_series(series: &ProbMapSeries) -> Result<()> {
    if series.len() < 2 {
        return Err(Error::TooShort {
            len: series.len(),
            min: 2,
        });
    }
    Ok(())
}

fn fit_static_data(
    obs: &Observations,
    data: &PixelData,
    series: &ProbMapSeries,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    check_series(series)?;
    let ascent = Ascent { data, config };
    let f0_init: Vec<f64> = window_means(obs, 0..obs.n_frames())
        .into_iter()
        .map(|m| m.unwrap_or(0.5))
        .collect();
    let outcome = ascent.run(&f0_init, None, 1.0, INIT_SNAP)?;
    let log_likelihood = obs.log_likelihood(&outcome.f0, None, 1.0, config.alpha);
    if !log_likelihood.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }
    let model = FootprintModel::static_model(series.width(), series.height(), outcome.f0, config.alpha)?;
    Ok(FitResult {
        location_id: series.location_id().to_string(),
        kind: FitKind::Static,
        model,
        log_likelihood,
        converged: outcome.converged,
        iterations_used: outcome.iterations,
        restart_index: 0,
    })
}

/// Best of the restarts, or the static solution embedded with `fplus = 0`
/// when no restart beats it (reported with `restart_index == restarts`).
fn fit_unrestricted_data(
    obs: &Observations,
    data: &PixelData,
    series: &ProbMapSeries,
    config: &FitConfig,
    static_fit: &FitResult,
) -> Result<FitResult> {
    config.validate()?;
    check_series(series)?;
    let ascent = Ascent { data, config };
    let (f0_init, fp_init) = quartile_init(obs);
    let n_frames = obs.n_frames() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spacing = (n_frames - 1.0) / (config.restarts as f64 + 1.0);

    let mut best: Option<(usize, RunOutcome)> = None;
    for r in 0..config.restarts {
        let jitter = rng.gen_range(-0.25..0.25) * spacing;
        let t0 = 1.0 + spacing * (r as f64 + 1.0) + jitter;
        let outcome = ascent.run(&f0_init, Some(&fp_init), t0, INIT_SNAP)?;
        if best.as_ref().is_none_or(|(_, b)| outcome.objective > b.objective) {
            best = Some((r, outcome));
        }
    }
    let (restart_index, outcome) = best.expect("at least one restart");
    let fplus = outcome.fplus.expect("unrestricted run keeps fplus");
    let log_likelihood = obs.log_likelihood(&outcome.f0, Some(&fplus), outcome.t_star, config.alpha);
    if !log_likelihood.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }
    let penalty = config.sparsity * fplus.iter().sum::<f64>();
    let (f0, fplus, log_likelihood, restart_index) = if log_likelihood - penalty < static_fit.log_likelihood {
        let zeros = vec![0.0; fplus.len()];
        (
            static_fit.model.f0.clone(),
            zeros,
            static_fit.log_likelihood,
            config.restarts,
        )
    } else {
        (outcome.f0, fplus, log_likelihood, restart_index)
    };
    let model = FootprintModel::new(series.width(), series.height(), f0, fplus, outcome.t_star, config.alpha)?;
    Ok(FitResult {
        location_id: series.location_id().to_string(),
        kind: FitKind::Unrestricted,
        model,
        log_likelihood,
        converged: outcome.converged,
        iterations_used: outcome.iterations,
        restart_index,
    })
}

/// Fits `f0`, `fplus` and `t*` jointly, keeping the best of
/// `config.restarts` runs. The static solution (`fplus = 0`) also competes,
/// so the result never scores below [`fit_static`].
pub fn fit_unrestricted(series: &ProbMapSeries, config: &FitConfig) -> Result<FitResult> {
    let obs = Observations::from_series(series);
    let data = PixelData::new(&obs);
    let static_fit = fit_static_data(&obs, &data, series, config)?;
    fit_unrestricted_data(&obs, &data, series, config, &static_fit)
}

/// Fits the no-expansion model (`fplus = 0`), optimizing `f0` only.
pub fn fit_static(series: &ProbMapSeries, config: &FitConfig) -> Result<FitResult> {
    let obs = Observations::from_series(series);
    let data = PixelData::new(&obs);
    fit_static_data(&obs, &data, series, config)
}

/// Delta log-likelihood between the two fits, floored at zero.
pub fn test_statistic(unrestricted: &FitResult, static_fit: &FitResult) -> Result<f64> {
    if unrestricted.location_id != static_fit.location_id {
        return Err(Error::LocationMismatch(
            unrestricted.location_id.clone(),
            static_fit.location_id.clone(),
        ));
    }
    Ok((unrestricted.log_likelihood - static_fit.log_likelihood).max(0.0))
}

/// Both fits plus the values derived from them.
#[derive(Clone, Debug)]
pub struct Detection {
    pub report: DetectionReport,
    pub unrestricted: FitResult,
    pub static_fit: FitResult,
}

/// Runs both fits and summarizes them; see [`detect`].
pub fn detect_full(series: &ProbMapSeries, config: &FitConfig, null: Option<&NullDistribution>) -> Result<Detection> {
    let obs = Observations::from_series(series);
    let data = PixelData::new(&obs);
    let static_fit = fit_static_data(&obs, &data, series, config)?;
    let unrestricted = fit_unrestricted_data(&obs, &data, series, config, &static_fit)?;
    drop((obs, data));
    let ts = test_statistic(&unrestricted, &static_fit)?;

    let model = &unrestricted.model;
    let footprint_before: Vec<bool> = model.f0.iter().map(|&f| f >= 0.5).collect();
    // A pixel already covered before the transition cannot be added by it.
    let footprint_added: Vec<bool> = model
        .fplus
        .iter()
        .zip(&model.f0)
        .map(|(&fp, &f0)| fp >= 0.5 && f0 < 0.5)
        .collect();
    let added = footprint_added.iter().filter(|&&b| b).count();
    let timestamps = series.timestamps();
    let nearest = (model.t_star.round() as usize).clamp(1, timestamps.len());

    let report = DetectionReport {
        location_id: series.location_id().to_string(),
        test_statistic: ts,
        log_likelihood_unrestricted: unrestricted.log_likelihood,
        log_likelihood_static: static_fit.log_likelihood,
        t_star_index: model.t_star,
        t_star_date: timestamps[nearest - 1],
        expansion_area_m2: added as f64 * series.pixel_size_m() * series.pixel_size_m(),
        width: series.width(),
        height: series.height(),
        footprint_before,
        footprint_added,
        null_percentile: null.map(|n| n.percentile(ts)),
    };
    Ok(Detection {
        report,
        unrestricted,
        static_fit,
    })
}

/// Fits both models, computes the test statistic and the thresholded
/// footprints, and attaches a null percentile when a null is given.
pub fn detect(series: &ProbMapSeries, config: &FitConfig, null: Option<&NullDistribution>) -> Result<DetectionReport> {
    detect_full(series, config, null).map(|d| d.report)
}

/// Null distribution from the reports of locations presumed static.
pub fn calibrate_null(reports: &[DetectionReport]) -> Result<NullDistribution> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to calibrate against"));
    }
    NullDistribution::from_values(reports.iter().map(|r| r.test_statistic).collect())
}

/// Sorts by test statistic, largest first; ties by location id.
pub fn rank_locations(reports: &[DetectionReport]) -> Vec<DetectionReport> {
    let mut ranked = reports.to_vec();
    ranked.sort_by(|a, b| {
        b.test_statistic
            .total_cmp(&a.test_statistic)
            .then_with(|| a.location_id.cmp(&b.location_id))
    });
    ranked
}
