//! Changepoint baselines on scalar per-frame summaries: Bayesian changepoint
//! detection with a Gaussian conjugate model, and a single-break
//! season-trend regression.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use libm::lgamma;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_store::SceneSeries;
use crate::spectral::{self, ProbMapSeries};

pub const MIN_SERIES_LEN: usize = 8;
pub const DEFAULT_HARMONICS: usize = 2;
const DAYS_PER_YEAR: f64 = 365.25;

/// What a [`ScalarSeries`] measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesSource {
    MeanNdvi,
    PixelCount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSeries {
    location_id: String,
    source: SeriesSource,
    timestamps: Vec<NaiveDate>,
    values: Vec<f64>,
}

impl ScalarSeries {
    pub fn new(
        location_id: impl Into<String>,
        source: SeriesSource,
        timestamps: Vec<NaiveDate>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} timestamps for {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if values.len() < MIN_SERIES_LEN {
            return Err(Error::TooShort {
                len: values.len(),
                min: MIN_SERIES_LEN,
            });
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::NonMonotoneTimestamps(i + 1));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPixel {
                frame: i,
                pixel: 0,
                value: values[i],
            });
        }
        Ok(ScalarSeries {
            location_id: location_id.into(),
            source,
            timestamps,
            values,
        })
    }

    pub fn location_id(&self) -> &str {
        &self.location_id
    }

    pub fn source(&self) -> SeriesSource {
        self.source
    }

    pub fn timestamps(&self) -> &[NaiveDate] {
        &self.timestamps
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

    /// Fractional years since the first timestamp.
    fn years(&self) -> Vec<f64> {
        let t0 = self.timestamps[0];
        self.timestamps
            .iter()
            .map(|d| (*d - t0).num_days() as f64 / DAYS_PER_YEAR)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineMethod {
    #[serde(rename = "BCP-NDVI")]
    BcpNdvi,
    #[serde(rename = "BCP-PIXELCOUNT")]
    BcpPixelCount,
    #[serde(rename = "BFAST-NDVI")]
    BfastNdvi,
    #[serde(rename = "BFAST-PIXELCOUNT")]
    BfastPixelCount,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [
        BaselineMethod::BcpNdvi,
        BaselineMethod::BcpPixelCount,
        BaselineMethod::BfastNdvi,
        BaselineMethod::BfastPixelCount,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BaselineMethod::BcpNdvi => "BCP-NDVI",
            BaselineMethod::BcpPixelCount => "BCP-PIXELCOUNT",
            BaselineMethod::BfastNdvi => "BFAST-NDVI",
            BaselineMethod::BfastPixelCount => "BFAST-PIXELCOUNT",
        }
    }

    pub fn source(self) -> SeriesSource {
        match self {
            BaselineMethod::BcpNdvi | BaselineMethod::BfastNdvi => SeriesSource::MeanNdvi,
            BaselineMethod::BcpPixelCount | BaselineMethod::BfastPixelCount => SeriesSource::PixelCount,
        }
    }

    fn bcp(source: SeriesSource) -> Self {
        match source {
            SeriesSource::MeanNdvi => BaselineMethod::BcpNdvi,
            SeriesSource::PixelCount => BaselineMethod::BcpPixelCount,
        }
    }

    fn bfast(source: SeriesSource) -> Self {
        match source {
            SeriesSource::MeanNdvi => BaselineMethod::BfastNdvi,
            SeriesSource::PixelCount => BaselineMethod::BfastPixelCount,
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineMethod::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub location_id: String,
    /// Changepoint posterior probability for BCP, break magnitude for BFAST.
    pub confidence: f64,
    /// 0-based index of the first frame after the break.
    pub break_index: Option<usize>,
}

/// Normal-inverse-gamma prior on a segment's mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigPrior {
    pub mu0: f64,
    pub kappa0: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl NigPrior {
    /// Weakly informative prior centred on the sample mean with the sample
    /// variance as scale. A constant series gets a tiny positive scale.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let floor = 1e-12 * (1.0 + mean * mean);
        NigPrior {
            mu0: mean,
            kappa0: 1.0,
            alpha0: 1.0,
            beta0: var.max(floor),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.mu0.is_finite()
            && self.kappa0.is_finite()
            && self.kappa0 > 0.0
            && self.alpha0.is_finite()
            && self.alpha0 > 0.0
            && self.beta0.is_finite()
            && self.beta0 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid prior {self:?}")))
        }
    }

    /// Log marginal likelihood of `n` points with mean `mean` and sum of
    /// squared deviations `ss`.
    fn log_marginal(&self, n: f64, mean: f64, ss: f64) -> f64 {
        let kn = self.kappa0 + n;
        let an = self.alpha0 + n / 2.0;
        let bn = self.beta0 + 0.5 * ss + self.kappa0 * n * (mean - self.mu0).powi(2) / (2.0 * kn);
        lgamma(an) - lgamma(self.alpha0) + self.alpha0 * self.beta0.ln() - an * bn.ln()
            + 0.5 * (self.kappa0.ln() - kn.ln())
            - n / 2.0 * (2.0 * PI).ln()
    }

    /// Log Student-t predictive density of `x` after `n` points with mean
    /// `mean` and sum of squared deviations `ss`.
    fn log_predictive(&self, n: f64, mean: f64, ss: f64, x: f64) -> f64 {
        let kn = self.kappa0 + n;
        let mun = if n > 0.0 {
            (self.kappa0 * self.mu0 + n * mean) / kn
        } else {
            self.mu0
        };
        let an = self.alpha0 + n / 2.0;
        let bn = self.beta0 + 0.5 * ss + self.kappa0 * n * (mean - self.mu0).powi(2) / (2.0 * kn);
        let nu = 2.0 * an;
        let scale2 = bn * (kn + 1.0) / (an * kn);
        lgamma((nu + 1.0) / 2.0)
            - lgamma(nu / 2.0)
            - 0.5 * (nu * PI * scale2).ln()
            - (nu + 1.0) / 2.0 * (1.0 + (x - mun).powi(2) / (nu * scale2)).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct BocpdConfig {
    /// Constant hazard; `None` means `1 / T`.
    pub hazard: Option<f64>,
    /// `None` means [`NigPrior::from_values`].
    pub prior: Option<NigPrior>,
}

impl BocpdConfig {
    fn resolve(&self, values: &[f64]) -> Result<(f64, NigPrior)> {
        let h = self.hazard.unwrap_or(1.0 / values.len() as f64);
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::InvalidArgument(format!("hazard must lie in (0, 1), got {h}")));
        }
        let prior = self.prior.unwrap_or_else(|| NigPrior::from_values(values));
        prior.validate()?;
        Ok((h, prior))
    }
}

/// Running mean and sum of squared deviations (Welford).
#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    ss: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.ss += d * (x - self.mean);
    }
}

fn log_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Online run-length filter. Row `t` (0-based) holds `P(r_t = r | x_0..=x_t)`
/// for `r = 0..=t`, where `r` counts the earlier points of the segment that
/// contains `t`; `r = 0` means a segment starts at `t`.
pub fn run_length_posterior(series: &ScalarSeries, config: &BocpdConfig) -> Result<Vec<Vec<f64>>> {
    let x = series.values();
    let (h, prior) = config.resolve(x)?;
    let (lh, l1h) = (h.ln(), (-h).ln_1p());
    let mut rows = Vec::with_capacity(x.len());
    rows.push(vec![1.0]);
    // Moments of the run for each run length, aligned with the previous row.
    let mut runs = vec![Moments::default()];
    runs[0].push(x[0]);
    let mut log_prev = vec![0.0];
    for &xt in &x[1..] {
        let mut log_row = Vec::with_capacity(log_prev.len() + 1);
        log_row.push(lh + prior.log_predictive(0.0, 0.0, 0.0, xt));
        for (lp, m) in log_prev.iter().zip(&runs) {
            log_row.push(lp + l1h + prior.log_predictive(m.n, m.mean, m.ss, xt));
        }
        let z = log_sum_exp(log_row.iter().copied());
        log_row.iter_mut().for_each(|v| *v -= z);
        rows.push(log_row.iter().map(|v| v.exp()).collect());

        let mut fresh = Moments::default();
        fresh.push(xt);
        runs.iter_mut().for_each(|m| m.push(xt));
        runs.insert(0, fresh);
        log_prev = log_row;
    }
    Ok(rows)
}

/// `P(a segment starts at t | all data)` for every 0-based `t`; entry 0 is 0.
///
/// Sums over all segmentations with independent boundaries of probability
/// `hazard` between consecutive points, using closed-form segment marginals.
pub fn changepoint_posterior(series: &ScalarSeries, config: &BocpdConfig) -> Result<Vec<f64>> {
    let x = series.values();
    let n = x.len();
    let (h, prior) = config.resolve(x)?;
    let (lh, l1h) = (h.ln(), (-h).ln_1p());
    // seg[s][e - s] = log marginal of x[s..=e]
    let seg: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            let mut m = Moments::default();
            x[s..]
                .iter()
                .map(|&v| {
                    m.push(v);
                    prior.log_marginal(m.n, m.mean, m.ss)
                })
                .collect()
        })
        .collect();
    // fwd[e + 1] = log P(x[..=e], a segment ends at e)
    let mut fwd = vec![f64::NEG_INFINITY; n + 1];
    fwd[0] = 0.0;
    for e in 0..n {
        fwd[e + 1] = log_sum_exp((0..=e).map(|s| {
            let start = if s == 0 { 0.0 } else { lh };
            fwd[s] + start + (e - s) as f64 * l1h + seg[s][e - s]
        }));
    }
    // bwd[s] = log P(x[s..] | a segment starts at s)
    let mut bwd = vec![f64::NEG_INFINITY; n + 1];
    for s in (0..n).rev() {
        bwd[s] = log_sum_exp((s..n).map(|e| {
            let next = if e + 1 == n { 0.0 } else { lh + bwd[e + 1] };
            (e - s) as f64 * l1h + seg[s][e - s] + next
        }));
    }
    let z = fwd[n];
    let mut post = vec![0.0; n];
    for t in 1..n {
        post[t] = (fwd[t] + lh + bwd[t] - z).exp().clamp(0.0, 1.0);
    }
    Ok(post)
}

/// Bayesian changepoint detection. The confidence is the largest posterior
/// probability of a segment starting at any frame after the first.
pub fn bocpd(series: &ScalarSeries, config: &BocpdConfig) -> Result<BaselineResult> {
    let post = changepoint_posterior(series, config)?;
    let (idx, conf) =
        post.iter().enumerate().skip(1).fold(
            (1, f64::NEG_INFINITY),
            |best, (i, &p)| if p > best.1 { (i, p) } else { best },
        );
    Ok(BaselineResult {
        method: BaselineMethod::bcp(series.source()),
        location_id: series.location_id().to_string(),
        confidence: conf,
        break_index: Some(idx),
    })
}

fn design_row(tau: f64, n_harmonics: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 + 2 * n_harmonics);
    row.push(1.0);
    row.push(tau);
    for k in 1..=n_harmonics {
        let w = 2.0 * PI * k as f64 * tau;
        row.push(w.cos());
        row.push(w.sin());
    }
    row
}

/// Least-squares fit of rows `range` of the design; returns coefficients
/// and the sum of squared residuals.
fn fit_segment(design: &DMatrix<f64>, y: &[f64], range: std::ops::Range<usize>) -> (DVector<f64>, f64) {
    let a = design.rows(range.start, range.len()).into_owned();
    let b = DVector::from_column_slice(&y[range]);
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max() * range_len_f(&a);
    let coef = svd.solve(&b, tol).expect("U and V were computed");
    let sse = (&a * &coef - &b).norm_squared();
    (coef, sse)
}

fn range_len_f(a: &DMatrix<f64>) -> f64 {
    a.nrows().max(a.ncols()) as f64
}

/// Single-break season-trend regression.
///
/// Each candidate break `b` splits the series into `[0, b)` and `[b, T)`, and
/// both halves get their own intercept, linear trend and `n_harmonics`
/// annual harmonics. The break with the smallest total squared error wins
/// (earliest on ties); its confidence is the gap between the two fitted
/// curves at the break date. A single unbroken fit competes through BIC; if
/// it wins the confidence is 0 and there is no break.
pub fn trend_break(series: &ScalarSeries, n_harmonics: usize) -> Result<BaselineResult> {
    let p = 2 + 2 * n_harmonics;
    let n = series.len();
    let min = 2 * p + 2;
    if n < min {
        return Err(Error::TooShort { len: n, min });
    }
    let tau = series.years();
    let y = series.values();
    let rows: Vec<Vec<f64>> = tau.iter().map(|&t| design_row(t, n_harmonics)).collect();
    let design = DMatrix::from_fn(n, p, |i, j| rows[i][j]);

    let mut best: Option<(usize, f64, DVector<f64>, DVector<f64>)> = None;
    for b in (p + 1)..=(n - p - 1) {
        let (c1, s1) = fit_segment(&design, y, 0..b);
        let (c2, s2) = fit_segment(&design, y, b..n);
        let sse = s1 + s2;
        if best.as_ref().is_none_or(|bst| sse < bst.1) {
            best = Some((b, sse, c1, c2));
        }
    }
    let (b, sse_break, c1, c2) = best.expect("at least one candidate break");
    let (_, sse_flat) = fit_segment(&design, y, 0..n);

    let mean = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let floor = 1e-10 * sst + 1e-300;
    let nf = n as f64;
    let bic = |sse: f64, k: usize| nf * (sse.max(floor) / nf).ln() + k as f64 * nf.ln();
    let method = BaselineMethod::bfast(series.source());
    let location_id = series.location_id().to_string();
    if bic(sse_flat, p) <= bic(sse_break, 2 * p + 1) {
        return Ok(BaselineResult {
            method,
            location_id,
            confidence: 0.0,
            break_index: None,
        });
    }
    let x_b = DVector::from_vec(rows[b].clone());
    let shift = (x_b.dot(&c2) - x_b.dot(&c1)).abs();
    Ok(BaselineResult {
        method,
        location_id,
        confidence: shift,
        break_index: Some(b),
    })
}

/// Per-frame count of pixels at or above `threshold`.
pub fn series_from_probmaps(series: &ProbMapSeries, threshold: f64) -> Result<ScalarSeries> {
    let values = series
        .maps()
        .iter()
        .map(|m| spectral::cafo_pixel_count(m, threshold) as f64)
        .collect();
    ScalarSeries::new(
        series.location_id(),
        SeriesSource::PixelCount,
        series.timestamps(),
        values,
    )
}

/// Per-frame mean NDVI. Frames without a single defined NDVI pixel are
/// dropped.
pub fn series_from_scene(scene: &SceneSeries) -> Result<ScalarSeries> {
    let mut timestamps = Vec::with_capacity(scene.len());
    let mut values = Vec::with_capacity(scene.len());
    for f in scene.frames() {
        match spectral::mean_ndvi(f) {
            Ok(v) => {
                timestamps.push(f.timestamp());
                values.push(v);
            }
            Err(Error::AllMasked) => {}
            Err(e) => return Err(e),
        }
    }
    ScalarSeries::new(scene.location_id(), SeriesSource::MeanNdvi, timestamps, values)
}

/// Runs `method` on the matching summary series.
pub fn run_baseline(
    method: BaselineMethod,
    ndvi: Option<&ScalarSeries>,
    pixel_count: Option<&ScalarSeries>,
    bocpd_config: &BocpdConfig,
    n_harmonics: usize,
) -> Result<BaselineResult> {
    let series = match method.source() {
        SeriesSource::MeanNdvi => ndvi,
        SeriesSource::PixelCount => pixel_count,
    }
    .ok_or_else(|| Error::InvalidArgument(format!("{method} needs a {:?} series", method.source())))?;
    match method {
        BaselineMethod::BcpNdvi | BaselineMethod::BcpPixelCount => bocpd(series, bocpd_config),
        BaselineMethod::BfastNdvi | BaselineMethod::BfastPixelCount => trend_break(series, n_harmonics),
    }
}
