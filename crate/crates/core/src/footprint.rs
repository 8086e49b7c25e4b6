//! Time-dependent footprint model and its log-likelihood.
//!
//! The expected footprint at frame `t` (1-based) is
//!
//! ```text
//! Z(t) = min(1, F0 + F+ * S(t))      S(t) = 1 / (1 + exp(-(t - t*) / alpha))
//! ```
//!
//! so `Z ~ F0` well before `t*` and `Z ~ F0 + F+` (the union) well after it.
//! Each observed probability `p` is scored with the Bernoulli likelihood
//! `p * Z + (1 - p) * (1 - Z)`, clamped to `[LOG_EPS, 1]` before the log.
//! Masked pixels contribute nothing.

use crate::error::{Error, Result};
use crate::spectral::ProbMapSeries;

/// Lower clamp applied to every likelihood term before taking its log.
pub const LOG_EPS: f64 = 1e-9;

/// Default transition-duration scale, in frames.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Parameters of the transition function.
#[derive(Clone, Debug, PartialEq)]
pub struct FootprintModel {
    pub width: usize,
    pub height: usize,
    /// Footprint before the expansion, relaxed to `[0, 1]`.
    pub f0: Vec<f64>,
    /// Footprint added by the expansion, relaxed to `[0, 1]`.
    pub fplus: Vec<f64>,
    /// Transition time in frame-index units (1-based).
    pub t_star: f64,
    pub alpha: f64,
}

impl FootprintModel {
    pub fn new(width: usize, height: usize, f0: Vec<f64>, fplus: Vec<f64>, t_star: f64, alpha: f64) -> Result<Self> {
        let n = width * height;
        if n == 0 || f0.len() != n || fplus.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} model with {} / {} footprint entries",
                f0.len(),
                fplus.len()
            )));
        }
        if f0.iter().chain(&fplus).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("footprint entries must lie in [0, 1]".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) || !t_star.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need alpha > 0 and finite t*, got alpha={alpha} t*={t_star}"
            )));
        }
        Ok(FootprintModel {
            width,
            height,
            f0,
            fplus,
            t_star,
            alpha,
        })
    }

    /// A model without expansion (`F+ = 0`).
    pub fn static_model(width: usize, height: usize, f0: Vec<f64>, alpha: f64) -> Result<Self> {
        let n = f0.len();
        FootprintModel::new(width, height, f0, vec![0.0; n], 1.0, alpha)
    }

    fn check_against(&self, series: &ProbMapSeries) -> Result<()> {
        if self.width != series.width() || self.height != series.height() {
            return Err(Error::DimensionMismatch(format!(
                "model is {}x{}, series is {}x{}",
                self.width,
                self.height,
                series.width(),
                series.height()
            )));
        }
        Ok(())
    }
}

/// Partial derivatives of the log-likelihood with respect to every entry
/// of `f0`, `fplus` and `t_star` (`alpha` is held fixed).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradient {
    pub d_f0: Vec<f64>,
    pub d_fplus: Vec<f64>,
    pub d_t_star: f64,
}

/// Duration-scaled logistic step, `1 / (1 + exp(-(t - t_star) / alpha))`.
pub fn sigmoid_transition(t: f64, t_star: f64, alpha: f64) -> f64 {
    let x = (t - t_star) / alpha;
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Expected footprint `Z(t)` at (1-based) frame index `t`.
pub fn footprint_at(model: &FootprintModel, t: f64) -> Vec<f64> {
    let s = sigmoid_transition(t, model.t_star, model.alpha);
    model
        .f0
        .iter()
        .zip(&model.fplus)
        .map(|(&a, &b)| (a + b * s).clamp(0.0, 1.0))
        .collect()
}

/// Total log-likelihood of `series` under `model`.
pub fn log_likelihood(model: &FootprintModel, series: &ProbMapSeries) -> Result<f64> {
    model.check_against(series)?;
    let obs = Observations::from_series(series);
    Ok(obs.log_likelihood(&model.f0, Some(&model.fplus), model.t_star, model.alpha))
}

/// Analytic gradient of [`log_likelihood`]. Terms sitting on an active
/// clamp (`Z` saturated at 1 or the likelihood at `LOG_EPS`) contribute zero.
pub fn grad_log_likelihood(model: &FootprintModel, series: &ProbMapSeries) -> Result<ModelGradient> {
    model.check_against(series)?;
    let obs = Observations::from_series(series);
    let n = obs.n_pixels;
    let mut grad = ModelGradient {
        d_f0: vec![0.0; n],
        d_fplus: vec![0.0; n],
        d_t_star: 0.0,
    };
    grad.d_t_star = obs.gradient(
        &model.f0,
        Some(&model.fplus),
        model.t_star,
        model.alpha,
        &mut grad.d_f0,
        Some(&mut grad.d_fplus),
    );
    Ok(grad)
}

/// Likelihood coefficients: each term is `a * Z + b`.
#[cfg(not(feature = "literal-likelihood"))]
#[inline(always)]
pub(crate) fn coefficients(p: f64) -> (f64, f64) {
    (2.0 * p - 1.0, 1.0 - p)
}

#[cfg(feature = "literal-likelihood")]
#[inline(always)]
pub(crate) fn coefficients(p: f64) -> (f64, f64) {
    (p, 0.0)
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline(always)]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Probability maps flattened for the likelihood kernels: one `f32` buffer
/// per frame, masked pixels stored as NaN.
#[derive(Clone, Debug)]
pub(crate) struct Observations {
    pub n_pixels: usize,
    pub frames: Vec<Vec<f32>>,
}

impl Observations {
    pub fn from_series(series: &ProbMapSeries) -> Self {
        let frames = series
            .maps()
            .iter()
            .map(|m| {
                m.values()
                    .iter()
                    .zip(m.mask())
                    .map(|(&v, &masked)| if masked { f32::NAN } else { v })
                    .collect()
            })
            .collect();
        Observations {
            n_pixels: series.width() * series.height(),
            frames,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Log-likelihood with `fplus = None` meaning the static model `Z = f0`.
    pub fn log_likelihood(&self, f0: &[f64], fplus: Option<&[f64]>, t_star: f64, alpha: f64) -> f64 {
        let mut total = CompensatedSum::default();
        for (k, frame) in self.frames.iter().enumerate() {
            let s = sigmoid_transition((k + 1) as f64, t_star, alpha);
            let mut acc = CompensatedSum::default();
            for i in 0..self.n_pixels {
                let p = frame[i];
                if p.is_nan() {
                    continue;
                }
                let (a, b) = coefficients(p as f64);
                let raw = match fplus {
                    Some(fp) => f0[i] + fp[i] * s,
                    None => f0[i],
                };
                let z = raw.clamp(0.0, 1.0);
                let q = (a * z + b).clamp(LOG_EPS, 1.0);
                acc.add(q.ln());
            }
            total.add(acc.value());
        }
        total.value()
    }

    /// Accumulates `dlogL/df0` (and `dlogL/dfplus` when given) into the
    /// output buffers, which are overwritten. Returns `dlogL/dt*` (zero for
    /// the static model).
    pub fn gradient(
        &self,
        f0: &[f64],
        fplus: Option<&[f64]>,
        t_star: f64,
        alpha: f64,
        d_f0: &mut [f64],
        d_fplus: Option<&mut [f64]>,
    ) -> f64 {
        let n = self.n_pixels;
        let f0 = &f0[..n];
        let d_f0 = &mut d_f0[..n];
        d_f0.iter_mut().for_each(|g| *g = 0.0);
        match (fplus, d_fplus) {
            (Some(fp), Some(d_fp)) => {
                let fp = &fp[..n];
                let d_fp = &mut d_fp[..n];
                d_fp.iter_mut().for_each(|g| *g = 0.0);
                let mut d_t = 0.0;
                for (k, frame) in self.frames.iter().enumerate() {
                    let frame = &frame[..n];
                    let s = sigmoid_transition((k + 1) as f64, t_star, alpha);
                    let ds = -s * (1.0 - s) / alpha;
                    let mut lanes = [0.0f64; 4];
                    for i in 0..n {
                        let g = term_slope(frame[i], f0[i] + fp[i] * s);
                        d_f0[i] += g;
                        d_fp[i] += g * s;
                        lanes[i & 3] += g * fp[i];
                    }
                    d_t += ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) * ds;
                }
                d_t
            }
            (None, _) => {
                for frame in &self.frames {
                    let frame = &frame[..n];
                    for i in 0..n {
                        d_f0[i] += term_slope(frame[i], f0[i]);
                    }
                }
                0.0
            }
            (Some(_), None) => panic!("fplus given without an output buffer"),
        }
    }
}

/// `d log(a Z + b) / dZ` for the raw (unclamped) footprint value, zero on an
/// active clamp or a masked pixel.
#[inline(always)]
fn term_slope(p: f32, raw: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&raw) {
        return 0.0;
    }
    let (a, b) = coefficients(p as f64);
    let q = a * raw + b;
    if q < LOG_EPS {
        0.0
    } else {
        a / q
    }
}

#[cfg(all(test, not(feature = "literal-likelihood")))]
mod tests {
    use super::*;
    use crate::spectral::ProbMap;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(width: usize, height: usize, frames: Vec<Vec<f32>>) -> ProbMapSeries {
        let base = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        let maps = frames
            .into_iter()
            .enumerate()
            .map(|(k, v)| {
                let n = v.len();
                ProbMap::new(width, height, v, vec![false; n], base + chrono::Days::new(k as u64)).unwrap()
            })
            .collect();
        ProbMapSeries::new("t", maps, 3.0).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_transition(4.0, 4.0, 1.0), 0.5);
        assert!((sigmoid_transition(6.0, 4.0, 1.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert_eq!(sigmoid_transition(1e6, 0.0, 1.0), 1.0);
        assert_eq!(sigmoid_transition(-1e6, 0.0, 1.0), 0.0);
    }

    #[test]
    fn footprint_without_expansion_is_f0() {
        let m = FootprintModel::static_model(2, 1, vec![0.3, 1.0], 1.0).unwrap();
        for t in [1.0, 5.0, 100.0] {
            assert_eq!(footprint_at(&m, t), vec![0.3, 1.0]);
        }
        let m = FootprintModel::new(2, 1, vec![0.3, 0.0], vec![0.5, 1.0], 50.0, 2.0).unwrap();
        let early = footprint_at(&m, 50.0 - 40.0);
        assert!((early[0] - 0.3).abs() < 1e-8 && early[1] < 1e-8);
    }

    #[test]
    fn idealized_footprints_reach_their_union() {
        // 7x10 matrices: original shed rows 1-5 cols 1-3; addition rows 1-2 cols 4-8.
        let (w, h) = (10, 7);
        let mut f0 = vec![0.0; w * h];
        let mut fp = vec![0.0; w * h];
        for r in 1..=5 {
            for c in 1..=3 {
                f0[r * w + c] = 1.0;
            }
        }
        for r in 1..=2 {
            for c in 4..=8 {
                fp[r * w + c] = 1.0;
            }
        }
        let m = FootprintModel::new(w, h, f0.clone(), fp.clone(), 10.0, 1.0).unwrap();
        let late = footprint_at(&m, 60.0);
        for i in 0..w * h {
            let union = f0[i].max(fp[i]);
            assert!((late[i] - union).abs() < 1e-12, "pixel {i}");
        }
        assert_eq!(late.iter().filter(|&&z| z > 0.5).count(), 15 + 10);
    }

    #[test]
    fn uninformative_probabilities_give_constant_likelihood() {
        let s = series(3, 2, vec![vec![0.5; 6]; 4]);
        let m = FootprintModel::new(3, 2, vec![0.9; 6], vec![0.1; 6], 2.5, 1.0).unwrap();
        let ll = log_likelihood(&m, &s).unwrap();
        assert!((ll - 24.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_binary_fit_is_zero() {
        let s = series(2, 1, vec![vec![1.0, 0.0]; 3]);
        let m = FootprintModel::static_model(2, 1, vec![1.0, 0.0], 1.0).unwrap();
        assert_eq!(log_likelihood(&m, &s).unwrap(), 0.0);
    }

    #[test]
    fn gradient_for_t_star_vanishes_without_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame: Vec<f32> = (0..9).map(|_| rng.gen_range(0.05..0.95)).collect();
        let s = series(3, 3, vec![frame; 5]);
        let m = FootprintModel::new(3, 3, vec![0.4; 9], vec![0.0; 9], 2.7, 1.0).unwrap();
        assert_eq!(grad_log_likelihood(&m, &s).unwrap().d_t_star, 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let s = series(2, 2, vec![vec![0.5; 4]; 2]);
        let m = FootprintModel::static_model(4, 1, vec![0.5; 4], 1.0).unwrap();
        assert!(matches!(log_likelihood(&m, &s), Err(Error::DimensionMismatch(_))));
        assert!(matches!(grad_log_likelihood(&m, &s), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn masked_pixels_contribute_nothing() {
        let base = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        let maps = (0..3)
            .map(|k| ProbMap::new(2, 1, vec![0.9, 0.0], vec![false, true], base + chrono::Days::new(k)).unwrap())
            .collect();
        let s = ProbMapSeries::new("m", maps, 3.0).unwrap();
        let m = FootprintModel::new(2, 1, vec![0.7, 0.2], vec![0.1, 0.6], 2.0, 1.0).unwrap();
        let single = series(1, 1, vec![vec![0.9]; 3]);
        let m1 = FootprintModel::new(1, 1, vec![0.7], vec![0.1], 2.0, 1.0).unwrap();
        assert_eq!(log_likelihood(&m, &s).unwrap(), log_likelihood(&m1, &single).unwrap());
        let g = grad_log_likelihood(&m, &s).unwrap();
        assert_eq!(g.d_f0[1], 0.0);
        assert_eq!(g.d_fplus[1], 0.0);
    }

    #[test]
    fn saturated_pixels_have_zero_gradient() {
        let s = series(1, 1, vec![vec![0.3]; 4]);
        let m = FootprintModel::new(1, 1, vec![0.8], vec![0.9], 1.0, 1.0).unwrap();
        let g = grad_log_likelihood(&m, &s).unwrap();
        // Z saturates from frame 2 on (0.8 + 0.9 * S > 1); only frame 1 contributes.
        let s1 = sigmoid_transition(1.0, 1.0, 1.0);
        assert!(0.8 + 0.9 * s1 > 1.0);
        assert_eq!(g.d_f0[0], 0.0);
    }
}
