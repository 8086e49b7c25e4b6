//! Projected heavy-ball ascent used by both fits.
//!
//! Footprint entries live in logit space, boxed to `[-LOGIT_BOUND,
//! LOGIT_BOUND]`; an entry on the box is snapped to exactly 0 or 1. Each
//! logit moves along the likelihood slope with respect to the entry itself
//! (not the logit), so boundary optima are reached in a few dozen
//! iterations instead of a slow `1/k` crawl. Pixels whose
//! parameters sit on the box with the slope pointing outward are frozen;
//! frozen pixels whose footprint still depends on `t*` keep contributing to
//! its slope, and all frozen pixels are rechecked once `t*` has moved.

use crate::detector::FitConfig;
use crate::error::{Error, Result};
use crate::footprint::{coefficients, sigmoid_transition, Observations, LOG_EPS};

/// Logits beyond this bound map to exactly 0 or 1.
pub(crate) const LOGIT_BOUND: f64 = 8.0;
/// Iterations between objective evaluations for the stopping rule.
const CHECK_EVERY: usize = 10;
/// Decay of the squared-gradient average whose running peak normalizes the
/// `t*` step.
const T_STAR_RMS_DECAY: f64 = 0.99;
/// `t*` stays put while the footprints settle.
const T_STAR_WARMUP: usize = 10;
/// Frozen pixels are rechecked once `t*` has moved this far (frames).
const RECHECK_SHIFT: f64 = 2.0;

#[inline(always)]
pub(crate) fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Footprint entry of a boxed logit.
#[inline(always)]
fn entry(u: f64) -> f64 {
    if u >= LOGIT_BOUND {
        1.0
    } else if u <= -LOGIT_BOUND {
        0.0
    } else {
        logistic(u)
    }
}

/// Boxed logit of an initial entry; entries within `snap` of 0 or 1 land
/// on the box.
fn init_logit(f: f64, snap: f64) -> f64 {
    if f <= snap {
        -LOGIT_BOUND
    } else if f >= 1.0 - snap {
        LOGIT_BOUND
    } else {
        (f / (1.0 - f)).ln().clamp(-LOGIT_BOUND, LOGIT_BOUND)
    }
}

/// Observations in pixel-major order: `p[i * n_frames + t]`, NaN when masked.
pub(crate) struct PixelData {
    pub n_pixels: usize,
    pub n_frames: usize,
    p: Vec<f32>,
}

impl PixelData {
    pub fn new(obs: &Observations) -> Self {
        let (n, t) = (obs.n_pixels, obs.n_frames());
        let mut p = vec![f32::NAN; n * t];
        for (k, frame) in obs.frames.iter().enumerate() {
            for (i, &v) in frame.iter().enumerate() {
                p[i * t + k] = v;
            }
        }
        PixelData {
            n_pixels: n,
            n_frames: t,
            p,
        }
    }

    #[inline(always)]
    fn pixel(&self, i: usize) -> &[f32] {
        &self.p[i * self.n_frames..(i + 1) * self.n_frames]
    }
}

/// `d log(a Z + b) / dZ`, zero on masked entries and active clamps.
#[inline(always)]
fn slope(p: f32, raw: f64) -> f64 {
    let (a, b) = coefficients(p as f64);
    let q = a * raw + b;
    // NaN (masked) fails the comparison.
    if raw <= 1.0 && q >= LOG_EPS {
        a / q
    } else {
        0.0
    }
}

/// Per-pixel slopes with respect to `f0`, `fplus` and (before the `fplus`
/// factor) `t*`.
#[inline]
fn pixel_grad(p: &[f32], f0: f64, fp: f64, s: &[f64], ds: &[f64]) -> (f64, f64, f64) {
    let mut g0 = [0.0f64; 4];
    let mut gp = [0.0f64; 4];
    let mut gt = [0.0f64; 4];
    let chunks = p.chunks_exact(4).zip(s.chunks_exact(4)).zip(ds.chunks_exact(4));
    for ((pc, sc), dc) in chunks {
        for l in 0..4 {
            let w = slope(pc[l], f0 + fp * sc[l]);
            g0[l] += w;
            gp[l] += w * sc[l];
            gt[l] += w * dc[l];
        }
    }
    let whole = p.len() - p.len() % 4;
    for t in whole..p.len() {
        let w = slope(p[t], f0 + fp * s[t]);
        g0[0] += w;
        gp[0] += w * s[t];
        gt[0] += w * ds[t];
    }
    let sum = |x: [f64; 4]| (x[0] + x[1]) + (x[2] + x[3]);
    (sum(g0), sum(gp), sum(gt))
}

#[inline]
fn pixel_grad_static(p: &[f32], f0: f64) -> f64 {
    let mut g = [0.0f64; 4];
    let mut chunks = p.chunks_exact(4);
    for pc in &mut chunks {
        for l in 0..4 {
            g[l] += slope(pc[l], f0);
        }
    }
    for &v in chunks.remainder() {
        g[0] += slope(v, f0);
    }
    (g[0] + g[1]) + (g[2] + g[3])
}

/// Natural log of a positive normal number, to within a few ulp. Written
/// with float-only operations so the per-pixel loop vectorizes.
#[inline(always)]
fn fast_ln(x: f64) -> f64 {
    const LN2: f64 = std::f64::consts::LN_2;
    const MANTISSA: u64 = 0x000f_ffff_ffff_ffff;
    const ONE: u64 = 0x3ff0_0000_0000_0000;
    // 2^52, whose low mantissa bits then hold the biased exponent
    const MAGIC: u64 = 0x4330_0000_0000_0000;
    let bits = x.to_bits();
    let e = f64::from_bits((bits >> 52) | MAGIC) - (4_503_599_627_370_496.0 + 1023.0);
    let m = f64::from_bits((bits & MANTISSA) | ONE);
    let big = m > std::f64::consts::SQRT_2;
    let m = if big { m * 0.5 } else { m };
    let e = if big { e + 1.0 } else { e };
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    // atanh series, coefficients 1/(2k+1)
    let mut poly = 1.0 / 23.0;
    poly = poly * s2 + 1.0 / 21.0;
    poly = poly * s2 + 1.0 / 19.0;
    poly = poly * s2 + 1.0 / 17.0;
    poly = poly * s2 + 1.0 / 15.0;
    poly = poly * s2 + 1.0 / 13.0;
    poly = poly * s2 + 1.0 / 11.0;
    poly = poly * s2 + 1.0 / 9.0;
    poly = poly * s2 + 1.0 / 7.0;
    poly = poly * s2 + 1.0 / 5.0;
    poly = poly * s2 + 1.0 / 3.0;
    e * LN2 + 2.0 * s + 2.0 * s * s2 * poly
}

#[inline(always)]
fn ll_term(v: f32, raw: f64) -> f64 {
    let (a, b) = coefficients(v as f64);
    let term = fast_ln((a * raw.min(1.0) + b).clamp(LOG_EPS, 1.0));
    if v.is_nan() {
        0.0
    } else {
        term
    }
}

fn pixel_ll(p: &[f32], f0: f64, fp: f64, s: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut chunks = p.chunks_exact(4).zip(s.chunks_exact(4));
    for (pc, sc) in &mut chunks {
        for l in 0..4 {
            acc[l] += ll_term(pc[l], f0 + fp * sc[l]);
        }
    }
    let whole = p.len() - p.len() % 4;
    for (&v, &st) in p[whole..].iter().zip(&s[whole..]) {
        acc[0] += ll_term(v, f0 + fp * st);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[inline(always)]
fn settled(u: f64, g: f64) -> bool {
    (u >= LOGIT_BOUND && g >= 0.0) || (u <= -LOGIT_BOUND && g <= 0.0)
}

pub(crate) struct RunOutcome {
    pub f0: Vec<f64>,
    pub fplus: Option<Vec<f64>>,
    pub t_star: f64,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub(crate) struct Ascent<'a> {
    pub data: &'a PixelData,
    pub config: &'a FitConfig,
}

struct State {
    u0: Vec<f64>,
    up: Vec<f64>,
    v0: Vec<f64>,
    vp: Vec<f64>,
    f0: Vec<f64>,
    fp: Vec<f64>,
    frozen: Vec<bool>,
    /// Frozen pixels with `0 < fplus` and `f0 < 1`.
    coupled: Vec<usize>,
    s: Vec<f64>,
    ds: Vec<f64>,
}

impl Ascent<'_> {
    fn fill_sigmoid(&self, t_star: f64, s: &mut [f64], ds: &mut [f64]) {
        let alpha = self.config.alpha;
        for (k, (s, ds)) in s.iter_mut().zip(ds.iter_mut()).enumerate() {
            *s = sigmoid_transition((k + 1) as f64, t_star, alpha);
            *ds = -*s * (1.0 - *s) / alpha;
        }
    }

    /// Slopes of one pixel's parameters, sparsity penalty included.
    fn slopes(&self, st: &State, i: usize, expanding: bool) -> (f64, f64, f64) {
        let p = self.data.pixel(i);
        if expanding {
            let (g0, gp, gt) = pixel_grad(p, st.f0[i], st.fp[i], &st.s, &st.ds);
            (g0, gp - self.config.sparsity, gt)
        } else {
            (pixel_grad_static(p, st.f0[i]), 0.0, 0.0)
        }
    }

    /// With `f0` pinned at 1 the footprint is saturated and `fplus` has no
    /// effect, whatever the one-sided slope at the kink says.
    fn is_settled(st: &State, i: usize, g0: f64, gp: f64, expanding: bool) -> bool {
        settled(st.u0[i], g0) && (!expanding || st.u0[i] >= LOGIT_BOUND || settled(st.up[i], gp))
    }

    /// One run. With `fplus_init = None` the expansion is pinned to zero and
    /// only `f0` moves.
    pub fn run(&self, f0_init: &[f64], fplus_init: Option<&[f64]>, t_star_init: f64, snap: f64) -> Result<RunOutcome> {
        let cfg = self.config;
        let n = self.data.n_pixels;
        let n_frames = self.data.n_frames as f64;
        let scale = 1.0 / n_frames;
        let t_step = cfg.step_size * (n_frames / 50.0).max(1.0);
        let expanding = fplus_init.is_some();

        let u0: Vec<f64> = f0_init.iter().map(|&f| init_logit(f, snap)).collect();
        let up: Vec<f64> = fplus_init.map_or_else(Vec::new, |fp| fp.iter().map(|&f| init_logit(f, snap)).collect());
        let mut st = State {
            f0: u0.iter().map(|&u| entry(u)).collect(),
            fp: up.iter().map(|&u| entry(u)).collect(),
            v0: vec![0.0; n],
            vp: vec![0.0; up.len()],
            u0,
            up,
            frozen: vec![false; n],
            coupled: Vec::new(),
            s: vec![0.0; self.data.n_frames],
            ds: vec![0.0; self.data.n_frames],
        };
        if !expanding {
            st.fp = vec![0.0; n];
        }
        let mut t_star = if expanding {
            t_star_init.clamp(1.0, n_frames)
        } else {
            1.0
        };
        self.fill_sigmoid(t_star, &mut st.s, &mut st.ds);

        // Per-pixel log-likelihood, refreshed at checks for pixels that moved
        // (or, when `t*` moved, whose footprint depends on it).
        let mut ll_pix = vec![0.0; n];
        let mut fresh = vec![false; n];
        let mut ll_t_star = t_star;
        let penalty = |fp: &[f64]| {
            if expanding && cfg.sparsity > 0.0 {
                cfg.sparsity * fp.iter().sum::<f64>()
            } else {
                0.0
            }
        };
        let mut best_obj = f64::NEG_INFINITY;
        let mut best = (st.f0.clone(), st.fp.clone(), t_star);
        let mut last_obj = f64::NAN;
        let mut active: Vec<usize> = (0..n).collect();
        let mut recheck_at = t_star;
        let (mut vt, mut rms_t, mut rms_weight, mut rms_peak) = (0.0, 0.0, 0.0, 0.0f64);
        let mut converged = false;
        let mut iterations = 0;

        let step = |u: &mut f64, v: &mut f64, g: f64| {
            *v = cfg.momentum * *v + cfg.step_size * g * scale;
            *u += *v;
            if *u >= LOGIT_BOUND {
                *u = LOGIT_BOUND;
                *v = 0.0;
            } else if *u <= -LOGIT_BOUND {
                *u = -LOGIT_BOUND;
                *v = 0.0;
            }
        };

        while iterations < cfg.max_iterations {
            iterations += 1;
            let mut d_t = 0.0;
            for &i in &active {
                let (g0, gp, gt) = self.slopes(&st, i, expanding);
                step(&mut st.u0[i], &mut st.v0[i], g0);
                st.f0[i] = entry(st.u0[i]);
                if expanding {
                    d_t += st.fp[i] * gt;
                    step(&mut st.up[i], &mut st.vp[i], gp);
                    st.fp[i] = entry(st.up[i]);
                }
                fresh[i] = false;
                if Self::is_settled(&st, i, g0, gp, expanding) {
                    st.frozen[i] = true;
                    if st.fp[i] > 0.0 && st.f0[i] < 1.0 {
                        st.coupled.push(i);
                    }
                }
            }
            active.retain(|&i| !st.frozen[i]);
            if expanding && iterations > T_STAR_WARMUP {
                for &i in &st.coupled {
                    let (_, _, gt) = pixel_grad(self.data.pixel(i), st.f0[i], st.fp[i], &st.s, &st.ds);
                    d_t += st.fp[i] * gt;
                }
            }

            if expanding && iterations > T_STAR_WARMUP {
                rms_t = T_STAR_RMS_DECAY * rms_t + (1.0 - T_STAR_RMS_DECAY) * d_t * d_t;
                rms_weight = T_STAR_RMS_DECAY * rms_weight + (1.0 - T_STAR_RMS_DECAY);
                rms_peak = rms_peak.max((rms_t / rms_weight).sqrt());
                let rms = rms_peak;
                if rms > 0.0 {
                    vt = cfg.momentum * vt + t_step * d_t / rms;
                    t_star += vt;
                }
                if t_star <= 1.0 || t_star >= n_frames {
                    t_star = t_star.clamp(1.0, n_frames);
                    vt = 0.0;
                }
                self.fill_sigmoid(t_star, &mut st.s, &mut st.ds);
            }

            if iterations % CHECK_EVERY != 0 && iterations != cfg.max_iterations {
                continue;
            }

            if expanding && (t_star - recheck_at).abs() > RECHECK_SHIFT {
                self.recheck(&mut st, &mut active);
                recheck_at = t_star;
            }
            let moved = t_star != ll_t_star;
            for i in 0..n {
                if !fresh[i] || (moved && st.fp[i] > 0.0 && st.f0[i] < 1.0) {
                    ll_pix[i] = pixel_ll(self.data.pixel(i), st.f0[i], st.fp[i], &st.s);
                    fresh[i] = true;
                }
            }
            ll_t_star = t_star;
            let obj = ll_pix.iter().sum::<f64>() - penalty(&st.fp);
            if !obj.is_finite() {
                return Err(Error::NonFiniteLikelihood);
            }
            if obj > best_obj {
                best_obj = obj;
                best = (st.f0.clone(), st.fp.clone(), t_star);
            }
            if (obj - last_obj).abs() <= cfg.convergence_tol * obj.abs() {
                let woke = if expanding && t_star != recheck_at {
                    recheck_at = t_star;
                    self.recheck(&mut st, &mut active)
                } else {
                    0
                };
                if woke == 0 {
                    converged = true;
                    break;
                }
            }
            last_obj = obj;
        }

        Ok(RunOutcome {
            f0: best.0,
            fplus: expanding.then_some(best.1),
            t_star: best.2,
            objective: best_obj,
            converged,
            iterations,
        })
    }

    /// Unfreezes pixels with a parameter that would keep moving inward from
    /// one logit unit inside the box, the other held, at the current `t*`.
    /// Probing inside the box rather than on it skips pixels sitting on the
    /// `min(1, .)` kink, whose one-sided slope points inward but reverses
    /// after any finite step. Returns how
    /// many woke up.
    fn recheck(&self, st: &mut State, active: &mut Vec<usize>) -> usize {
        let inside = |u: f64, f: f64| {
            if u >= LOGIT_BOUND {
                logistic(LOGIT_BOUND - 1.0)
            } else if u <= -LOGIT_BOUND {
                logistic(1.0 - LOGIT_BOUND)
            } else {
                f
            }
        };
        let mut woke = 0;
        for i in 0..self.data.n_pixels {
            if st.frozen[i] {
                let p = self.data.pixel(i);
                let (f0, fp) = (st.f0[i], st.fp[i]);
                let (g0, _, _) = pixel_grad(p, inside(st.u0[i], f0), fp, &st.s, &st.ds);
                let (_, gp, _) = pixel_grad(p, f0, inside(st.up[i], fp), &st.s, &st.ds);
                if !Self::is_settled(st, i, g0, gp - self.config.sparsity, true) {
                    st.frozen[i] = false;
                    woke += 1;
                }
            }
        }
        if woke > 0 {
            *active = (0..self.data.n_pixels).filter(|&i| !st.frozen[i]).collect();
            st.coupled = (0..self.data.n_pixels)
                .filter(|&i| st.frozen[i] && st.fp[i] > 0.0 && st.f0[i] < 1.0)
                .collect();
        }
        woke
    }
}
