//! Synthetic scene stacks and probability-map series with known ground truth.
//!
//! Sheds are axis-aligned rectangles of low NDVI on a vegetated background
//! whose NDVI follows the seasons. An optional added shed fades in linearly
//! over `transition_frames` frames and is half built at `true_t_star`; once
//! built it is never removed.
//!
//! Probability maps are produced in one of two ways:
//!
//! * [`NoiseMode::Probability`] (default): the clean shed indicator plus
//!   truncated Gaussian noise (cut at three standard deviations), clamped to
//!   `[0, 1]`. A fraction of frames is degraded (haze, snow, low sun) and
//!   uses a larger noise scale.
//! * [`NoiseMode::Reflectance`]: the scene itself is segmented with
//!   [`pseudo_segment`](crate::spectral::pseudo_segment) and smoothed.
//!
//! Everything is a deterministic function of `SyntheticSpec::seed`. Benchmark
//! locations derive their seeds from the master seed with [`derive_seed`].

use std::fs;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Label;
use crate::scene_store::{self, Band, Frame, SceneSeries};
use crate::spectral::{self, ProbMap, ProbMapSeries};

/// Reflectances (RED, GREEN, BLUE, NIR) of a shed roof; NDVI = -0.2.
const SHED_REFLECTANCE: [f64; 4] = [0.30, 0.30, 0.30, 0.20];
const VEGETATION_RED: f64 = 0.06;
const VEGETATION_GREEN: f64 = 0.09;
const VEGETATION_BLUE: f64 = 0.05;
/// Summer-peak vegetation NDVI.
const PEAK_NDVI: f64 = 0.6;
/// Day of year at which vegetation NDVI peaks.
const PEAK_DAY: f64 = 196.0;
/// Additive path radiance of a degraded (hazy) frame.
const HAZE_RADIANCE: f64 = 0.08;
/// Images per year; fixes the calendar span for long series.
const IMAGES_PER_YEAR: f64 = 130.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x && col < self.x + self.width && row >= self.y && row < self.y + self.height
    }

    /// True when the rectangles overlap or sit closer than `gap` pixels.
    fn near(&self, other: &Rect, gap: usize) -> bool {
        self.x < other.x + other.width + gap
            && other.x < self.x + self.width + gap
            && self.y < other.y + other.height + gap
            && other.y < self.y + self.height + gap
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Probability,
    Reflectance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub location_id: String,
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub pixel_size_m: f64,
    pub start_date: NaiveDate,
    pub base_sheds: Vec<Rect>,
    pub added_shed: Option<Rect>,
    /// Frame (1-based) at which the added shed is half built.
    pub true_t_star: usize,
    pub transition_frames: usize,
    /// Standard deviation of the per-pixel probability noise.
    pub noise: f64,
    /// Winter drop of the vegetation NDVI below its summer peak.
    pub seasonal_amplitude: f64,
    pub missing_rate: f64,
    /// Probability that a frame is degraded.
    pub degraded_frame_rate: f64,
    /// Probability noise scale used in degraded frames.
    pub degraded_noise: f64,
    /// Relative per-pixel reflectance noise.
    pub reflectance_noise: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            location_id: "synthetic".into(),
            width: 200,
            height: 200,
            n_frames: 100,
            pixel_size_m: 3.0,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
            base_sheds: vec![Rect::new(70, 90, 60, 20)],
            added_shed: None,
            true_t_star: 50,
            transition_frames: 3,
            noise: 0.15,
            seasonal_amplitude: 0.3,
            missing_rate: 0.02,
            degraded_frame_rate: 0.1,
            degraded_noise: 0.3,
            reflectance_noise: 0.03,
            noise_mode: NoiseMode::Probability,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty raster {}x{}", self.width, self.height));
        }
        if self.n_frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.n_frames));
        }
        if !(self.pixel_size_m.is_finite() && self.pixel_size_m > 0.0) {
            return bad(format!("pixel size must be positive, got {}", self.pixel_size_m));
        }
        for r in self.base_sheds.iter().chain(self.added_shed.iter()) {
            if r.width == 0 || r.height == 0 || r.x + r.width > self.width || r.y + r.height > self.height {
                return bad(format!("shed {r:?} does not fit in {}x{}", self.width, self.height));
            }
        }
        if self.added_shed.is_some() && !(1 < self.true_t_star && self.true_t_star < self.n_frames) {
            return bad(format!(
                "true_t_star must lie strictly between 1 and {}, got {}",
                self.n_frames, self.true_t_star
            ));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise must lie in [0, 0.5), got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.degraded_noise) {
            return bad(format!(
                "degraded_noise must lie in [0, 1], got {}",
                self.degraded_noise
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate));
        }
        if !(0.0..=1.0).contains(&self.degraded_frame_rate) {
            return bad(format!(
                "degraded_frame_rate must lie in [0, 1], got {}",
                self.degraded_frame_rate
            ));
        }
        if !(0.0..=PEAK_NDVI + 0.5).contains(&self.seasonal_amplitude) {
            return bad(format!("seasonal_amplitude out of range: {}", self.seasonal_amplitude));
        }
        if !(self.reflectance_noise >= 0.0 && self.reflectance_noise < 1.0) {
            return bad(format!(
                "reflectance_noise must lie in [0, 1), got {}",
                self.reflectance_noise
            ));
        }
        Ok(())
    }

    /// Pixels of the added shed that were not already covered.
    pub fn added_pixels(&self) -> usize {
        let Some(added) = self.added_shed else { return 0 };
        (added.y..added.y + added.height)
            .flat_map(|r| (added.x..added.x + added.width).map(move |c| (c, r)))
            .filter(|&(c, r)| !self.base_sheds.iter().any(|b| b.contains(c, r)))
            .count()
    }

    /// Fraction of the added shed built by (1-based) frame `t`.
    pub fn construction_level(&self, t: usize) -> f64 {
        if self.added_shed.is_none() {
            return 0.0;
        }
        let progress = 0.5 + (t as f64 - self.true_t_star as f64) / (self.transition_frames as f64 + 1.0);
        progress.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub expanded: bool,
    pub true_t_star: Option<usize>,
    pub true_added_pixels: usize,
    pub true_added_area_m2: f64,
}

/// Output of [`generate_location`].
#[derive(Clone, Debug)]
pub struct SyntheticLocation {
    pub scene: SceneSeries,
    pub probs: ProbMapSeries,
    pub truth: GroundTruth,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-location seed: the master seed XOR the hashed location index, hashed
/// again. Independent of generation order, so parallel and serial runs agree.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix(master ^ mix(index))
}

fn sample_dates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<NaiveDate>> {
    let span = ((spec.n_frames as f64 / IMAGES_PER_YEAR * 365.0).ceil() as usize)
        .max(365)
        .max(spec.n_frames);
    let start_doy = spec.start_date.ordinal0() as f64;
    // Fewer clear images in winter.
    let weight = |d: usize| {
        let doy = (start_doy + d as f64) % 365.25;
        0.4 + 0.6 * (0.5 - 0.5 * (2.0 * std::f64::consts::PI * doy / 365.25).cos())
    };
    let mut days: Vec<usize> = rand::seq::index::sample_weighted(rng, span, weight, spec.n_frames)
        .map_err(|e| Error::InvalidArgument(format!("cannot sample dates: {e}")))?
        .into_iter()
        .collect();
    days.sort_unstable();
    Ok(days
        .into_iter()
        .map(|d| spec.start_date + Days::new(d as u64))
        .collect())
}

fn vegetation_ndvi(spec: &SyntheticSpec, date: NaiveDate) -> f64 {
    let doy = date.ordinal0() as f64;
    let phase = 2.0 * std::f64::consts::PI * (doy - PEAK_DAY) / 365.25;
    PEAK_NDVI - spec.seasonal_amplitude * (1.0 - phase.cos()) / 2.0
}

/// Draws from N(0, sigma) truncated to +-3 sigma.
fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 3.0 {
            return z * sigma;
        }
    }
}

/// Generates one location. Deterministic in `spec` (including its seed).
pub fn generate_location(spec: &SyntheticSpec) -> Result<SyntheticLocation> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dates = sample_dates(spec, &mut rng)?;

    let mut base = vec![false; n];
    let mut added = vec![false; n];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            base[i] = spec.base_sheds.iter().any(|b| b.contains(c, r));
            added[i] = !base[i] && spec.added_shed.is_some_and(|a| a.contains(c, r));
        }
    }

    let bands = vec![Band::Red, Band::Green, Band::Blue, Band::Nir];
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut maps = Vec::with_capacity(spec.n_frames);
    for (k, &date) in dates.iter().enumerate() {
        let t = k + 1;
        let level = spec.construction_level(t);
        let degraded = rng.gen::<f64>() < spec.degraded_frame_rate;
        let haze = if degraded {
            HAZE_RADIANCE
        } else {
            rng.gen_range(0.0..0.01)
        };
        let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < spec.missing_rate).collect();

        let veg_ndvi = vegetation_ndvi(spec, date);
        let veg = [
            VEGETATION_RED,
            VEGETATION_GREEN,
            VEGETATION_BLUE,
            VEGETATION_RED * (1.0 + veg_ndvi) / (1.0 - veg_ndvi),
        ];
        let mut pixels = vec![vec![0.0f32; n]; 4];
        for i in 0..n {
            let cover = if base[i] {
                1.0
            } else if added[i] {
                level
            } else {
                0.0
            };
            for (b, band) in pixels.iter_mut().enumerate() {
                let clean = veg[b] + cover * (SHED_REFLECTANCE[b] - veg[b]) + haze;
                let z: f64 = StandardNormal.sample(&mut rng);
                band[i] = (clean * (1.0 + spec.reflectance_noise * z)).max(0.0) as f32;
            }
        }
        let frame = Frame::new(w, h, bands.clone(), pixels, mask.clone(), date)?;

        let map = match spec.noise_mode {
            NoiseMode::Probability => {
                let sigma = if degraded { spec.degraded_noise } else { spec.noise };
                let values = (0..n)
                    .map(|i| {
                        let clean = if base[i] {
                            1.0
                        } else if added[i] {
                            level
                        } else {
                            0.0
                        };
                        (clean + truncated_normal(&mut rng, sigma)).clamp(0.0, 1.0) as f32
                    })
                    .collect();
                ProbMap::new(w, h, values, mask, date)?
            }
            NoiseMode::Reflectance => spectral::smooth(
                &spectral::pseudo_segment(&frame, spectral::DEFAULT_GAIN, spectral::DEFAULT_CENTER)?,
                spectral::DEFAULT_KERNEL,
            )?,
        };
        frames.push(frame);
        maps.push(map);
    }

    let scene = SceneSeries::new(spec.location_id.clone(), frames, spec.pixel_size_m)?;
    let probs = ProbMapSeries::new(spec.location_id.clone(), maps, spec.pixel_size_m)?;
    let added_pixels = spec.added_pixels();
    let truth = GroundTruth {
        expanded: spec.added_shed.is_some(),
        true_t_star: spec.added_shed.map(|_| spec.true_t_star),
        true_added_pixels: added_pixels,
        true_added_area_m2: added_pixels as f64 * spec.pixel_size_m * spec.pixel_size_m,
    };
    Ok(SyntheticLocation { scene, probs, truth })
}

/// One entry of a benchmark: the fully resolved per-location spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkLocation {
    pub location_id: String,
    pub expanded: bool,
    pub spec: SyntheticSpec,
}

/// Contents of `benchmark.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub n_static: usize,
    pub n_expanded: usize,
    pub template: SyntheticSpec,
    pub locations: Vec<BenchmarkLocation>,
}

pub const DEFAULT_N_STATIC: usize = 200;
pub const DEFAULT_N_EXPANDED: usize = 50;

fn random_rect(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, short: (usize, usize), long: (usize, usize)) -> Rect {
    let a = rng.gen_range(short.0..=short.1).min(spec.width).min(spec.height);
    let b = rng.gen_range(long.0..=long.1).min(spec.width).min(spec.height);
    let (rw, rh) = if rng.gen::<bool>() { (a, b) } else { (b, a) };
    let x = rng.gen_range(0..=spec.width - rw);
    let y = rng.gen_range(0..=spec.height - rh);
    Rect::new(x, y, rw, rh)
}

fn place(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    taken: &[Rect],
    short: (usize, usize),
    long: (usize, usize),
) -> Option<Rect> {
    (0..200)
        .map(|_| random_rect(rng, spec, short, long))
        .find(|r| taken.iter().all(|t| !r.near(t, 2)))
}

/// Resolves the per-location specs of a benchmark without generating data.
///
/// Every location gets 1-3 base sheds. Expanded locations also get an added
/// shed whose sides are drawn uniformly from 5-20 by 10-40 pixels, placed
/// apart from the existing sheds, with `t*` uniform in `[0.2 T, 0.8 T]`.
/// Which locations expand is a seeded shuffle, so ids carry no label.
pub fn benchmark_specs(
    n_static: usize,
    n_expanded: usize,
    template: &SyntheticSpec,
    seed: u64,
) -> Result<Vec<BenchmarkLocation>> {
    let total = n_static + n_expanded;
    if total == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one location".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<bool> = (0..total).map(|i| i < n_expanded).collect();
    labels.shuffle(&mut master);

    let t = template.n_frames;
    let mut out = Vec::with_capacity(total);
    for (idx, &expanded) in labels.iter().enumerate() {
        let loc_seed = derive_seed(seed, idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(loc_seed);
        let mut spec = template.clone();
        spec.location_id = format!("loc_{idx:04}");
        spec.seed = loc_seed;
        spec.base_sheds.clear();
        let n_base = rng.gen_range(1..=3);
        for _ in 0..n_base {
            if let Some(r) = place(&mut rng, &spec, &spec.base_sheds.clone(), (10, 25), (30, 70)) {
                spec.base_sheds.push(r);
            }
        }
        spec.added_shed = None;
        if expanded {
            let lo = ((0.2 * t as f64).ceil() as usize).max(2);
            let hi = ((0.8 * t as f64).floor() as usize).min(t - 1).max(lo);
            spec.true_t_star = rng.gen_range(lo..=hi);
            let taken = spec.base_sheds.clone();
            spec.added_shed = place(&mut rng, &spec, &taken, (5, 20), (10, 40));
            if spec.added_shed.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "no room for an added shed in a {}x{} scene",
                    spec.width, spec.height
                )));
            }
        }
        spec.validate()?;
        out.push(BenchmarkLocation {
            location_id: spec.location_id.clone(),
            expanded,
            spec,
        });
    }
    Ok(out)
}

/// Writes a benchmark under `out`: `<id>/scene/` and `<id>/prob/` stacks
/// per location (scenes only when `write_scenes`), `labels.csv` and
/// `benchmark.json`.
pub fn generate_benchmark(
    n_static: usize,
    n_expanded: usize,
    template: &SyntheticSpec,
    seed: u64,
    out: &Path,
    write_scenes: bool,
) -> Result<BenchmarkManifest> {
    let locations = benchmark_specs(n_static, n_expanded, template, seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let labels_path = out.join("labels.csv");
    let mut labels = csv::Writer::from_path(&labels_path)?;
    for loc in &locations {
        let generated = generate_location(&loc.spec)?;
        let dir = out.join(&loc.location_id);
        if write_scenes {
            scene_store::write_scene_stack(&generated.scene, dir.join("scene"))?;
        }
        spectral::write_prob_stack(&generated.probs, dir.join("prob"))?;
        labels.serialize(Label {
            location_id: loc.location_id.clone(),
            expanded: generated.truth.expanded,
            true_t_star: generated.truth.true_t_star,
            true_area_m2: Some(generated.truth.true_added_area_m2),
        })?;
    }
    labels.flush().map_err(|e| Error::io(&labels_path, e))?;
    let manifest = BenchmarkManifest {
        seed,
        n_static,
        n_expanded,
        template: template.clone(),
        locations,
    };
    let path = out.join("benchmark.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
