//! Spectral indices and per-pixel class-probability maps.

use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::scene_store::{self, Band, Frame, Manifest, SceneSeries};

pub const DEFAULT_GAIN: f64 = 10.0;
pub const DEFAULT_CENTER: f64 = 0.0;
pub const DEFAULT_KERNEL: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A real-valued raster with a missing-data mask (NDVI, confidences).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height || mask.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} map with {} values and {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        Ok(ScalarMap {
            width,
            height,
            values,
            mask,
        })
    }

    /// Values of the unmasked pixels, in row-major order.
    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().zip(&self.mask).filter(|(_, &m)| !m).map(|(&v, _)| v)
    }
}

/// Per-pixel probability of belonging to a shed, for one date.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    mask: Vec<bool>,
    timestamp: NaiveDate,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>, mask: Vec<bool>, timestamp: NaiveDate) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height || mask.len() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} probability map with {} values and {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = values
            .iter()
            .zip(&mask)
            .position(|(&v, &m)| !m && !(0.0..=1.0).contains(&v))
        {
            return Err(Error::InvalidPixel {
                frame: 0,
                pixel: i,
                value: values[i] as f64,
            });
        }
        Ok(ProbMap {
            width,
            height,
            values,
            mask,
            timestamp,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn timestamp(&self) -> NaiveDate {
        self.timestamp
    }
}

/// Time-ordered probability maps for one location.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMapSeries {
    location_id: String,
    maps: Vec<ProbMap>,
    pixel_size_m: f64,
}

impl ProbMapSeries {
    pub fn new(location_id: impl Into<String>, maps: Vec<ProbMap>, pixel_size_m: f64) -> Result<Self> {
        if !(pixel_size_m.is_finite() && pixel_size_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel size must be positive, got {pixel_size_m}"
            )));
        }
        if maps.len() < 2 {
            return Err(Error::TooShort {
                len: maps.len(),
                min: 2,
            });
        }
        for i in 1..maps.len() {
            if maps[i].width != maps[0].width || maps[i].height != maps[0].height {
                return Err(Error::DimensionMismatch(format!(
                    "map {i} is {}x{}, map 0 is {}x{}",
                    maps[i].width, maps[i].height, maps[0].width, maps[0].height
                )));
            }
            if maps[i].timestamp <= maps[i - 1].timestamp {
                return Err(Error::NonMonotoneTimestamps(i));
            }
        }
        Ok(ProbMapSeries {
            location_id: location_id.into(),
            maps,
            pixel_size_m,
        })
    }

    pub fn location_id(&self) -> &str {
        &self.location_id
    }

    pub fn maps(&self) -> &[ProbMap] {
        &self.maps
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.pixel_size_m
    }

    pub fn width(&self) -> usize {
        self.maps[0].width
    }

    pub fn height(&self) -> usize {
        self.maps[0].height
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn timestamps(&self) -> Vec<NaiveDate> {
        self.maps.iter().map(|m| m.timestamp).collect()
    }

    /// Same series with the frame order reversed (timestamps mirrored so
    /// they still increase).
    pub fn reversed(&self) -> ProbMapSeries {
        let ts = self.timestamps();
        let maps = self
            .maps
            .iter()
            .rev()
            .zip(ts)
            .map(|(m, t)| ProbMap {
                timestamp: t,
                ..m.clone()
            })
            .collect();
        ProbMapSeries {
            location_id: self.location_id.clone(),
            maps,
            pixel_size_m: self.pixel_size_m,
        }
    }
}

/// Per-pixel `(NIR - RED) / (NIR + RED)`; masked where the input is masked
/// or the denominator is zero.
pub fn ndvi(frame: &Frame) -> Result<ScalarMap> {
    let red = frame.band(Band::Red).ok_or(Error::MissingBand("RED"))?;
    let nir = frame.band(Band::Nir).ok_or(Error::MissingBand("NIR"))?;
    let n = frame.len();
    let mut values = vec![0.0; n];
    let mut mask = vec![true; n];
    for i in 0..n {
        if frame.mask()[i] {
            continue;
        }
        let (r, nr) = (red[i] as f64, nir[i] as f64);
        let denom = nr + r;
        if denom != 0.0 {
            values[i] = (nr - r) / denom;
            mask[i] = false;
        }
    }
    ScalarMap::new(frame.width(), frame.height(), values, mask)
}

/// Mean NDVI over the defined pixels of a frame.
pub fn mean_ndvi(frame: &Frame) -> Result<f64> {
    let map = ndvi(frame)?;
    let (sum, count) = map.present().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        return Err(Error::AllMasked);
    }
    Ok(sum / count as f64)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps raw segmenter confidences to probabilities with the logistic function.
pub fn confidences_to_probs(conf: &ScalarMap, timestamp: NaiveDate) -> Result<ProbMap> {
    if let Some(i) = conf
        .values
        .iter()
        .zip(&conf.mask)
        .position(|(v, &m)| !m && !v.is_finite())
    {
        return Err(Error::InvalidPixel {
            frame: 0,
            pixel: i,
            value: conf.values[i],
        });
    }
    let values = conf
        .values
        .iter()
        .zip(&conf.mask)
        .map(|(&c, &m)| if m { 0.0 } else { logistic(c) as f32 })
        .collect();
    ProbMap::new(conf.width, conf.height, values, conf.mask.clone(), timestamp)
}

/// Stand-in segmenter: low-NDVI pixels (roofs) get high shed probability,
/// `p = 1 / (1 + exp(-gain * (center - ndvi)))`.
pub fn pseudo_segment(frame: &Frame, gain: f64, center: f64) -> Result<ProbMap> {
    if !(gain.is_finite() && gain > 0.0) || !center.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gain must be positive and center finite, got gain={gain} center={center}"
        )));
    }
    let index = ndvi(frame)?;
    let values = index
        .values
        .iter()
        .zip(&index.mask)
        .map(|(&v, &m)| if m { 0.0 } else { logistic(gain * (center - v)) as f32 })
        .collect();
    ProbMap::new(frame.width(), frame.height(), values, index.mask, frame.timestamp())
}

/// Box filter over the present pixels of each `k` x `k` window. Windows are
/// truncated at the borders; a pixel whose window holds no present pixel
/// stays masked.
pub fn smooth(pm: &ProbMap, k: usize) -> Result<ProbMap> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    let (w, h) = (pm.width, pm.height);
    let r = k / 2;
    let mut values = vec![0.0f32; w * h];
    let mut mask = vec![true; w * h];
    for y in 0..h {
        let (y_lo, y_hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let (x_lo, x_hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for yy in y_lo..=y_hi {
                let row = yy * w;
                for xx in x_lo..=x_hi {
                    if !pm.mask[row + xx] {
                        sum += pm.values[row + xx] as f64;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                values[y * w + x] = (sum / count as f64) as f32;
                mask[y * w + x] = false;
            }
        }
    }
    Ok(ProbMap {
        width: w,
        height: h,
        values,
        mask,
        timestamp: pm.timestamp,
    })
}

/// Number of present pixels with probability at or above `threshold`.
pub fn cafo_pixel_count(pm: &ProbMap, threshold: f64) -> usize {
    pm.values
        .iter()
        .zip(&pm.mask)
        .filter(|(&v, &m)| !m && v as f64 >= threshold)
        .count()
}

/// Applies `pseudo_segment` and `smooth` to every frame of a scene series.
pub fn segment_series(scene: &SceneSeries, gain: f64, center: f64, kernel: usize) -> Result<ProbMapSeries> {
    let maps = scene
        .frames()
        .iter()
        .map(|f| pseudo_segment(f, gain, center).and_then(|pm| smooth(&pm, kernel)))
        .collect::<Result<Vec<_>>>()?;
    ProbMapSeries::new(scene.location_id(), maps, scene.pixel_size_m())
}

pub fn read_prob_stack(path: impl AsRef<Path>) -> Result<ProbMapSeries> {
    let dir = path.as_ref();
    let (manifest, raw) = scene_store::read_stack(dir)?;
    if manifest.bands != [Band::Prob] {
        return Err(Error::Manifest {
            path: dir.join(scene_store::MANIFEST_FILE),
            reason: format!("expected bands [\"PROB\"], found {:?}", manifest.bands),
        });
    }
    let mut maps = Vec::with_capacity(raw.len());
    for (i, (frame, &ts)) in raw.into_iter().zip(&manifest.timestamps).enumerate() {
        let values = frame.bands.into_iter().next().unwrap_or_default();
        let map = ProbMap::new(manifest.width, manifest.height, values, frame.mask, ts).map_err(|e| match e {
            Error::InvalidPixel { pixel, value, .. } => Error::InvalidPixel { frame: i, pixel, value },
            other => other,
        })?;
        maps.push(map);
    }
    ProbMapSeries::new(manifest.location_id, maps, manifest.pixel_size_m)
}

pub fn write_prob_stack(series: &ProbMapSeries, path: impl AsRef<Path>) -> Result<()> {
    let manifest = Manifest {
        location_id: series.location_id.clone(),
        pixel_size_m: series.pixel_size_m,
        width: series.width(),
        height: series.height(),
        bands: vec![Band::Prob],
        timestamps: series.timestamps(),
        frame_files: scene_store::frame_file_names(series.len()),
    };
    let bands: Vec<Vec<Vec<f32>>> = series.maps.iter().map(|m| vec![m.values.clone()]).collect();
    scene_store::write_stack(
        path.as_ref(),
        &manifest,
        bands
            .iter()
            .zip(&series.maps)
            .map(|(b, m)| (b.as_slice(), m.mask.as_slice())),
    )
}

/// Reads a single-band `CONF` stack of raw segmenter confidences.
pub fn read_confidence_stack(path: impl AsRef<Path>) -> Result<(Manifest, Vec<ScalarMap>)> {
    let dir = path.as_ref();
    let (manifest, raw) = scene_store::read_stack(dir)?;
    if manifest.bands != [Band::Conf] {
        return Err(Error::Manifest {
            path: dir.join(scene_store::MANIFEST_FILE),
            reason: format!("expected bands [\"CONF\"], found {:?}", manifest.bands),
        });
    }
    let maps = raw
        .into_iter()
        .map(|f| {
            let values = f.bands[0].iter().map(|&v| v as f64).collect();
            ScalarMap::new(manifest.width, manifest.height, values, f.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, maps))
}
