//! On-disk raster stacks and the multi-band scene series they hold.
//!
//! A stack is a directory with a `manifest.json` and, per frame, a raw
//! little-endian `f32` payload (row-major, band-sequential) plus a mask file
//! of one byte per pixel (`0` present, `1` missing). Probability and
//! confidence stacks use the same layout with a single `PROB` / `CONF` band.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Default upper bound on the missing-pixel fraction kept by [`filter_frames`].
pub const DEFAULT_MAX_MISSING: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Band {
    Red,
    Green,
    Blue,
    Nir,
    /// Class probability in `[0, 1]`.
    Prob,
    /// Raw segmenter confidence (logit scale, may be negative).
    Conf,
}

impl Band {
    pub fn name(self) -> &'static str {
        match self {
            Band::Red => "RED",
            Band::Green => "GREEN",
            Band::Blue => "BLUE",
            Band::Nir => "NIR",
            Band::Prob => "PROB",
            Band::Conf => "CONF",
        }
    }

    fn accepts(self, v: f32) -> bool {
        match self {
            Band::Red | Band::Green | Band::Blue | Band::Nir => v.is_finite() && v >= 0.0,
            Band::Prob => v.is_finite() && (0.0..=1.0).contains(&v),
            Band::Conf => v.is_finite(),
        }
    }
}

/// One multi-band raster observed on a single date.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    bands: Vec<Band>,
    pixels: Vec<Vec<f32>>,
    mask: Vec<bool>,
    timestamp: NaiveDate,
}

impl Frame {
    /// Builds a frame from per-band row-major pixel buffers.
    ///
    /// Values under the mask are not checked; every present value must be
    /// valid for its band (finite and non-negative for reflectance).
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<Band>,
        pixels: Vec<Vec<f32>>,
        mask: Vec<bool>,
        timestamp: NaiveDate,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "frame must be non-empty, got {width}x{height}"
            )));
        }
        if bands.is_empty() || bands.len() != pixels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} band names for {} band buffers",
                bands.len(),
                pixels.len()
            )));
        }
        let n = width * height;
        if mask.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "mask holds {} values, expected {n}",
                mask.len()
            )));
        }
        for (band, values) in bands.iter().zip(&pixels) {
            if values.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "band {} holds {} values, expected {n}",
                    band.name(),
                    values.len()
                )));
            }
            for (i, (&v, &missing)) in values.iter().zip(&mask).enumerate() {
                if !missing && !band.accepts(v) {
                    return Err(Error::InvalidPixel {
                        frame: 0,
                        pixel: i,
                        value: v as f64,
                    });
                }
            }
        }
        Ok(Frame {
            width,
            height,
            bands,
            pixels,
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
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn band(&self, band: Band) -> Option<&[f32]> {
        self.bands
            .iter()
            .position(|&b| b == band)
            .map(|i| self.pixels[i].as_slice())
    }

    pub fn pixels(&self) -> &[Vec<f32>] {
        &self.pixels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn timestamp(&self) -> NaiveDate {
        self.timestamp
    }
}

/// Time-ordered frames for one location.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSeries {
    location_id: String,
    frames: Vec<Frame>,
    pixel_size_m: f64,
}

impl SceneSeries {
    pub fn new(location_id: impl Into<String>, frames: Vec<Frame>, pixel_size_m: f64) -> Result<Self> {
        if !(pixel_size_m.is_finite() && pixel_size_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel size must be positive, got {pixel_size_m}"
            )));
        }
        if frames.len() < 2 {
            return Err(Error::TooShort {
                len: frames.len(),
                min: 2,
            });
        }
        let first = &frames[0];
        for (i, f) in frames.iter().enumerate().skip(1) {
            if f.width != first.width || f.height != first.height || f.bands != first.bands {
                return Err(Error::DimensionMismatch(format!(
                    "frame {i} is {}x{} {:?}, frame 0 is {}x{} {:?}",
                    f.width, f.height, f.bands, first.width, first.height, first.bands
                )));
            }
            if f.timestamp <= frames[i - 1].timestamp {
                return Err(Error::NonMonotoneTimestamps(i));
            }
        }
        Ok(SceneSeries {
            location_id: location_id.into(),
            frames,
            pixel_size_m,
        })
    }

    pub fn location_id(&self) -> &str {
        &self.location_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.pixel_size_m
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<NaiveDate> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub location_id: String,
    pub pixel_size_m: f64,
    pub width: usize,
    pub height: usize,
    pub bands: Vec<Band>,
    pub timestamps: Vec<NaiveDate>,
    pub frame_files: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingManifest(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.timestamps.len() != manifest.frame_files.len() {
            return Err(Error::Manifest {
                path,
                reason: format!(
                    "{} timestamps for {} frame files",
                    manifest.timestamps.len(),
                    manifest.frame_files.len()
                ),
            });
        }
        if let Some(i) = (1..manifest.timestamps.len()).find(|&i| manifest.timestamps[i] <= manifest.timestamps[i - 1])
        {
            return Err(Error::NonMonotoneTimestamps(i));
        }
        Ok(manifest)
    }

    fn mask_file(&self, i: usize) -> PathBuf {
        Path::new(&self.frame_files[i]).with_extension("mask")
    }
}

/// Frame payload as stored on disk, before band-specific validation.
pub(crate) struct RawFrame {
    pub bands: Vec<Vec<f32>>,
    pub mask: Vec<bool>,
}

pub(crate) fn read_stack(dir: &Path) -> Result<(Manifest, Vec<RawFrame>)> {
    let manifest = Manifest::read(dir)?;
    let n = manifest.width * manifest.height;
    let nb = manifest.bands.len();
    let mut frames = Vec::with_capacity(manifest.frame_files.len());
    for (i, file) in manifest.frame_files.iter().enumerate() {
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != n * nb * 4 {
            return Err(Error::DimensionMismatch(format!(
                "{} holds {} bytes, manifest implies {}x{}x{} floats ({} bytes)",
                path.display(),
                bytes.len(),
                manifest.width,
                manifest.height,
                nb,
                n * nb * 4
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let bands = values.chunks_exact(n).map(<[f32]>::to_vec).collect();

        let mask_path = dir.join(manifest.mask_file(i));
        let mask_bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        if mask_bytes.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} holds {} bytes, expected {n}",
                mask_path.display(),
                mask_bytes.len()
            )));
        }
        let mut mask = Vec::with_capacity(n);
        for (pixel, &b) in mask_bytes.iter().enumerate() {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                other => {
                    return Err(Error::InvalidPixel {
                        frame: i,
                        pixel,
                        value: other as f64,
                    })
                }
            }
        }
        frames.push(RawFrame { bands, mask });
    }
    Ok((manifest, frames))
}

pub(crate) fn write_stack<'a>(
    dir: &Path,
    manifest: &Manifest,
    frames: impl IntoIterator<Item = (&'a [Vec<f32>], &'a [bool])>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (bands, mask)) in frames.into_iter().enumerate() {
        let mut bytes = Vec::with_capacity(bands.iter().map(Vec::len).sum::<usize>() * 4);
        for band in bands {
            for v in band {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(&manifest.frame_files[i]);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        let mask_bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
        let mask_path = dir.join(manifest.mask_file(i));
        fs::write(&mask_path, &mask_bytes).map_err(|e| Error::io(&mask_path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub(crate) fn frame_file_names(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("frame_{i:04}.f32")).collect()
}

/// Reads a scene stack directory.
pub fn read_scene_stack(path: impl AsRef<Path>) -> Result<SceneSeries> {
    let dir = path.as_ref();
    let (manifest, raw) = read_stack(dir)?;
    let mut frames = Vec::with_capacity(raw.len());
    for (i, (frame, &ts)) in raw.into_iter().zip(&manifest.timestamps).enumerate() {
        let frame = Frame::new(
            manifest.width,
            manifest.height,
            manifest.bands.clone(),
            frame.bands,
            frame.mask,
            ts,
        )
        .map_err(|e| match e {
            Error::InvalidPixel { pixel, value, .. } => Error::InvalidPixel { frame: i, pixel, value },
            other => other,
        })?;
        frames.push(frame);
    }
    SceneSeries::new(manifest.location_id, frames, manifest.pixel_size_m)
}

/// Writes a scene stack; [`read_scene_stack`] returns an identical series.
pub fn write_scene_stack(series: &SceneSeries, path: impl AsRef<Path>) -> Result<()> {
    let manifest = Manifest {
        location_id: series.location_id.clone(),
        pixel_size_m: series.pixel_size_m,
        width: series.width(),
        height: series.height(),
        bands: series.frames[0].bands.clone(),
        timestamps: series.timestamps(),
        frame_files: frame_file_names(series.len()),
    };
    write_stack(
        path.as_ref(),
        &manifest,
        series.frames.iter().map(|f| (f.pixels.as_slice(), f.mask.as_slice())),
    )
}

/// Crops the centered `out_width` x `out_height` window. When the margin is
/// odd the extra column/row is dropped from the right/bottom.
pub fn clip_center(frame: &Frame, out_width: usize, out_height: usize) -> Result<Frame> {
    if out_width == 0 || out_height == 0 || out_width > frame.width || out_height > frame.height {
        return Err(Error::InvalidArgument(format!(
            "cannot clip {}x{} frame to {out_width}x{out_height}",
            frame.width, frame.height
        )));
    }
    let x0 = (frame.width - out_width) / 2;
    let y0 = (frame.height - out_height) / 2;
    let crop = |src: &[f32]| -> Vec<f32> {
        (y0..y0 + out_height)
            .flat_map(|r| {
                src[r * frame.width + x0..r * frame.width + x0 + out_width]
                    .iter()
                    .copied()
            })
            .collect()
    };
    let pixels = frame.pixels.iter().map(|b| crop(b)).collect();
    let mask = (y0..y0 + out_height)
        .flat_map(|r| {
            frame.mask[r * frame.width + x0..r * frame.width + x0 + out_width]
                .iter()
                .copied()
        })
        .collect();
    Ok(Frame {
        width: out_width,
        height: out_height,
        bands: frame.bands.clone(),
        pixels,
        mask,
        timestamp: frame.timestamp,
    })
}

pub fn missing_fraction(frame: &Frame) -> f64 {
    let missing = frame.mask.iter().filter(|&&m| m).count();
    missing as f64 / frame.len() as f64
}

/// Keeps the frames whose missing fraction is at most `max_missing`.
pub fn filter_frames(series: &SceneSeries, max_missing: f64) -> Result<SceneSeries> {
    if !(0.0..=1.0).contains(&max_missing) {
        return Err(Error::InvalidArgument(format!(
            "max_missing must lie in [0, 1], got {max_missing}"
        )));
    }
    let kept: Vec<Frame> = series
        .frames
        .iter()
        .filter(|f| missing_fraction(f) <= max_missing)
        .cloned()
        .collect();
    SceneSeries::new(series.location_id.clone(), kept, series.pixel_size_m)
}
