//! JSON-lines report stream shared by the detector and the baselines, the
//! ranking CSV, and the join of reports with labels.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineResult;
use crate::detector::{rank_locations, DetectionReport};
use crate::error::{Error, Result};
use crate::evaluation::{Label, LabeledScore};

/// Method tag of detector records.
pub const MLE_METHOD: &str = "MLE";

/// Row-major run-length encoding `[value, run, value, run, ...]` with
/// values 0 or 1.
pub fn rle_encode(bits: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut iter = bits.iter().peekable();
    while let Some(&b) = iter.next() {
        let mut run = 1;
        while iter.next_if(|&&next| next == b).is_some() {
            run += 1;
        }
        out.push(b as usize);
        out.push(run);
    }
    out
}

pub fn rle_decode(runs: &[usize], len: usize) -> Result<Vec<bool>> {
    if !runs.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument("run-length data has odd length".into()));
    }
    let mut out = Vec::with_capacity(len);
    for pair in runs.chunks_exact(2) {
        let value = match pair[0] {
            0 => false,
            1 => true,
            v => return Err(Error::InvalidArgument(format!("run-length value {v} is not 0 or 1"))),
        };
        out.extend(std::iter::repeat_n(value, pair[1]));
    }
    if out.len() != len {
        return Err(Error::DimensionMismatch(format!(
            "run-length data covers {} pixels, expected {len}",
            out.len()
        )));
    }
    Ok(out)
}

/// Serialized form of a [`DetectionReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub location_id: String,
    pub test_statistic: f64,
    pub log_likelihood_unrestricted: f64,
    pub log_likelihood_static: f64,
    pub t_star_index: f64,
    pub t_star_date: NaiveDate,
    pub expansion_area_m2: f64,
    pub null_percentile: Option<f64>,
    pub width: usize,
    pub height: usize,
    pub footprint_before_rle: Vec<usize>,
    pub footprint_added_rle: Vec<usize>,
}

impl From<&DetectionReport> for DetectionRecord {
    fn from(r: &DetectionReport) -> Self {
        DetectionRecord {
            location_id: r.location_id.clone(),
            test_statistic: r.test_statistic,
            log_likelihood_unrestricted: r.log_likelihood_unrestricted,
            log_likelihood_static: r.log_likelihood_static,
            t_star_index: r.t_star_index,
            t_star_date: r.t_star_date,
            expansion_area_m2: r.expansion_area_m2,
            null_percentile: r.null_percentile,
            width: r.width,
            height: r.height,
            footprint_before_rle: rle_encode(&r.footprint_before),
            footprint_added_rle: rle_encode(&r.footprint_added),
        }
    }
}

impl DetectionRecord {
    pub fn to_report(&self) -> Result<DetectionReport> {
        let n = self.width * self.height;
        Ok(DetectionReport {
            location_id: self.location_id.clone(),
            test_statistic: self.test_statistic,
            log_likelihood_unrestricted: self.log_likelihood_unrestricted,
            log_likelihood_static: self.log_likelihood_static,
            t_star_index: self.t_star_index,
            t_star_date: self.t_star_date,
            expansion_area_m2: self.expansion_area_m2,
            width: self.width,
            height: self.height,
            footprint_before: rle_decode(&self.footprint_before_rle, n)?,
            footprint_added: rle_decode(&self.footprint_added_rle, n)?,
            null_percentile: self.null_percentile,
        })
    }
}

/// One line of the report stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Detection(DetectionRecord),
    Baseline(BaselineResult),
}

impl Record {
    pub fn method(&self) -> &'static str {
        match self {
            Record::Detection(_) => MLE_METHOD,
            Record::Baseline(b) => b.method.tag(),
        }
    }

    pub fn location_id(&self) -> &str {
        match self {
            Record::Detection(d) => &d.location_id,
            Record::Baseline(b) => &b.location_id,
        }
    }

    /// Confidence of expansion: the test statistic for the detector.
    pub fn confidence(&self) -> f64 {
        match self {
            Record::Detection(d) => d.test_statistic,
            Record::Baseline(b) => b.confidence,
        }
    }
}

fn write_lines(path: &Path, records: &[Record], append: bool) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Writes the records as JSON lines, replacing the file.
pub fn write_records(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    write_lines(path.as_ref(), records, false)
}

pub fn append_records(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    write_lines(path.as_ref(), records, true)
}

/// Reads a JSON-lines stream, skipping blank lines.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct RankingRow<'a> {
    rank: usize,
    location_id: &'a str,
    test_statistic: f64,
    expansion_area_m2: f64,
    null_percentile: Option<f64>,
}

/// Ranking CSV: reports by descending test statistic.
pub fn write_ranking_csv(path: impl AsRef<Path>, reports: &[DetectionReport]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    for (k, r) in rank_locations(reports).iter().enumerate() {
        writer.serialize(RankingRow {
            rank: k + 1,
            location_id: &r.location_id,
            test_statistic: r.test_statistic,
            expansion_area_m2: r.expansion_area_m2,
            null_percentile: r.null_percentile,
        })?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Joins records with labels, grouped by method. Sizes come from the
/// labels' true areas. A record without a label is an error; a repeated
/// (method, location) pair keeps the last record.
pub fn scores_by_method(records: &[Record], labels: &[Label]) -> Result<BTreeMap<String, Vec<LabeledScore>>> {
    let by_id: HashMap<&str, &Label> = labels.iter().map(|l| (l.location_id.as_str(), l)).collect();
    let mut latest: BTreeMap<(&str, &str), &Record> = BTreeMap::new();
    for r in records {
        latest.insert((r.method(), r.location_id()), r);
    }
    let mut out: BTreeMap<String, Vec<LabeledScore>> = BTreeMap::new();
    for ((method, id), r) in latest {
        let label = by_id
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no label for location {id}")))?;
        out.entry(method.to_string()).or_default().push(LabeledScore::new(
            id,
            r.confidence(),
            label.expanded,
            label.true_area_m2,
        ));
    }
    Ok(out)
}
