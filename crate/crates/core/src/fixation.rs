//! Fixation ingest: parse the two source eye-tracking schemas and harmonize
//! them into fixation sequences living in the unit square.
//!
//! EyeGaze rows arrive with screen-normalized coordinates, a fixation
//! duration and left/right pupil diameters. REFLACX rows arrive in image
//! pixels with start/end timestamps and a precomputed relative pupil area,
//! and need the displayed-image viewport to be normalized.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How far past either end of the unit interval a coordinate may fall
/// before the fixation is considered invalid rather than clipped.
pub const CLIP_TOLERANCE: f64 = 0.05;

/// Length of the pupil baseline window, in seconds from the first valid sample.
pub const PUPIL_BASELINE_WINDOW_S: f64 = 2.0;

const TOLERANCE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    EyeGaze,
    Reflacx,
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "eyegaze" => Ok(Source::EyeGaze),
            "reflacx" => Ok(Source::Reflacx),
            _ => Err(Error::Parse(format!("unknown fixation source {s:?}"))),
        }
    }
}

/// One fixation as it appears in a source table, before harmonization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFixationRow {
    pub source: Source,
    pub subject_id: String,
    pub study_id: String,
    pub x_raw: f64,
    pub y_raw: f64,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
    pub duration: Option<f64>,
    pub pupil_left_diam: Option<f64>,
    pub pupil_right_diam: Option<f64>,
    pub pupil_area_norm: Option<f64>,
}

impl RawFixationRow {
    pub fn eyegaze(x: f64, y: f64, duration: f64) -> Self {
        Self {
            source: Source::EyeGaze,
            subject_id: String::new(),
            study_id: String::new(),
            x_raw: x,
            y_raw: y,
            t_start: None,
            t_end: None,
            duration: Some(duration),
            pupil_left_diam: None,
            pupil_right_diam: None,
            pupil_area_norm: None,
        }
    }

    pub fn reflacx(x: f64, y: f64, t_start: f64, t_end: f64) -> Self {
        Self {
            source: Source::Reflacx,
            subject_id: String::new(),
            study_id: String::new(),
            x_raw: x,
            y_raw: y,
            t_start: Some(t_start),
            t_end: Some(t_end),
            duration: None,
            pupil_left_diam: None,
            pupil_right_diam: None,
            pupil_area_norm: None,
        }
    }
}

/// Axis-aligned rectangle `[xmin, ymin, xmax, ymax]`.
pub type Bounds = [f64; 4];

/// Where the image was drawn in the viewer, in source units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageViewport {
    pub image_bounds: Bounds,
    pub screen_bounds: Bounds,
}

impl ImageViewport {
    pub fn new(image_bounds: Bounds, screen_bounds: Bounds) -> Result<Self> {
        let vp = Self {
            image_bounds,
            screen_bounds,
        };
        vp.validate()?;
        Ok(vp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("image", &self.image_bounds),
            ("screen", &self.screen_bounds),
        ] {
            if !(b[0] < b[2] && b[1] < b[3]) || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!(
                    "degenerate {name} bounds {b:?}: need xmin < xmax and ymin < ymax"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let vp: ImageViewport =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("viewport: {e}")))?;
        vp.validate()?;
        Ok(vp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub x: f64,
    pub y: f64,
    pub duration: f64,
    pub pupil: f64,
    pub t_start: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixationSequence {
    pub records: Vec<FixationRecord>,
    pub n_fix: usize,
    pub q_score: f64,
    pub subject_id: String,
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FixationSequence {
    /// Build a sequence from already-harmonized records, deriving the
    /// fixation count and quality score from the validity flags.
    pub fn from_records(records: Vec<FixationRecord>) -> Self {
        let n_fix = records.iter().filter(|r| r.valid).count();
        let q_score = n_fix as f64 / records.len().max(1) as f64;
        Self {
            records,
            n_fix,
            q_score,
            ..Default::default()
        }
    }

    pub fn valid_records(&self) -> impl Iterator<Item = &FixationRecord> {
        self.records.iter().filter(|r| r.valid)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Clip a normalized coordinate to [0, 1]. The flag is false when the
/// excursion exceeds the calibration tolerance.
fn clip_unit(v: f64) -> (f64, bool) {
    if !v.is_finite() {
        return (v.clamp(0.0, 1.0), false);
    }
    let slack = CLIP_TOLERANCE + TOLERANCE_SLACK;
    let ok = (-slack..=1.0 + slack).contains(&v);
    (v.clamp(0.0, 1.0), ok)
}

/// Map a REFLACX pixel-space fixation into the unit square using the
/// displayed-image bounds. Pupil is left at the precomputed relative area
/// (1.0 when absent).
pub fn normalize_reflacx(row: &RawFixationRow, vp: &ImageViewport) -> Result<FixationRecord> {
    if row.source != Source::Reflacx {
        return Err(Error::Precondition(
            "normalize_reflacx called on a non-REFLACX row".into(),
        ));
    }
    let [xmin, ymin, xmax, ymax] = vp.image_bounds;
    if !(xmax > xmin && ymax > ymin) {
        return Err(Error::Precondition(format!(
            "degenerate viewport image bounds {:?}",
            vp.image_bounds
        )));
    }
    let (t_start, t_end) = match (row.t_start, row.t_end) {
        (Some(s), Some(e)) => (s, e),
        _ => {
            return Err(Error::Schema(
                "REFLACX row needs both t_start and t_end".into(),
            ))
        }
    };
    let (x, x_ok) = clip_unit((row.x_raw - xmin) / (xmax - xmin));
    let (y, y_ok) = clip_unit((row.y_raw - ymin) / (ymax - ymin));
    let duration = t_end - t_start;
    Ok(FixationRecord {
        x,
        y,
        duration,
        pupil: row.pupil_area_norm.unwrap_or(1.0),
        t_start,
        valid: x_ok && y_ok && duration > 0.0,
    })
}

/// Pupil area from left and right diameters: `(π/2)·((l/2)² + (r/2)²)`.
pub fn pupil_area(lpd: f64, rpd: f64) -> Result<f64> {
    if !(lpd >= 0.0 && rpd >= 0.0) {
        return Err(Error::Precondition(format!(
            "pupil diameters must be non-negative, got ({lpd}, {rpd})"
        )));
    }
    Ok(PI / 2.0 * ((lpd / 2.0).powi(2) + (rpd / 2.0).powi(2)))
}

/// Divide every pupil area by the mean area over the first two seconds of
/// valid samples.
///
/// A sample is valid when its area is finite and positive; the window is
/// anchored at the first valid sample. Invalid samples come back as 1.0.
/// Fails when no valid sample exists, leaving the caller to fall back.
pub fn baseline_scale_pupil(samples: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let is_valid = |a: f64| a.is_finite() && a > 0.0;
    let t0 = samples
        .iter()
        .find(|(_, a)| is_valid(*a))
        .map(|(t, _)| *t)
        .ok_or_else(|| Error::Precondition("no valid pupil samples for baseline".into()))?;
    let (sum, n) = samples
        .iter()
        .filter(|(t, a)| is_valid(*a) && *t - t0 <= PUPIL_BASELINE_WINDOW_S)
        .fold((0.0, 0usize), |(s, n), (_, a)| (s + a, n + 1));
    let baseline = sum / n as f64;
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(Error::Precondition("pupil baseline is not positive".into()));
    }
    Ok(samples
        .iter()
        .map(|&(t, a)| (t, if a.is_finite() { a / baseline } else { 1.0 }))
        .collect())
}

fn harmonize_eyegaze(row: &RawFixationRow, onset: f64) -> Result<FixationRecord> {
    let duration = row
        .duration
        .ok_or_else(|| Error::Schema("EyeGaze row needs a duration".into()))?;
    let (x, x_ok) = clip_unit(row.x_raw);
    let (y, y_ok) = clip_unit(row.y_raw);
    Ok(FixationRecord {
        x,
        y,
        duration,
        pupil: f64::NAN,
        t_start: row.t_start.unwrap_or(onset),
        valid: x_ok && y_ok && duration > 0.0,
    })
}

/// Harmonize a study's raw rows into one fixation sequence.
///
/// EyeGaze pupil areas are computed from diameters and baseline-scaled over
/// the whole study; if no baseline exists every pupil value becomes 1.0 and
/// a warning is recorded. Missing EyeGaze start times are replaced by the
/// cumulative onset of the preceding fixations.
pub fn harmonize(rows: &[RawFixationRow], vp: Option<&ImageViewport>) -> Result<FixationSequence> {
    let mut records = Vec::with_capacity(rows.len());
    let mut gaze_pupil_idx = Vec::new();
    let mut gaze_pupil = Vec::new();
    let mut onset = 0.0;

    for (i, row) in rows.iter().enumerate() {
        let rec = match row.source {
            Source::Reflacx => {
                let vp = vp.ok_or_else(|| {
                    Error::at_row(
                        i,
                        Error::Precondition("REFLACX rows require an image viewport".into()),
                    )
                })?;
                normalize_reflacx(row, vp).map_err(|e| Error::at_row(i, e))?
            }
            Source::EyeGaze => {
                let rec = harmonize_eyegaze(row, onset).map_err(|e| Error::at_row(i, e))?;
                let area = match (row.pupil_left_diam, row.pupil_right_diam) {
                    (Some(l), Some(r)) => pupil_area(l, r).map_err(|e| Error::at_row(i, e))?,
                    _ => f64::NAN,
                };
                gaze_pupil_idx.push(i);
                gaze_pupil.push((rec.t_start, area));
                rec
            }
        };
        if rec.duration.is_finite() && rec.duration > 0.0 {
            onset = rec.t_start + rec.duration;
        }
        records.push(rec);
    }

    let mut warnings = Vec::new();
    if !gaze_pupil.is_empty() {
        match baseline_scale_pupil(&gaze_pupil) {
            Ok(scaled) => {
                for (&i, (_, rel)) in gaze_pupil_idx.iter().zip(scaled) {
                    records[i].pupil = rel;
                }
            }
            Err(e) => {
                warnings.push(format!("pupil unscalable ({e}); pupil set to 1.0"));
                for &i in &gaze_pupil_idx {
                    records[i].pupil = 1.0;
                }
            }
        }
    }

    let mut seq = FixationSequence::from_records(records);
    if let Some(first) = rows.first() {
        seq.subject_id = first.subject_id.clone();
        seq.study_id = first.study_id.clone();
    }
    seq.warnings = warnings;
    Ok(seq)
}

/// Columns of the raw fixation CSV, in canonical order.
pub const RAW_COLUMNS: [&str; 11] = [
    "source",
    "subject_id",
    "study_id",
    "x",
    "y",
    "t_start",
    "t_end",
    "duration",
    "lpd",
    "rpd",
    "pupil_area_norm",
];

/// Columns of the harmonized fixation CSV.
pub const HARMONIZED_COLUMNS: [&str; 6] = ["x", "y", "duration", "pupil", "t_start", "valid"];

fn column_index(headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Schema(format!("missing required column {name:?}")))
        })
        .collect()
}

fn parse_opt(field: &str, column: &str, row: usize) -> Result<Option<f64>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|_| {
        Error::at_row(
            row,
            Error::Parse(format!("{column}: not a number: {field:?}")),
        )
    })
}

fn parse_req(field: &str, column: &str, row: usize) -> Result<f64> {
    parse_opt(field, column, row)?
        .ok_or_else(|| Error::at_row(row, Error::Schema(format!("{column} is required"))))
}

/// Read raw fixation rows. Unknown columns are ignored; missing required
/// columns are a schema error.
pub fn read_raw_csv<R: Read>(reader: R) -> Result<Vec<RawFixationRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx = column_index(&headers, &RAW_COLUMNS)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let source: Source = get(0).parse().map_err(|e| Error::at_row(i, e))?;
        rows.push(RawFixationRow {
            source,
            subject_id: get(1).trim().to_string(),
            study_id: get(2).trim().to_string(),
            x_raw: parse_req(get(3), "x", i)?,
            y_raw: parse_req(get(4), "y", i)?,
            t_start: parse_opt(get(5), "t_start", i)?,
            t_end: parse_opt(get(6), "t_end", i)?,
            duration: parse_opt(get(7), "duration", i)?,
            pupil_left_diam: parse_opt(get(8), "lpd", i)?,
            pupil_right_diam: parse_opt(get(9), "rpd", i)?,
            pupil_area_norm: parse_opt(get(10), "pupil_area_norm", i)?,
        });
    }
    Ok(rows)
}

pub fn write_harmonized_csv<W: Write>(seq: &FixationSequence, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HARMONIZED_COLUMNS)?;
    for r in &seq.records {
        w.write_record([
            r.x.to_string(),
            r.y.to_string(),
            r.duration.to_string(),
            r.pupil.to_string(),
            r.t_start.to_string(),
            r.valid.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_harmonized_csv<R: Read>(reader: R) -> Result<FixationSequence> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx = column_index(&headers, &HARMONIZED_COLUMNS)?;
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let valid = match get(5).trim().to_ascii_lowercase().as_str() {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(Error::at_row(
                    i,
                    Error::Parse(format!("valid: expected a boolean, got {other:?}")),
                ))
            }
        };
        records.push(FixationRecord {
            x: parse_req(get(0), "x", i)?,
            y: parse_req(get(1), "y", i)?,
            duration: parse_req(get(2), "duration", i)?,
            pupil: parse_opt(get(3), "pupil", i)?.unwrap_or(1.0),
            t_start: parse_opt(get(4), "t_start", i)?.unwrap_or(0.0),
            valid,
        });
    }
    Ok(FixationSequence::from_records(records))
}

/// Read either CSV flavour: harmonized files pass through, raw files are
/// harmonized with the optional viewport.
pub fn read_fixations(text: &str, vp: Option<&ImageViewport>) -> Result<FixationSequence> {
    let first = text.lines().next().unwrap_or("");
    let has_source = first
        .split(',')
        .any(|h| h.trim().eq_ignore_ascii_case("source"));
    if has_source {
        harmonize(&read_raw_csv(text.as_bytes())?, vp)
    } else {
        read_harmonized_csv(text.as_bytes())
    }
}
