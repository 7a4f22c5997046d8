//! Attention maps: fixation heatmap rendering, distribution views, the
//! 224/112/56 pyramid, centre of mass, and the ATNM binary format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixation::FixationSequence;

/// Additive smoothing used by the sum-normalized distribution view.
pub const SUM_NORMALIZE_EPS: f64 = 1e-8;

/// Gaussian kernels are truncated at this many standard deviations.
pub const KERNEL_RADIUS_SIGMAS: f64 = 4.0;

/// Smoothing width at 224×224.
pub const DEFAULT_SIGMA_224: f64 = 25.0;

pub const PYRAMID_SIZES: [usize; 3] = [224, 112, 56];

const ATNM_MAGIC: &[u8; 4] = b"ATNM";

/// Row-major grid of non-negative finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty map {height}x{width}")));
        }
        if height * width != values.len() {
            return Err(Error::Shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Precondition(format!(
                "attention values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(value.is_finite() && value >= 0.0);
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!(value.is_finite() && value >= 0.0);
        self.values[row * self.width + col] = value;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Row and column of the largest value (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        AttentionMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &AttentionMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// A probability vector over the flattened pixels of a map.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionView {
    probs: Vec<f64>,
}

impl DistributionView {
    /// Wrap an explicit probability vector; it must be non-negative and sum to 1.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Precondition("empty distribution".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Precondition(
                "distribution entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionMode {
    Softmax,
    SumNormalize,
}

/// Numerically stable softmax over a flat slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn to_distribution(map: &AttentionMap, mode: DistributionMode) -> DistributionView {
    let probs = match mode {
        DistributionMode::Softmax => softmax(map.values()),
        DistributionMode::SumNormalize => {
            let total: f64 = map.values().iter().map(|v| v + SUM_NORMALIZE_EPS).sum();
            map.values()
                .iter()
                .map(|v| (v + SUM_NORMALIZE_EPS) / total)
                .collect()
        }
    };
    DistributionView { probs }
}

/// How each fixation contributes to the rendered heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixationWeighting {
    #[default]
    Duration,
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeatmapOptions {
    pub weighting: FixationWeighting,
    /// Multiply each bump by the fixation's relative pupil area.
    pub pupil_weight: bool,
}

/// Smoothing width scaled from the 224-pixel default.
pub fn default_sigma(height: usize, width: usize) -> f64 {
    DEFAULT_SIGMA_224 * (height + width) as f64 / (2.0 * 224.0)
}

pub fn render_heatmap(
    seq: &FixationSequence,
    height: usize,
    width: usize,
    sigma_px: f64,
) -> Result<AttentionMap> {
    render_heatmap_with(seq, height, width, sigma_px, &HeatmapOptions::default())
}

/// Sum of truncated isotropic Gaussian bumps, one per valid fixation,
/// centred at `(y·(H−1), x·(W−1))` with peak equal to the fixation weight.
pub fn render_heatmap_with(
    seq: &FixationSequence,
    height: usize,
    width: usize,
    sigma_px: f64,
    opts: &HeatmapOptions,
) -> Result<AttentionMap> {
    if height < 8 || width < 8 {
        return Err(Error::Precondition(format!(
            "heatmap must be at least 8x8, got {height}x{width}"
        )));
    }
    if !(sigma_px > 0.0 && sigma_px.is_finite()) {
        return Err(Error::Precondition(format!(
            "sigma must be positive, got {sigma_px}"
        )));
    }
    let mut values = vec![0.0; height * width];
    let radius = KERNEL_RADIUS_SIGMAS * sigma_px;
    let inv_two_var = 1.0 / (2.0 * sigma_px * sigma_px);

    for fix in seq.valid_records() {
        let mut amp = match opts.weighting {
            FixationWeighting::Duration => fix.duration,
            FixationWeighting::Count => 1.0,
        };
        if opts.pupil_weight && fix.pupil.is_finite() {
            amp *= fix.pupil.max(0.0);
        }
        if amp.is_nan() || amp <= 0.0 {
            continue;
        }
        let cx = fix.x * (width - 1) as f64;
        let cy = fix.y * (height - 1) as f64;
        let r0 = (cy - radius).floor().max(0.0) as usize;
        let r1 = ((cy + radius).ceil() as usize).min(height - 1);
        let c0 = (cx - radius).floor().max(0.0) as usize;
        let c1 = ((cx + radius).ceil() as usize).min(width - 1);
        for r in r0..=r1 {
            let dy = r as f64 - cy;
            for c in c0..=c1 {
                let dx = c as f64 - cx;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    values[r * width + c] += amp * (-d2 * inv_two_var).exp();
                }
            }
        }
    }
    AttentionMap::new(height, width, values)
}

/// 2×2 mean pooling. Both dimensions must be even.
pub fn avg_pool2(map: &AttentionMap) -> Result<AttentionMap> {
    let (h, w) = map.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let s = map.get(2 * r, 2 * c)
                + map.get(2 * r, 2 * c + 1)
                + map.get(2 * r + 1, 2 * c)
                + map.get(2 * r + 1, 2 * c + 1);
            out.push(s / 4.0);
        }
    }
    AttentionMap::new(oh, ow, out)
}

/// The 224², 112² and 56² levels of a 224×224 map.
pub fn multiscale(map: &AttentionMap) -> Result<[AttentionMap; 3]> {
    if map.shape() != (224, 224) {
        return Err(Error::Shape(format!(
            "multiscale needs a 224x224 map, got {}x{}",
            map.height(),
            map.width()
        )));
    }
    let l1 = avg_pool2(map)?;
    let l2 = avg_pool2(&l1)?;
    Ok([map.clone(), l1, l2])
}

/// Intensity-weighted centroid `(row, col)` of a flat grid. An all-zero
/// grid maps to the geometric centre.
pub fn center_of_mass_raw(values: &[f64], height: usize, width: usize) -> (f64, f64) {
    let mut total = 0.0;
    let mut sr = 0.0;
    let mut sc = 0.0;
    for r in 0..height {
        for c in 0..width {
            let v = values[r * width + c];
            total += v;
            sr += v * r as f64;
            sc += v * c as f64;
        }
    }
    if total <= 0.0 {
        return ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    }
    (sr / total, sc / total)
}

pub fn center_of_mass(map: &AttentionMap) -> (f64, f64) {
    center_of_mass_raw(map.values(), map.height(), map.width())
}

/// Write `ATNM`, u32 LE height, u32 LE width, then f32 LE values row-major.
pub fn write_atnm<W: Write>(map: &AttentionMap, mut w: W) -> Result<()> {
    let h = u32::try_from(map.height()).map_err(|_| Error::Shape("height exceeds u32".into()))?;
    let wd = u32::try_from(map.width()).map_err(|_| Error::Shape("width exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(12 + 4 * map.len());
    buf.extend_from_slice(ATNM_MAGIC);
    buf.extend_from_slice(&h.to_le_bytes());
    buf.extend_from_slice(&wd.to_le_bytes());
    for v in map.values() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_atnm<R: Read>(mut r: R) -> Result<AttentionMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_atnm(&bytes)
}

pub fn decode_atnm(bytes: &[u8]) -> Result<AttentionMap> {
    if bytes.len() < 12 || &bytes[..4] != ATNM_MAGIC {
        return Err(Error::Parse("not an ATNM attention map".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Parse("ATNM dimensions overflow".into()))?;
    let body = &bytes[12..];
    if body.len() != expected {
        return Err(Error::Parse(format!(
            "ATNM payload is {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    AttentionMap::new(h, w, values).map_err(|e| Error::Parse(format!("ATNM payload: {e}")))
}

/// 16-bit binary PGM (P5, big-endian samples), min-max scaled to [0, 65535].
pub fn write_pgm16<W: Write>(map: &AttentionMap, mut w: W) -> Result<()> {
    let lo = map.values().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut buf = format!("P5\n{} {}\n65535\n", map.width(), map.height()).into_bytes();
    for v in map.values() {
        let s = if span > 0.0 { (v - lo) / span } else { 0.0 };
        buf.extend_from_slice(&((s * 65535.0).round() as u16).to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}
