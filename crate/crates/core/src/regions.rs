//! The thoracic region atlas: bounds aggregation over annotation tables,
//! fuzzy keyword-to-region matching, mask rendering and the
//! condition-to-region matrix.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::saliency::AttentionMap;

pub const NUM_REGIONS: usize = 17;
pub const DEFAULT_TAU_BOX: f64 = 0.01;
pub const DEFAULT_AGGREGATION_EPS: f64 = 1e-8;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.85;
/// Score given to a keyword that contains an alias as whole words.
pub const CONTAINMENT_SIMILARITY: f64 = 0.9;
pub const SECONDARY_WEIGHT_FACTOR: f64 = 0.5;
pub const MASK_SIZE: usize = 512;

const BUILTIN_ATLAS: &str = include_str!("../assets/atlas_v1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDef {
    #[serde(rename = "id")]
    pub region_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub bounds: [f64; 4],
    pub aliases: Vec<String>,
    #[serde(rename = "significance", default)]
    pub clinical_significance: String,
    /// Set on regions whose name and extent are placeholders.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub provisional: bool,
}

impl RegionDef {
    pub fn display_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| self.region_id.replace('_', " "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRegions {
    pub primary: Vec<String>,
    pub secondary: Vec<String>,
    pub weight: f64,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAtlas {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    pub regions: Vec<RegionDef>,
    #[serde(rename = "conditions")]
    pub condition_matrix: BTreeMap<String, ConditionRegions>,
}

/// Validated normalized bounds `(x1, y1, x2, y2)`.
pub fn bounds_valid(b: &[f64; 4]) -> bool {
    let [x1, y1, x2, y2] = *b;
    (0.0..=1.0).contains(&x1)
        && (0.0..=1.0).contains(&y1)
        && x2 <= 1.0
        && y2 <= 1.0
        && x1 < x2
        && y1 < y2
}

impl RegionAtlas {
    /// The atlas shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_ATLAS).expect("bundled atlas is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let atlas: RegionAtlas =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("atlas: {e}")))?;
        atlas.validate()?;
        Ok(atlas)
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.len() != NUM_REGIONS {
            return Err(Error::Schema(format!(
                "atlas must have {NUM_REGIONS} regions, has {}",
                self.regions.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &self.regions {
            if !seen.insert(r.region_id.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate region id {:?}",
                    r.region_id
                )));
            }
            if !bounds_valid(&r.bounds) {
                return Err(Error::Schema(format!(
                    "region {:?} has invalid bounds {:?}",
                    r.region_id, r.bounds
                )));
            }
        }
        for (cond, entry) in &self.condition_matrix {
            if !(0.0..=1.0).contains(&entry.weight) {
                return Err(Error::Schema(format!(
                    "condition {cond:?} weight outside [0, 1]"
                )));
            }
            for id in entry.primary.iter().chain(&entry.secondary) {
                if !seen.contains(id.as_str()) {
                    return Err(Error::Schema(format!(
                        "condition {cond:?} references unknown region {id:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn index_of(&self, region_id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r.region_id == region_id)
    }

    pub fn region(&self, region_id: &str) -> Option<&RegionDef> {
        self.regions.iter().find(|r| r.region_id == region_id)
    }

    pub fn condition_entry(&self, condition: Condition) -> Option<&ConditionRegions> {
        self.condition_matrix.get(condition.name()).or_else(|| {
            self.condition_matrix
                .iter()
                .find(|(k, _)| k.parse::<Condition>().ok() == Some(condition))
                .map(|(_, v)| v)
        })
    }

    /// Canonical id for an annotation's region label (case, spaces and
    /// hyphens are normalized).
    pub fn resolve_region(&self, label: &str) -> Option<usize> {
        let key: String = label
            .trim()
            .to_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        self.index_of(&key)
    }
}

/// One row of an annotation table, in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub patient: String,
    pub region: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub width: Option<f64>,
    pub height: Option<f64>,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    pub tau_box: f64,
    pub eps: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            tau_box: DEFAULT_TAU_BOX,
            eps: DEFAULT_AGGREGATION_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationBranch {
    Median,
    WeightedAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRegion {
    pub region_id: String,
    pub bounds: [f64; 4],
    pub branch: AggregationBranch,
    pub n_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    /// Regions with at least one valid box, in atlas order.
    pub regions: Vec<AggregatedRegion>,
    pub invalid_rows: usize,
}

impl AggregationResult {
    pub fn get(&self, region_id: &str) -> Option<&AggregatedRegion> {
        self.regions.iter().find(|r| r.region_id == region_id)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmp_box(a: &([f64; 4], f64), b: &([f64; 4], f64)) -> Ordering {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| x.total_cmp(y))
        .chain(std::iter::once(a.1.total_cmp(&b.1)))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Normalize, gate and robustly merge annotation boxes per region.
///
/// Each region's boxes are merged by element-wise median; when the median
/// box is no wider or taller than `tau_box` the confidence-weighted mean
/// `Σcᵢbᵢ / (Σcᵢ + ε)` is used instead. Rows with unknown image size,
/// unknown region, a confidence outside [0, 1] or out-of-order/out-of-range
/// coordinates are counted as invalid.
pub fn aggregate_bounds(
    annotations: &[Annotation],
    atlas: &RegionAtlas,
    cfg: &AggregationConfig,
) -> AggregationResult {
    let mut lists: Vec<Vec<([f64; 4], f64)>> = vec![Vec::new(); atlas.regions.len()];
    let mut invalid_rows = 0;

    for ann in annotations {
        let (w, h) = match (ann.width, ann.height) {
            (Some(w), Some(h)) if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() => (w, h),
            _ => {
                invalid_rows += 1;
                continue;
            }
        };
        let Some(idx) = atlas.resolve_region(&ann.region) else {
            invalid_rows += 1;
            continue;
        };
        let c = ann.confidence.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&c) {
            invalid_rows += 1;
            continue;
        }
        let b = [ann.x1 / w, ann.y1 / h, ann.x2 / w, ann.y2 / h];
        if !bounds_valid(&b) {
            invalid_rows += 1;
            continue;
        }
        lists[idx].push((b, c));
    }

    let mut regions = Vec::new();
    for (idx, mut list) in lists.into_iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        // a fixed order makes the weighted sum independent of input order
        list.sort_by(cmp_box);
        let mut med = [0.0; 4];
        for (k, m) in med.iter_mut().enumerate() {
            let mut col: Vec<f64> = list.iter().map(|(b, _)| b[k]).collect();
            *m = median(&mut col);
        }
        let degenerate = med[2] - med[0] <= cfg.tau_box || med[3] - med[1] <= cfg.tau_box;
        let (bounds, branch) = if degenerate {
            let c_sum: f64 = list.iter().map(|(_, c)| c).sum();
            let mut acc = [0.0; 4];
            for (b, c) in &list {
                for k in 0..4 {
                    acc[k] += c * b[k];
                }
            }
            (
                acc.map(|v| v / (c_sum + cfg.eps)),
                AggregationBranch::WeightedAverage,
            )
        } else {
            (med, AggregationBranch::Median)
        };
        if !bounds_valid(&bounds) {
            invalid_rows += list.len();
            continue;
        }
        regions.push(AggregatedRegion {
            region_id: atlas.regions[idx].region_id.clone(),
            bounds,
            branch,
            n_boxes: list.len(),
        });
    }
    AggregationResult {
        regions,
        invalid_rows,
    }
}

/// Read `patient,region,x1,y1,x2,y2,width,height,confidence` rows.
pub fn read_annotations_csv<R: Read>(reader: R) -> Result<Vec<Annotation>> {
    const COLUMNS: [&str; 9] = [
        "patient",
        "region",
        "x1",
        "y1",
        "x2",
        "y2",
        "width",
        "height",
        "confidence",
    ];
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = COLUMNS
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim().eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Schema(format!("missing required column {name:?}")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let num = |k: usize| -> Result<Option<f64>> {
            let s = get(k);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| {
                Error::at_row(
                    i,
                    Error::Parse(format!("{}: not a number: {s:?}", COLUMNS[k])),
                )
            })
        };
        let req = |k: usize| -> Result<f64> {
            num(k)?.ok_or_else(|| {
                Error::at_row(i, Error::Schema(format!("{} is required", COLUMNS[k])))
            })
        };
        out.push(Annotation {
            patient: get(0).to_string(),
            region: get(1).to_string(),
            x1: req(2)?,
            y1: req(3)?,
            x2: req(4)?,
            y2: req(5)?,
            width: num(6)?,
            height: num(7)?,
            confidence: num(8)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordMatch {
    pub keyword: String,
    pub region_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionActivation {
    pub flags: Vec<bool>,
    pub matched: Vec<KeywordMatch>,
    pub unmatched: Vec<String>,
}

impl RegionActivation {
    pub fn empty(n_regions: usize) -> Self {
        Self {
            flags: vec![false; n_regions],
            matched: Vec::new(),
            unmatched: Vec::new(),
        }
    }

    pub fn active_indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.then_some(i))
            .collect()
    }
}

/// Lowercase, turn punctuation into spaces and collapse whitespace.
pub fn normalize_term(s: &str) -> String {
    s.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn contains_phrase(haystack: &str, needle: &str) -> bool {
    !needle.is_empty() && format!(" {haystack} ").contains(&format!(" {needle} "))
}

/// `1 − levenshtein / max(len)` over characters.
pub fn similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

/// Score of one alias against a normalized keyword: edit similarity, raised
/// to `CONTAINMENT_SIMILARITY` when the alias occurs as whole words inside
/// the keyword.
pub fn alias_score(keyword: &str, alias: &str) -> f64 {
    let alias = normalize_term(alias);
    let s = similarity(keyword, &alias);
    if contains_phrase(keyword, &alias) {
        s.max(CONTAINMENT_SIMILARITY)
    } else {
        s
    }
}

/// Highest-scoring alias at or above `threshold`; ties go to the longer
/// alias, then to the earlier region.
fn best_region(keyword: &str, atlas: &RegionAtlas, threshold: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64, usize)> = None;
    for (i, region) in atlas.regions.iter().enumerate() {
        for alias in &region.aliases {
            let s = alias_score(keyword, alias);
            let len = alias.chars().count();
            let better = match best {
                None => true,
                Some((_, bs, blen)) => s > bs || (s == bs && len > blen),
            };
            if s >= threshold && better {
                best = Some((i, s, len));
            }
        }
    }
    best.map(|(i, s, _)| (i, s))
}

/// Activate atlas regions from free-text keywords.
pub fn match_keywords<S: AsRef<str>>(
    keywords: &[S],
    atlas: &RegionAtlas,
    threshold: f64,
) -> Result<RegionActivation> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "match threshold {threshold} outside (0, 1]"
        )));
    }
    let mut act = RegionActivation::empty(atlas.regions.len());
    for kw in keywords {
        let raw = kw.as_ref();
        let norm = normalize_term(raw);
        match best_region(&norm, atlas, threshold) {
            Some((i, s)) if !norm.is_empty() => {
                act.flags[i] = true;
                act.matched.push(KeywordMatch {
                    keyword: raw.to_string(),
                    region_id: atlas.regions[i].region_id.clone(),
                    similarity: s,
                });
            }
            _ => act.unmatched.push(raw.to_string()),
        }
    }
    Ok(act)
}

/// Pixel span `[floor(lo·n), ceil(hi·n))` clamped to the grid.
fn pixel_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = (lo * n as f64).floor().max(0.0) as usize;
    let b = ((hi * n as f64).ceil().max(0.0) as usize).min(n);
    (a.min(n), b)
}

/// Binary union mask of the active regions.
pub fn render_mask(
    activation: &RegionActivation,
    atlas: &RegionAtlas,
    height: usize,
    width: usize,
) -> Result<AttentionMap> {
    if activation.flags.len() != atlas.regions.len() {
        return Err(Error::Shape(format!(
            "activation has {} flags, atlas has {} regions",
            activation.flags.len(),
            atlas.regions.len()
        )));
    }
    let mut values = vec![0.0; height * width];
    for i in activation.active_indices() {
        let [x1, y1, x2, y2] = atlas.regions[i].bounds;
        let (c0, c1) = pixel_span(x1, x2, width);
        let (r0, r1) = pixel_span(y1, y2, height);
        for r in r0..r1 {
            values[r * width + c0..r * width + c1].fill(1.0);
        }
    }
    AttentionMap::new(height, width, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionWeight {
    pub region_id: String,
    pub weight: f64,
}

/// Regions implicated by a set of conditions: primary regions at the
/// condition weight, secondary at half of it, deduplicated by max weight
/// in order of first appearance.
pub fn regions_for_conditions(
    conditions: &[Condition],
    atlas: &RegionAtlas,
) -> Result<Vec<RegionWeight>> {
    let mut out: Vec<RegionWeight> = Vec::new();
    for &cond in conditions {
        let entry = atlas.condition_entry(cond).ok_or_else(|| {
            Error::Precondition(format!("condition {cond} missing from the atlas matrix"))
        })?;
        let primary = entry.primary.iter().map(|r| (r, entry.weight));
        let secondary = entry
            .secondary
            .iter()
            .map(|r| (r, entry.weight * SECONDARY_WEIGHT_FACTOR));
        for (region, weight) in primary.chain(secondary) {
            match out.iter_mut().find(|rw| &rw.region_id == region) {
                Some(rw) => rw.weight = rw.weight.max(weight),
                None => out.push(RegionWeight {
                    region_id: region.clone(),
                    weight,
                }),
            }
        }
    }
    Ok(out)
}
