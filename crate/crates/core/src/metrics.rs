//! Human↔model attention alignment metrics.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::fixation::FixationSequence;
use crate::losses::DEGENERATE_STD;
use crate::saliency::{to_distribution, AttentionMap, DistributionMode, DistributionView};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    /// Nominal two-sided p-value from the t-approximation with n = pixels.
    pub p: f64,
    pub degenerate: bool,
}

/// Two-sided p-value of a Pearson r over `n` samples using Student's t
/// with `n − 2` degrees of freedom.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * df / (1.0 - r2);
    // P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2)
    beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
}

pub fn pearson(a: &AttentionMap, b: &AttentionMap) -> Result<PearsonResult> {
    a.ensure_same_shape(b)?;
    pearson_slices(a.values(), b.values())
}

pub fn pearson_slices(a: &[f64], b: &[f64]) -> Result<PearsonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Precondition(
            "pearson needs at least 3 pixels".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if (saa / n).sqrt() < DEGENERATE_STD || (sbb / n).sqrt() < DEGENERATE_STD {
        return Ok(PearsonResult {
            r: 0.0,
            p: 1.0,
            degenerate: true,
        });
    }
    let r = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    Ok(PearsonResult {
        r,
        p: pearson_p_value(r, a.len()),
        degenerate: false,
    })
}

fn check_pair(p: &DistributionView, q: &DistributionView) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} vs {} cells", p.len(), q.len())));
    }
    Ok(())
}

/// Base-2 Jensen–Shannon divergence, in [0, 1].
pub fn jensen_shannon(p: &DistributionView, q: &DistributionView) -> Result<f64> {
    check_pair(p, q)?;
    let half_kl = |x: f64, m: f64| {
        if x > 0.0 {
            0.5 * x * (x / m).log2()
        } else {
            0.0
        }
    };
    let jsd: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| {
            let m = 0.5 * (pi + qi);
            half_kl(pi, m) + half_kl(qi, m)
        })
        .sum();
    Ok(jsd.clamp(0.0, 1.0))
}

/// Shannon entropy in bits with `0·log 0 = 0`.
pub fn entropy_bits(d: &DistributionView) -> f64 {
    -d.probs()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NssResult {
    pub value: f64,
    pub degenerate: bool,
}

/// Nearest pixel `(row, col)` of a unit-square fixation on an `h×w` grid.
pub fn fixation_pixel(x: f64, y: f64, height: usize, width: usize) -> (usize, usize) {
    let row = (y.clamp(0.0, 1.0) * (height - 1) as f64).round() as usize;
    let col = (x.clamp(0.0, 1.0) * (width - 1) as f64).round() as usize;
    (row, col)
}

/// Normalized scanpath saliency: mean z-scored model value at the valid
/// fixations. A constant model map scores 0 and is flagged degenerate.
pub fn nss(model_map: &AttentionMap, fixations: &FixationSequence) -> Result<NssResult> {
    let points: Vec<(usize, usize)> = fixations
        .valid_records()
        .map(|f| fixation_pixel(f.x, f.y, model_map.height(), model_map.width()))
        .collect();
    if points.is_empty() {
        return Err(Error::Precondition(
            "NSS needs at least one valid fixation".into(),
        ));
    }
    let v = model_map.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return Ok(NssResult {
            value: 0.0,
            degenerate: true,
        });
    }
    let total: f64 = points
        .iter()
        .map(|&(r, c)| (model_map.get(r, c) - mean) / std)
        .sum();
    Ok(NssResult {
        value: total / points.len() as f64,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub mse: f64,
    pub jsd_bits: f64,
    pub nss: f64,
    pub entropy_human_bits: f64,
    pub entropy_model_bits: f64,
    pub pearson_degenerate: bool,
    pub nss_degenerate: bool,
    /// Always "nominal": spatial autocorrelation is ignored.
    pub p_value_kind: String,
}

impl AlignmentReport {
    /// Numeric fields by name, in a fixed order, for aggregation.
    pub fn numeric_fields(&self) -> [(&'static str, f64); 7] {
        [
            ("pearson_r", self.pearson_r),
            ("pearson_p", self.pearson_p),
            ("mse", self.mse),
            ("jsd_bits", self.jsd_bits),
            ("nss", self.nss),
            ("entropy_human_bits", self.entropy_human_bits),
            ("entropy_model_bits", self.entropy_model_bits),
        ]
    }
}

pub fn alignment_report(
    a_model: &AttentionMap,
    a_gaze: &AttentionMap,
    fixations: &FixationSequence,
) -> Result<AlignmentReport> {
    a_model.ensure_same_shape(a_gaze)?;
    let pr = pearson(a_model, a_gaze)?;
    let mse = a_model
        .values()
        .iter()
        .zip(a_gaze.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / a_model.len() as f64;
    let dm = to_distribution(a_model, DistributionMode::SumNormalize);
    let dg = to_distribution(a_gaze, DistributionMode::SumNormalize);
    let score = nss(a_model, fixations)?;
    Ok(AlignmentReport {
        pearson_r: pr.r,
        pearson_p: pr.p,
        mse,
        jsd_bits: jensen_shannon(&dm, &dg)?,
        nss: score.value,
        entropy_human_bits: entropy_bits(&dg),
        entropy_model_bits: entropy_bits(&dm),
        pearson_degenerate: pr.degenerate,
        nss_degenerate: score.degenerate,
        p_value_kind: "nominal".into(),
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}
