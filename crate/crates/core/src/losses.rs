//! Training objectives: the composite gaze-attention loss (with analytic
//! gradients w.r.t. the model map), InfoNCE, focal classification loss,
//! the logit ensemble and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{center_of_mass_raw, softmax, AttentionMap, PYRAMID_SIZES};

pub const NUM_CONDITIONS: usize = 8;

/// Below this standard deviation a map is treated as constant and the
/// correlation is taken as zero.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub focal_gamma: f64,
    pub class_pos_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda1: 0.1,
            lambda2: 0.3,
            lambda3: 0.15,
            alpha: 0.7,
            focal_gamma: 2.0,
            class_pos_weights: vec![1.0; NUM_CONDITIONS],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| l.is_nan() || *l < 0.0)
        {
            return bad("lambdas must be non-negative");
        }
        if self.focal_gamma.is_nan() || self.focal_gamma < 0.0 {
            return bad("focal gamma must be non-negative");
        }
        if self
            .class_pos_weights
            .iter()
            .any(|w| w.is_nan() || *w <= 0.0)
        {
            return bad("class positive weights must be positive");
        }
        Ok(())
    }

    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }
}

/// Per-term gradients of the gaze loss w.r.t. every model-map entry.
/// The term gradients are unweighted; `total` includes `w_q`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TermGradients {
    pub mse: Vec<f64>,
    pub kl: Vec<f64>,
    pub corr: Vec<f64>,
    pub com: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl: f64,
    pub corr: f64,
    pub com: f64,
    pub w_q: f64,
    #[serde(rename = "total")]
    pub gaze_total: f64,
    #[serde(skip)]
    pub grads: TermGradients,
}

/// Fixation-quality weight `√n_fix · q_score`.
pub fn quality_weight(n_fix: usize, q_score: f64) -> f64 {
    (n_fix as f64).sqrt() * q_score
}

/// Composite gaze-attention loss between a model map and a fixation map.
///
/// `mse` is the mean squared difference, `kl` is KL(softmax(gaze) ‖
/// softmax(model)) in nats, `corr` is `1 − ρ` with ρ := 0 for a constant
/// map, and `com` is the centre-of-mass distance over the map diagonal.
/// The sum is scaled by `w_q = √n_fix · q_score`.
pub fn gaze_loss(
    a_model: &AttentionMap,
    a_gaze: &AttentionMap,
    n_fix: usize,
    q_score: f64,
) -> Result<LossBreakdown> {
    a_model.ensure_same_shape(a_gaze)?;
    if !(0.0..=1.0).contains(&q_score) {
        return Err(Error::Precondition(format!(
            "q_score {q_score} outside [0, 1]"
        )));
    }
    let (h, w) = a_model.shape();
    let m = a_model.values();
    let g = a_gaze.values();
    let n = m.len() as f64;

    // mean squared error
    let mse = m.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let grad_mse: Vec<f64> = m.iter().zip(g).map(|(a, b)| 2.0 * (a - b) / n).collect();

    // KL(P_gaze || Q_model); d/dm_k = Q_k - P_k
    let p = softmax(g);
    let q = softmax(m);
    let kl = p
        .iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>()
        .max(0.0);
    let grad_kl: Vec<f64> = q.iter().zip(&p).map(|(qi, pi)| qi - pi).collect();

    // 1 - Pearson
    let mean_m = m.iter().sum::<f64>() / n;
    let mean_g = g.iter().sum::<f64>() / n;
    let a: Vec<f64> = m.iter().map(|v| v - mean_m).collect();
    let b: Vec<f64> = g.iter().map(|v| v - mean_g).collect();
    let saa: f64 = a.iter().map(|v| v * v).sum();
    let sbb: f64 = b.iter().map(|v| v * v).sum();
    let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let degenerate = (saa / n).sqrt() < DEGENERATE_STD || (sbb / n).sqrt() < DEGENERATE_STD;
    let (corr, grad_corr) = if degenerate {
        (1.0, vec![0.0; m.len()])
    } else {
        let denom = (saa * sbb).sqrt();
        let rho = (sab / denom).clamp(-1.0, 1.0);
        let grad = a
            .iter()
            .zip(&b)
            .map(|(ak, bk)| -(bk / denom - rho * ak / saa))
            .collect();
        (1.0 - rho, grad)
    };

    // normalized centre-of-mass distance
    let diag = ((h * h + w * w) as f64).sqrt();
    let cm = center_of_mass_raw(m, h, w);
    let cg = center_of_mass_raw(g, h, w);
    let (dr, dc) = (cm.0 - cg.0, cm.1 - cg.1);
    let dist = (dr * dr + dc * dc).sqrt();
    let com = dist / diag;
    let mass: f64 = m.iter().sum();
    let grad_com: Vec<f64> = if dist > 0.0 && mass > 0.0 {
        (0..m.len())
            .map(|k| {
                let (r, c) = ((k / w) as f64, (k % w) as f64);
                (dr * (r - cm.0) + dc * (c - cm.1)) / (mass * dist * diag)
            })
            .collect()
    } else {
        vec![0.0; m.len()]
    };

    let w_q = quality_weight(n_fix, q_score);
    let gaze_total = w_q * (mse + kl + corr + com);
    let total = (0..m.len())
        .map(|k| w_q * (grad_mse[k] + grad_kl[k] + grad_corr[k] + grad_com[k]))
        .collect();

    Ok(LossBreakdown {
        mse,
        kl,
        corr,
        com,
        w_q,
        gaze_total,
        grads: TermGradients {
            mse: grad_mse,
            kl: grad_kl,
            corr: grad_corr,
            com: grad_com,
            total,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleBreakdown {
    pub total: f64,
    pub scales: Vec<LossBreakdown>,
}

/// Gaze loss evaluated on every pyramid level and averaged.
pub fn gaze_loss_multiscale(
    pyr_model: &[AttentionMap],
    pyr_gaze: &[AttentionMap],
    n_fix: usize,
    q_score: f64,
) -> Result<MultiscaleBreakdown> {
    if pyr_model.len() != PYRAMID_SIZES.len() || pyr_gaze.len() != PYRAMID_SIZES.len() {
        return Err(Error::Shape(format!(
            "pyramids need {} levels, got {} and {}",
            PYRAMID_SIZES.len(),
            pyr_model.len(),
            pyr_gaze.len()
        )));
    }
    let mut scales = Vec::with_capacity(PYRAMID_SIZES.len());
    for ((m, g), size) in pyr_model.iter().zip(pyr_gaze).zip(PYRAMID_SIZES) {
        if m.shape() != (size, size) || g.shape() != (size, size) {
            return Err(Error::Shape(format!(
                "pyramid level should be {size}x{size}, got {:?} and {:?}",
                m.shape(),
                g.shape()
            )));
        }
        scales.push(gaze_loss(m, g, n_fix, q_score)?);
    }
    let total = scales.iter().map(|s| s.gaze_total).sum::<f64>() / scales.len() as f64;
    Ok(MultiscaleBreakdown { total, scales })
}

/// A projected embedding (image, text or gaze). Similarity is cosine, so
/// the stored vector need not be unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<EmbeddingVector> {
        let n = self.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Precondition(
                "cannot normalize a zero-norm embedding".into(),
            ));
        }
        Ok(EmbeddingVector(self.0.iter().map(|v| v / n).collect()))
    }
}

impl From<Vec<f64>> for EmbeddingVector {
    fn from(v: Vec<f64>) -> Self {
        EmbeddingVector(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_anchors: Vec<Vec<f64>>,
    pub grad_positives: Vec<Vec<f64>>,
}

fn check_batch(anchors: &[EmbeddingVector], positives: &[EmbeddingVector], tau: f64) -> Result<()> {
    if anchors.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} anchors vs {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    if anchors.len() < 2 {
        return Err(Error::Precondition(
            "InfoNCE needs a batch of at least 2".into(),
        ));
    }
    let dim = anchors[0].dim();
    if anchors.iter().chain(positives).any(|e| e.dim() != dim) {
        return Err(Error::Shape("embedding dimensions differ".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config("tau must be positive".into()));
    }
    Ok(())
}

pub fn info_nce(
    anchors: &[EmbeddingVector],
    positives: &[EmbeddingVector],
    tau: f64,
) -> Result<f64> {
    Ok(info_nce_with_grad(anchors, positives, tau)?.loss)
}

/// InfoNCE with in-batch negatives: anchor `i` is paired with positive `i`
/// and contrasted against every positive in the batch.
pub fn info_nce_with_grad(
    anchors: &[EmbeddingVector],
    positives: &[EmbeddingVector],
    tau: f64,
) -> Result<InfoNceOutput> {
    check_batch(anchors, positives, tau)?;
    let n = anchors.len();
    let dim = anchors[0].dim();
    let ua: Vec<EmbeddingVector> = anchors
        .iter()
        .map(|e| e.normalized())
        .collect::<Result<_>>()?;
    let up: Vec<EmbeddingVector> = positives
        .iter()
        .map(|e| e.normalized())
        .collect::<Result<_>>()?;
    let na: Vec<f64> = anchors.iter().map(|e| e.norm()).collect();
    let np: Vec<f64> = positives.iter().map(|e| e.norm()).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();

    let mut loss = 0.0;
    // dL/ds_ik for the cosine similarity matrix
    let mut ds = vec![vec![0.0; n]; n];
    let mut sims = vec![vec![0.0; n]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|k| dot(&ua[i].0, &up[k].0) / tau).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        loss -= logits[i] - lse;
        for k in 0..n {
            sims[i][k] = logits[k] * tau;
            let soft = (logits[k] - lse).exp();
            ds[i][k] = (soft - if i == k { 1.0 } else { 0.0 }) / (tau * n as f64);
        }
    }
    loss /= n as f64;

    // d cos(u, v)/du = v̂/|u| − cos·û/|u|
    let mut grad_anchors = vec![vec![0.0; dim]; n];
    let mut grad_positives = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for k in 0..n {
            let g = ds[i][k];
            if g == 0.0 {
                continue;
            }
            let s = sims[i][k];
            for d in 0..dim {
                grad_anchors[i][d] += g * (up[k].0[d] - s * ua[i].0[d]) / na[i];
                grad_positives[k][d] += g * (ua[i].0[d] - s * up[k].0[d]) / np[k];
            }
        }
    }
    Ok(InfoNceOutput {
        loss,
        grad_anchors,
        grad_positives,
    })
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Multi-label focal loss with class-balanced positive weights, averaged
/// over classes. Positives contribute `−w·(1−p)^γ·log p`, negatives
/// `−p^γ·log(1−p)`.
pub fn focal_loss(logits: &[f64], targets: &[f64], cfg: &LossConfig) -> Result<f64> {
    let weights = &cfg.class_pos_weights;
    if logits.len() != targets.len() || logits.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} logits, {} targets, {} class weights",
            logits.len(),
            targets.len(),
            weights.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Precondition("no classes".into()));
    }
    let gamma = cfg.focal_gamma;
    let mut total = 0.0;
    for ((&x, &t), &w) in logits.iter().zip(targets).zip(weights) {
        total += if t == 1.0 {
            let p = sigmoid(x);
            -w * (1.0 - p).powf(gamma) * log_sigmoid(x)
        } else if t == 0.0 {
            let p = sigmoid(x);
            -p.powf(gamma) * log_sigmoid(-x)
        } else {
            return Err(Error::Precondition(format!("target {t} is not binary")));
        };
    }
    Ok(total / logits.len() as f64)
}

/// `α·global + (1−α)·specific`, per condition.
pub fn ensemble_logit(global: &[f64], specific: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if global.len() != specific.len() {
        return Err(Error::Shape(format!(
            "{} global vs {} specific logits",
            global.len(),
            specific.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(global
        .iter()
        .zip(specific)
        .map(|(g, s)| alpha * g + (1.0 - alpha) * s)
        .collect())
}

pub fn total_loss(cls: f64, nce: f64, gaze: f64, gaze_text: f64, cfg: &LossConfig) -> f64 {
    cls + cfg.lambda1 * nce + cfg.lambda2 * gaze + cfg.lambda3 * gaze_text
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map(h: usize, w: usize, v: &[f64]) -> AttentionMap {
        AttentionMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn defaults_match_reference_values() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.lambdas(), [0.1, 0.3, 0.15]);
        assert_eq!(cfg.alpha, 0.7);
        cfg.validate().unwrap();
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let m = map(2, 3, &[0.1, 0.5, 0.2, 0.9, 0.0, 0.3]);
        let b = gaze_loss(&m, &m, 9, 0.8).unwrap();
        assert_abs_diff_eq!(b.mse, 0.0);
        assert_abs_diff_eq!(b.kl, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.corr, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.com, 0.0);
        assert_abs_diff_eq!(b.gaze_total, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_fixations_zero_weight() {
        let a = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = map(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let out = gaze_loss(&a, &b, 0, 1.0).unwrap();
        assert_eq!(out.w_q, 0.0);
        assert_eq!(out.gaze_total, 0.0);
    }

    #[test]
    fn two_by_two_known_terms() {
        let a = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = map(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let out = gaze_loss(&a, &b, 4, 1.0).unwrap();
        assert_abs_diff_eq!(out.mse, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.com, 0.5, epsilon = 1e-15);
        assert_eq!(out.w_q, 2.0);
    }

    #[test]
    fn constant_maps_have_unit_corr() {
        let a = AttentionMap::filled(4, 4, 0.3);
        let b = AttentionMap::filled(4, 4, 0.1);
        let out = gaze_loss(&a, &b, 1, 1.0).unwrap();
        assert_eq!(out.corr, 1.0);
        assert_abs_diff_eq!(out.kl, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.com, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = gaze_loss(
            &AttentionMap::zeros(2, 2),
            &AttentionMap::zeros(2, 3),
            1,
            1.0,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn info_nce_orthogonal_pair() {
        let a = vec![
            EmbeddingVector(vec![1.0, 0.0]),
            EmbeddingVector(vec![0.0, 1.0]),
        ];
        let loss = info_nce(&a, &a, 0.07).unwrap();
        let expected = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-15);
        assert!(loss > 6.0e-7 && loss < 6.5e-7);
    }

    #[test]
    fn info_nce_identical_is_log_n() {
        let v: Vec<_> = (0..5)
            .map(|_| EmbeddingVector(vec![0.3, -0.2, 0.9]))
            .collect();
        assert_abs_diff_eq!(info_nce(&v, &v, 0.07).unwrap(), 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn info_nce_errors() {
        let ok = EmbeddingVector(vec![1.0, 0.0]);
        let zero = EmbeddingVector(vec![0.0, 0.0]);
        assert!(info_nce(&[ok.clone(), zero.clone()], &[ok.clone(), ok.clone()], 0.07).is_err());
        assert!(info_nce(std::slice::from_ref(&ok), std::slice::from_ref(&ok), 0.07).is_err());
    }

    #[test]
    fn focal_hand_value() {
        let cfg = LossConfig {
            class_pos_weights: vec![1.0],
            ..LossConfig::default()
        };
        let v = focal_loss(&[0.0], &[1.0], &cfg).unwrap();
        assert_abs_diff_eq!(v, 0.25 * 2f64.ln(), epsilon = 1e-15);
        assert!((v - 0.1733).abs() < 1e-4);
        let saturated = focal_loss(&[60.0], &[1.0], &cfg).unwrap();
        assert!(saturated < 1e-20);
        assert!(focal_loss(&[0.0], &[0.5], &cfg).is_err());
    }

    #[test]
    fn ensemble_cases() {
        let out = ensemble_logit(&[1.0], &[0.0], 0.7).unwrap();
        assert_abs_diff_eq!(out[0], 0.7, epsilon = 1e-15);
        let g = [0.3, -1.2, 4.0];
        assert_eq!(
            ensemble_logit(&g, &[9.0, 9.0, 9.0], 1.0).unwrap(),
            g.to_vec()
        );
        assert_eq!(ensemble_logit(&g, &g, 0.4).unwrap()[2], 4.0);
        assert!(ensemble_logit(&g, &g, 1.5).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &cfg), 0.0);
        assert_abs_diff_eq!(total_loss(1.0, 1.0, 1.0, 1.0, &cfg), 1.55, epsilon = 1e-15);
        let mut no_gaze = cfg.clone();
        no_gaze.lambda2 = 0.0;
        assert_eq!(
            total_loss(0.4, 0.2, 1.0, 0.3, &no_gaze),
            total_loss(0.4, 0.2, 99.0, 0.3, &no_gaze)
        );
    }

    #[test]
    fn breakdown_json_keys() {
        let m = AttentionMap::filled(2, 2, 1.0);
        let out = gaze_loss(&m, &m, 1, 1.0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&out).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["com", "corr", "kl", "mse", "total", "w_q"]);
    }
}
