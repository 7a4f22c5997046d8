//! Shared generators and independent reference implementations for the
//! integration tests.
#![allow(dead_code)]

use gaze_align::fixation::{FixationRecord, FixationSequence};
use gaze_align::regions::{AggregationBranch, Annotation};
use gaze_align::saliency::{AttentionMap, DistributionView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> AttentionMap {
    let values = (0..h * w).map(|_| rng.random_range(lo..hi)).collect();
    AttentionMap::new(h, w, values).unwrap()
}

pub fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> DistributionView {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    // a few exact zeros exercise the 0·log 0 convention
    for _ in 0..n / 4 {
        let i = rng.random_range(0..n);
        v[i] = 0.0;
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    let total: f64 = v.iter().sum();
    DistributionView::new(v.into_iter().map(|x| x / total).collect()).unwrap()
}

pub fn fixation(x: f64, y: f64, duration: f64) -> FixationRecord {
    FixationRecord {
        x,
        y,
        duration,
        pupil: 1.0,
        t_start: 0.0,
        valid: true,
    }
}

pub fn random_fixations(rng: &mut ChaCha8Rng, n: usize) -> FixationSequence {
    let recs = (0..n)
        .map(|_| {
            let mut f = fixation(rng.random(), rng.random(), rng.random_range(0.05..1.0));
            f.valid = rng.random_bool(0.85);
            f
        })
        .collect::<Vec<_>>();
    let mut seq = FixationSequence::from_records(recs);
    if seq.n_fix == 0 {
        seq.records[0].valid = true;
        seq = FixationSequence::from_records(seq.records);
    }
    seq
}

// ---- attention metrics, written out longhand ----

pub fn oracle_mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

/// Pearson r and two-sided p through the Student t CDF.
pub fn oracle_pearson(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len();
    let ma = oracle_mean(a);
    let mb = oracle_mean(b);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..n {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    let r = cov / va.sqrt() / vb.sqrt();
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).unwrap();
    let p = 2.0 * dist.sf(t.abs());
    (r, p)
}

pub fn oracle_sum_normalize(v: &[f64]) -> Vec<f64> {
    let eps = 1e-8;
    let mut total = 0.0;
    for x in v {
        total += x + eps;
    }
    v.iter().map(|x| (x + eps) / total).collect()
}

pub fn oracle_kl_bits(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i] / q[i]).ln();
        }
    }
    s / std::f64::consts::LN_2
}

pub fn oracle_jsd(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    0.5 * oracle_kl_bits(p, &m) + 0.5 * oracle_kl_bits(q, &m)
}

pub fn oracle_entropy(p: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in p {
        if *x > 0.0 {
            s -= x * x.ln();
        }
    }
    s / std::f64::consts::LN_2
}

pub fn oracle_nss(map: &AttentionMap, fix: &FixationSequence) -> f64 {
    let v = map.values();
    let mean = oracle_mean(v);
    let mut var = 0.0;
    for x in v {
        var += (x - mean) * (x - mean);
    }
    let std = (var / v.len() as f64).sqrt();
    let (h, w) = map.shape();
    let mut total = 0.0;
    let mut count = 0;
    for f in &fix.records {
        if !f.valid {
            continue;
        }
        let r = (f.y * (h - 1) as f64).round() as usize;
        let c = (f.x * (w - 1) as f64).round() as usize;
        total += (v[r * w + c] - mean) / std;
        count += 1;
    }
    total / count as f64
}

pub fn oracle_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

// ---- text metrics by brute-force counting ----

pub fn oracle_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngrams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count_of(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Clipped matches: for each distinct candidate n-gram, min of the counts.
pub fn oracle_clipped(cand: &[String], refr: &[String], n: usize) -> (usize, usize) {
    let cg = ngrams(cand, n);
    let rg = ngrams(refr, n);
    let mut seen: Vec<Vec<String>> = Vec::new();
    let mut matched = 0;
    for g in &cg {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        matched += count_of(&cg, g).min(count_of(&rg, g));
    }
    (matched, cg.len())
}

pub fn oracle_bleu(cand: &str, refr: &str, max_n: usize) -> f64 {
    let c = oracle_tokens(cand);
    let r = oracle_tokens(refr);
    if c.is_empty() {
        return 0.0;
    }
    let mut logs = Vec::new();
    for n in 1..=max_n {
        let (m, total) = oracle_clipped(&c, &r, n);
        if total == 0 {
            continue;
        }
        let p = if m == 0 {
            1e-9
        } else {
            m as f64 / total as f64
        };
        logs.push(p.ln());
    }
    let geo = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * geo
}

/// LCS by plain recursion over a full table.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] {
                1 + t[i + 1][j + 1]
            } else {
                t[i + 1][j].max(t[i][j + 1])
            };
        }
    }
    t[0][0]
}

pub fn oracle_prf(hits: usize, c: usize, r: usize) -> (f64, f64, f64) {
    if c == 0 || r == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = hits as f64 / c as f64;
    let rc = hits as f64 / r as f64;
    let f = if hits == 0 {
        0.0
    } else {
        2.0 * p * rc / (p + rc)
    };
    (p, rc, f)
}

pub fn oracle_rouge_l(cand: &str, refr: &str) -> (f64, f64, f64) {
    let c = oracle_tokens(cand);
    let r = oracle_tokens(refr);
    oracle_prf(oracle_lcs(&c, &r), c.len(), r.len())
}

pub fn oracle_rouge_n(cand: &str, refr: &str, n: usize) -> (f64, f64, f64) {
    let c = oracle_tokens(cand);
    let r = oracle_tokens(refr);
    let (m, ct) = oracle_clipped(&c, &r, n);
    let rt = ngrams(&r, n).len();
    oracle_prf(m, ct, rt)
}

pub fn oracle_keyword_overlap(cand: &str, terms: &[String]) -> f64 {
    let text = oracle_tokens(cand).join(" ");
    let mut hits = 0;
    for t in terms {
        let t = oracle_tokens(t).join(" ");
        if !t.is_empty() && text.contains(&t) {
            hits += 1;
        }
    }
    hits as f64 / terms.len() as f64
}

pub const VOCAB: [&str; 16] = [
    "no",
    "focal",
    "consolidation",
    "pleural",
    "effusion",
    "heart",
    "size",
    "normal",
    "mild",
    "cardiomegaly",
    "left",
    "right",
    "lower",
    "lobe",
    "opacity",
    "the",
];

pub fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let n = rng.random_range(1..=max_len);
    (0..n)
        .map(|_| VOCAB[rng.random_range(0..VOCAB.len())])
        .collect::<Vec<_>>()
        .join(if rng.random_bool(0.3) { ", " } else { " " })
}

// ---- bounds aggregation, step by step ----

pub struct OracleRegion {
    pub bounds: [f64; 4],
    pub branch: AggregationBranch,
}

/// Per-region aggregation written as a literal step-by-step procedure:
/// normalize by (W, H), gate, element-wise median, and the weighted
/// fallback when the median is too thin.
pub fn oracle_aggregate(
    rows: &[Annotation],
    region_ids: &[String],
    tau_box: f64,
    eps: f64,
) -> Vec<Option<OracleRegion>> {
    let mut lists: Vec<Vec<([f64; 4], f64)>> = vec![Vec::new(); region_ids.len()];
    for row in rows {
        let (Some(w), Some(h)) = (row.width, row.height) else {
            continue;
        };
        if !(w > 0.0 && h > 0.0) {
            continue;
        }
        let x1 = row.x1 / w;
        let y1 = row.y1 / h;
        let x2 = row.x2 / w;
        let y2 = row.y2 / h;
        let Some(r) = region_ids.iter().position(|id| *id == row.region) else {
            continue;
        };
        if 0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0 {
            lists[r].push(([x1, y1, x2, y2], row.confidence.unwrap_or(1.0)));
        }
    }
    lists
        .into_iter()
        .map(|l| {
            if l.is_empty() {
                return None;
            }
            let mut med = [0.0; 4];
            for k in 0..4 {
                let mut col: Vec<f64> = l.iter().map(|(b, _)| b[k]).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let n = col.len();
                med[k] = if n % 2 == 1 {
                    col[n / 2]
                } else {
                    (col[n / 2 - 1] + col[n / 2]) / 2.0
                };
            }
            if med[2] - med[0] <= tau_box || med[3] - med[1] <= tau_box {
                let mut num = [0.0; 4];
                let mut den = 0.0;
                for (b, c) in &l {
                    for k in 0..4 {
                        num[k] += c * b[k];
                    }
                    den += c;
                }
                Some(OracleRegion {
                    bounds: num.map(|v| v / (den + eps)),
                    branch: AggregationBranch::WeightedAverage,
                })
            } else {
                Some(OracleRegion {
                    bounds: med,
                    branch: AggregationBranch::Median,
                })
            }
        })
        .collect()
}

/// Relative error used by the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// MSE + (1 - rho) + normalized CoM distance in double-double precision,
/// with `m[k] + delta` in place of `m[k]`.
pub fn oracle_gaze_algebraic_dd(
    m: &[f64],
    g: &[f64],
    h: usize,
    w: usize,
    k: usize,
    delta: f64,
) -> twofloat::TwoFloat {
    use twofloat::TwoFloat as T;
    let zero = T::from(0.0);
    let mut mv: Vec<T> = m.iter().map(|&v| T::from(v)).collect();
    mv[k] += delta;
    let gv: Vec<T> = g.iter().map(|&v| T::from(v)).collect();
    let n = T::from(m.len() as f64);

    let mse = mv
        .iter()
        .zip(&gv)
        .fold(zero, |s, (a, b)| s + (*a - *b) * (*a - *b))
        / n;

    let mean = |v: &[T]| v.iter().fold(zero, |s, x| s + *x) / n;
    let (mm, mg) = (mean(&mv), mean(&gv));
    let (mut saa, mut sbb, mut sab) = (zero, zero, zero);
    for (a, b) in mv.iter().zip(&gv) {
        let (da, db) = (*a - mm, *b - mg);
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    let corr = T::from(1.0) - sab / (saa * sbb).sqrt();

    let com = |v: &[T]| {
        let (mut t, mut sr, mut sc) = (zero, zero, zero);
        for (i, x) in v.iter().enumerate() {
            t += *x;
            sr += *x * ((i / w) as f64);
            sc += *x * ((i % w) as f64);
        }
        (sr / t, sc / t)
    };
    let (cm, cg) = (com(&mv), com(&gv));
    let dist = ((cm.0 - cg.0) * (cm.0 - cg.0) + (cm.1 - cg.1) * (cm.1 - cg.1)).sqrt();
    mse + corr + dist / T::from(((h * h + w * w) as f64).sqrt())
}

/// KL(softmax(g) || softmax(m + h e_k)) - KL(softmax(g) || softmax(m - h e_k)),
/// evaluated in closed form without cancellation. With sum(p) = 1 the KL is
/// sum(p ln p) - p.m + logsumexp(m), so only two terms move.
pub fn oracle_kl_central_difference(m: &[f64], g: &[f64], k: usize, h: f64) -> f64 {
    let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pz: f64 = g.iter().map(|v| (v - gmax).exp()).sum();
    let p_k = (g[k] - gmax).exp() / pz;
    let s_minus: f64 = m
        .iter()
        .enumerate()
        .map(|(j, v)| if j == k { (v - h).exp() } else { v.exp() })
        .sum();
    // ln(S+ / S-) with S+ - S- = e^{m_k} (e^h - e^-h)
    let lse_diff = (m[k].exp() * 2.0 * h.sinh() / s_minus).ln_1p();
    lse_diff - 2.0 * h * p_k
}
