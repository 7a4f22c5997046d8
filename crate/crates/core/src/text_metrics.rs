//! Surface overlap metrics for generated reports: BLEU, ROUGE and clinical
//! keyword coverage.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_SMOOTHING_EPS: f64 = 1e-9;
pub const DEFAULT_BLEU_MAX_N: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedReport {
    pub tokens: Vec<String>,
    pub source_text: String,
}

impl TokenizedReport {
    pub fn new(text: &str) -> Self {
        Self {
            tokens: tokenize(text),
            source_text: text.to_string(),
        }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts
            .entry(w.iter().map(AsRef::as_ref).collect())
            .or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and the candidate's n-gram total.
fn clipped_overlap<S: AsRef<str>>(cand: &[S], refr: &[S], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// Per-order precision; `None` where the candidate is shorter than the order.
    pub precisions: Vec<Option<f64>>,
    pub brevity_penalty: f64,
    pub degenerate: bool,
}

/// Single-reference sentence BLEU up to `max_n`.
///
/// Zero precisions are replaced by `1e-9`. Orders longer than the candidate
/// have no n-grams and are left out of the geometric mean, so a short
/// candidate identical to its reference scores 1.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> Result<BleuScore> {
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() {
        return Ok(BleuScore {
            score: 0.0,
            precisions: vec![None; max_n],
            brevity_penalty: 0.0,
            degenerate: true,
        });
    }
    let mut precisions = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let (matched, total) = clipped_overlap(&cand, &refr, n);
        if total == 0 {
            precisions.push(None);
            continue;
        }
        let p = matched as f64 / total as f64;
        let p = if p == 0.0 { BLEU_SMOOTHING_EPS } else { p };
        precisions.push(Some(p));
        log_sum += p.ln();
        orders += 1;
    }
    let (c, r) = (cand.len() as f64, refr.len() as f64);
    let brevity_penalty = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(BleuScore {
        score: brevity_penalty * (log_sum / orders as f64).exp(),
        precisions,
        brevity_penalty,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl Prf {
    fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        if cand_total == 0 || ref_total == 0 {
            return Self::degenerate();
        }
        let precision = hits as f64 / cand_total as f64;
        let recall = hits as f64 / ref_total as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        Self {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            degenerate: true,
        }
    }
}

/// ROUGE-N from clipped n-gram overlap.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::Config("ROUGE order must be at least 1".into()));
    }
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    let (hits, cand_total) = clipped_overlap(&cand, &refr, n);
    let ref_total = refr.len().saturating_sub(n - 1);
    Ok(Prf::from_counts(hits, cand_total, ref_total))
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the token longest common subsequence.
pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    Prf::from_counts(lcs_len(&cand, &refr), cand.len(), refr.len())
}

fn normalize_text(s: &str) -> String {
    tokenize(s).join(" ")
}

/// Fraction of `required_terms` found in the candidate after both are
/// lowercased and stripped of punctuation.
pub fn keyword_overlap<S: AsRef<str>>(candidate: &str, required_terms: &[S]) -> Result<f64> {
    if required_terms.is_empty() {
        return Err(Error::Precondition(
            "keyword overlap needs at least one term".into(),
        ));
    }
    let text = normalize_text(candidate);
    let hits = required_terms
        .iter()
        .filter(|t| {
            let t = normalize_text(t.as_ref());
            !t.is_empty() && text.contains(&t)
        })
        .count();
    Ok(hits as f64 / required_terms.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportScores {
    pub bleu: [f64; 4],
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keyword_overlap: Option<f64>,
    pub bleu_degenerate: bool,
}

/// BLEU-1..4, ROUGE-1/2/L and optional keyword coverage for one pair.
pub fn score_report(
    candidate: &str,
    reference: &str,
    required_terms: &[String],
) -> Result<ReportScores> {
    let mut bleu_scores = [0.0; 4];
    let mut bleu_degenerate = false;
    for (i, b) in bleu_scores.iter_mut().enumerate() {
        let s = bleu(candidate, reference, i + 1)?;
        bleu_degenerate |= s.degenerate;
        *b = s.score;
    }
    let keyword_overlap = if required_terms.is_empty() {
        None
    } else {
        Some(keyword_overlap(candidate, required_terms)?)
    };
    Ok(ReportScores {
        bleu: bleu_scores,
        rouge1: rouge_n(candidate, reference, 1)?,
        rouge2: rouge_n(candidate, reference, 2)?,
        rouge_l: rouge_l(candidate, reference),
        keyword_overlap,
        bleu_degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tokenization() {
        assert_eq!(
            tokenize("No focal-consolidation, ET tube."),
            vec!["no", "focal", "consolidation", "et", "tube"]
        );
        assert!(tokenize("  ,. ").is_empty());
    }

    #[test]
    fn bleu_basics() {
        let s = bleu("the cat sat on the mat", "the cat sat on the mat", 4).unwrap();
        assert_abs_diff_eq!(s.score, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bleu("cat", "cat", 4).unwrap().score, 1.0, epsilon = 1e-12);
        assert!(
            bleu("alpha beta gamma delta", "one two three four", 4)
                .unwrap()
                .score
                < 1e-8
        );
        let e = bleu("", "ref", 4).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.score, 0.0);
    }

    #[test]
    fn bleu_short_candidate() {
        // p1 = p2 = p3 = 1, no 4-grams; BP = exp(1 - 4/3)
        let s = bleu("the cat sat", "the cat sat down", 4).unwrap();
        assert_abs_diff_eq!(s.brevity_penalty, (-1.0f64 / 3.0).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(s.score, (-1.0f64 / 3.0).exp(), epsilon = 1e-12);
        assert_eq!(s.precisions[3], None);
    }

    #[test]
    fn bleu_clips_repeats() {
        let s = bleu("the the the the", "the cat", 1).unwrap();
        assert_abs_diff_eq!(s.precisions[0].unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn rouge_l_hand_case() {
        let p = rouge_l("a b c d", "a c d e");
        assert_abs_diff_eq!(p.precision, 0.75);
        assert_abs_diff_eq!(p.recall, 0.75);
        assert_abs_diff_eq!(p.f1, 0.75);
        assert_eq!(rouge_l("x y", "x y").f1, 1.0);
        assert_eq!(rouge_l("x y", "z w").f1, 0.0);
        assert!(rouge_l("", "z").degenerate);
    }

    #[test]
    fn rouge_n_counts() {
        let p = rouge_n("a b c", "a b d e", 2).unwrap();
        assert_abs_diff_eq!(p.precision, 0.5);
        assert_abs_diff_eq!(p.recall, 1.0 / 3.0);
        assert!(rouge_n("a", "a b", 2).unwrap().degenerate);
    }

    #[test]
    fn keyword_coverage() {
        let text = "Mild cardiomegaly. Small left pleural effusion!";
        let terms: Vec<String> = ["cardiomegaly", "Pleural Effusion", "pneumothorax"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_abs_diff_eq!(keyword_overlap(text, &terms).unwrap(), 2.0 / 3.0);
        assert!(keyword_overlap::<String>(text, &[]).is_err());
        let ten: Vec<String> = (0..10).map(|i| format!("term{i}")).collect();
        let cand = (0..7)
            .map(|i| format!("term{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        assert_eq!(keyword_overlap(&cand, &ten).unwrap(), 0.7);
    }
}
