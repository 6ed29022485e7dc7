//! ROUGE-N, ROUGE-L, BLEU-4 and span EM/F1 over whitespace tokens.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Single-number metrics (span exact match).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl ScoreReport {
    fn from_counts(metric: &str, overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        let precision = if hyp_total == 0 { 0.0 } else { overlap as f64 / hyp_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
        ScoreReport {
            metric: metric.to_string(),
            precision,
            recall,
            f1: harmonic(precision, recall),
            score: None,
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngram_counts<X: Eq + Hash>(xs: &[X], n: usize) -> HashMap<&[X], usize> {
    let mut m = HashMap::new();
    if n > 0 && xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped overlap: each hypothesis n-gram counts at most as often as it
/// appears in the reference.
fn clipped_overlap<X: Eq + Hash>(hyp: &HashMap<&[X], usize>, reference: &HashMap<&[X], usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge_n<X: Eq + Hash>(hyp: &[X], reference: &[X], n: usize) -> Result<ScoreReport> {
    if n == 0 {
        return Err(Error::Input("ROUGE-N needs n ≥ 1".into()));
    }
    if reference.is_empty() {
        return Err(Error::Input("empty reference".into()));
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = clipped_overlap(&h, &r);
    Ok(ScoreReport::from_counts(
        &format!("rouge{n}"),
        overlap,
        hyp.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    ))
}

/// Longest common subsequence length, by dynamic programming.
pub fn lcs_len<X: Eq>(a: &[X], b: &[X]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<X: Eq>(hyp: &[X], reference: &[X]) -> Result<ScoreReport> {
    if reference.is_empty() {
        return Err(Error::Input("empty reference".into()));
    }
    Ok(ScoreReport::from_counts("rougeL", lcs_len(hyp, reference), hyp.len(), reference.len()))
}

/// Geometric mean of clipped 1–4-gram precisions times the brevity
/// penalty `exp(1 − r/h)` when `h < r`. Zero n-gram counts are add-1
/// smoothed (`1 / (total + 1)`) whenever the hypothesis is shorter than four
/// tokens or `smooth` is set.
pub fn bleu4_with<X: Eq + Hash>(hyp: &[X], reference: &[X], smooth: bool) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let smooth = smooth || hyp.len() < 4;
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let total = hyp.len().saturating_sub(n - 1);
        let overlap = clipped_overlap(&h, &r);
        let p = if overlap > 0 {
            overlap as f64 / total as f64
        } else if smooth {
            1.0 / (total as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln() / 4.0;
    }
    let (hl, rl) = (hyp.len() as f64, reference.len() as f64);
    let bp = if hl < rl { (1.0 - rl / hl).exp() } else { 1.0 };
    bp * log_sum.exp()
}

pub fn bleu4<X: Eq + Hash>(hyp: &[X], reference: &[X]) -> f64 {
    bleu4_with(hyp, reference, false)
}

/// Exact match after whitespace normalization and token-overlap F1.
pub fn span_em_f1(pred: &str, gold: &str) -> ScoreReport {
    let p = tokenize(pred);
    let g = tokenize(gold);
    let em = if p == g { 1.0 } else { 0.0 };
    let overlap = clipped_overlap(&ngram_counts(&p, 1), &ngram_counts(&g, 1));
    let mut report = ScoreReport::from_counts("span", overlap, p.len(), g.len());
    if p.is_empty() && g.is_empty() {
        report.f1 = 1.0;
    }
    report.score = Some(em);
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rouge1,
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
    Bleu4,
    Span,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rouge1" => Ok(Metric::Rouge1),
            "rouge2" => Ok(Metric::Rouge2),
            "rougeL" | "rougel" => Ok(Metric::RougeL),
            "bleu4" => Ok(Metric::Bleu4),
            "span" => Ok(Metric::Span),
            other => Err(Error::Input(format!("unknown metric {other:?}"))),
        }
    }
}

/// Corpus-level report: the mean of per-line scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub metric: String,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
}

pub fn corpus_score(metric: Metric, hyps: &[&str], refs: &[&str]) -> Result<CorpusReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Input("no lines to score".into()));
    }
    let n = hyps.len() as f64;
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / n;
    let pairs = hyps.iter().zip(refs);
    let mut report = CorpusReport {
        metric: String::new(),
        count: hyps.len(),
        precision: None,
        recall: None,
        f1: None,
        score: None,
        exact_match: None,
    };
    match metric {
        Metric::Rouge1 | Metric::Rouge2 | Metric::RougeL => {
            let scores = pairs
                .map(|(h, r)| {
                    let (h, r) = (tokenize(h), tokenize(r));
                    match metric {
                        Metric::Rouge1 => rouge_n(&h, &r, 1),
                        Metric::Rouge2 => rouge_n(&h, &r, 2),
                        _ => rouge_l(&h, &r),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            report.metric = scores[0].metric.clone();
            report.precision = Some(mean(scores.iter().map(|s| s.precision).collect()));
            report.recall = Some(mean(scores.iter().map(|s| s.recall).collect()));
            report.f1 = Some(mean(scores.iter().map(|s| s.f1).collect()));
        }
        Metric::Bleu4 => {
            report.metric = "bleu4".into();
            report.score = Some(mean(pairs.map(|(h, r)| bleu4(&tokenize(h), &tokenize(r))).collect()));
        }
        Metric::Span => {
            let scores: Vec<ScoreReport> = pairs.map(|(h, r)| span_em_f1(h, r)).collect();
            report.metric = "span".into();
            report.exact_match = Some(mean(scores.iter().map(|s| s.score.unwrap_or(0.0)).collect()));
            report.f1 = Some(mean(scores.iter().map(|s| s.f1).collect()));
        }
    }
    Ok(report)
}
