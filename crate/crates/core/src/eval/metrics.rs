//! Ranking and text metrics.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Doubled Mann-Whitney statistic: `2·wins + ties` over all
/// (positive, negative) pairs, via average ranks kept as doubled integers.
fn doubled_pair_count(scores: &[f64], labels: &[bool]) -> u128 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Positions i..=j share the average 1-based rank (i+j+2)/2.
        let doubled_rank = (i + j + 2) as u128;
        let pos = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum += doubled_rank * pos;
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y).count() as u128;
    rank_sum - n_pos * (n_pos + 1)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, Error> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUROC needs both classes".into()));
    }
    Ok(doubled_pair_count(scores, labels) as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: u32,
    pub n: usize,
    pub n_anomalous: usize,
    /// `None` when the class holds a single label.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAuroc {
    pub per_class: Vec<ClassRow>,
    /// Mean over classes with both labels.
    pub mean: f64,
    /// AUROC of all scores pooled together, when defined.
    pub pooled: Option<f64>,
}

pub fn class_auroc(scores: &[f64], labels: &[bool], classes: &[u32]) -> Result<ClassAuroc, Error> {
    if scores.len() != labels.len() || scores.len() != classes.len() {
        return Err(Error::Data("scores, labels and classes differ in length".into()));
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for ((&s, &y), &c) in scores.iter().zip(labels).zip(classes) {
        let g = groups.entry(c).or_default();
        g.0.push(s);
        g.1.push(y);
    }
    let mut per_class = Vec::with_capacity(groups.len());
    for (class_id, (s, y)) in groups {
        let n_anomalous = y.iter().filter(|&&v| v).count();
        let defined = n_anomalous > 0 && n_anomalous < y.len();
        per_class.push(ClassRow { class_id, n: y.len(), n_anomalous, auroc: if defined { Some(auroc(&s, &y)?) } else { None } });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|r| r.auroc).collect();
    if defined.is_empty() {
        return Err(Error::Data("no class holds both labels".into()));
    }
    let pooled = auroc(scores, labels).ok();
    Ok(ClassAuroc { per_class, mean: defined.iter().sum::<f64>() / defined.len() as f64, pooled })
}

static YES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bYes\b").expect("valid pattern"));

/// Whether a generated answer says "Yes" as a standalone, case-sensitive word.
pub fn answer_is_positive(answer: &str) -> bool {
    YES.is_match(answer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names of ratios whose denominator was zero; they are reported as 0.
    pub undefined: Vec<String>,
}

pub fn detection_metrics<S: AsRef<str>>(answers: &[S], labels: &[bool]) -> Result<DetectionMetrics, Error> {
    if answers.is_empty() || answers.len() != labels.len() {
        return Err(Error::Data(format!("{} answers for {} labels", answers.len(), labels.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (a, &y) in answers.iter().zip(labels) {
        match (answer_is_positive(a.as_ref()), y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: f64, den: f64| {
        if den == 0.0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num / den
        }
    };
    let accuracy = ratio("accuracy", (tp + tn) as f64, answers.len() as f64);
    let precision = ratio("precision", tp as f64, (tp + fp) as f64);
    let recall = ratio("recall", tp as f64, (tp + fn_) as f64);
    let f1 = ratio("f1", 2.0 * tp as f64, (2 * tp + fp + fn_) as f64);
    Ok(DetectionMetrics { tp, fp, fn_, tn, accuracy, precision, recall, f1, undefined })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure over lowercased whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let tok = |s: &str| s.to_lowercase().split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let (c, r) = (tok(candidate), tok(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r) as f64;
    let (p, rec) = (lcs / c.len() as f64, lcs / r.len() as f64);
    if p + rec == 0.0 {
        0.0
    } else {
        2.0 * p * rec / (p + rec)
    }
}
