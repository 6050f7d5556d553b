//! Evaluation: image-level AUROC, answer-text detection metrics, ROUGE-L,
//! significance-map export and the per-class benchmark.

mod benchmark;
mod localization;
mod maps;
mod metrics;

pub use benchmark::{run_benchmark, BenchmarkReport, ScoredRecord};
pub use localization::{localization, region_contrast, Localization};
pub use maps::{export_map, map_pgm_bytes, to_pixel};
pub use metrics::{answer_is_positive, auroc, class_auroc, detection_metrics, rouge_l, ClassAuroc, ClassRow, DetectionMetrics};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::features::Label;
use crate::Error;

/// One precomputed prediction: either a score or a generated answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub label: Label,
    #[serde(default, rename = "class")]
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// Metrics over a set of [`EvalRecord`]s; each part is present when some
/// record supports it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub auroc: Option<ClassAuroc>,
    pub detection: Option<DetectionMetrics>,
    /// Mean ROUGE-L over answers with a reference.
    pub rouge_l: Option<f64>,
    /// Mean external-judge score, when the judge produced any.
    pub judge: Option<f64>,
}

/// Scores generated text against a reference with an external model.
pub trait ExternalJudge {
    fn name(&self) -> &str;
    fn judge(&self, candidate: &str, reference: &str) -> Option<f64>;
}

/// Judge that never scores.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullJudge;

impl ExternalJudge for NullJudge {
    fn name(&self) -> &str {
        "null"
    }

    fn judge(&self, _: &str, _: &str) -> Option<f64> {
        None
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let manifest_err = |message: String| Error::Manifest { path: path.into(), line: i + 1, message };
        let rec: EvalRecord = serde_json::from_str(line).map_err(|e| manifest_err(e.to_string()))?;
        if rec.score.is_some() == rec.answer.is_some() {
            return Err(manifest_err("exactly one of score/answer is required".into()));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn evaluate_records(records: &[EvalRecord], judge: &dyn ExternalJudge) -> Result<RecordReport, Error> {
    let scored: Vec<&EvalRecord> = records.iter().filter(|r| r.score.is_some()).collect();
    let answered: Vec<&EvalRecord> = records.iter().filter(|r| r.answer.is_some()).collect();
    let auroc = if scored.is_empty() {
        None
    } else {
        let s: Vec<f64> = scored.iter().filter_map(|r| r.score).collect();
        let y: Vec<bool> = scored.iter().map(|r| r.label.is_anomalous()).collect();
        let c: Vec<u32> = scored.iter().map(|r| r.class_id).collect();
        Some(class_auroc(&s, &y, &c)?)
    };
    let detection = if answered.is_empty() {
        None
    } else {
        let a: Vec<&str> = answered.iter().filter_map(|r| r.answer.as_deref()).collect();
        let y: Vec<bool> = answered.iter().map(|r| r.label.is_anomalous()).collect();
        Some(detection_metrics(&a, &y)?)
    };
    let pairs: Vec<(&str, &str)> = answered
        .iter()
        .filter_map(|r| Some((r.answer.as_deref()?, r.reference.as_deref()?)))
        .collect();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let rouge = mean(pairs.iter().map(|(a, r)| rouge_l(a, r)).collect());
    let judged = mean(pairs.iter().filter_map(|(a, r)| judge.judge(a, r)).collect());
    Ok(RecordReport { auroc, detection, rouge_l: rouge, judge: judged })
}
