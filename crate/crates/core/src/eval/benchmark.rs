//! Per-class image-level AUROC over a bundle manifest.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{class_auroc, ClassAuroc};
use crate::autodiff::Real;
use crate::expert::{with_thread_cap, ExpertModel};
use crate::features::{load_bundle, Label, ManifestEntry};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub id: String,
    #[serde(rename = "class")]
    pub class_id: u32,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub auroc: ClassAuroc,
    /// In manifest order.
    pub records: Vec<ScoredRecord>,
}

impl BenchmarkReport {
    /// Fixed-width table: one row per class, then the mean.
    pub fn text_table(&self) -> String {
        let mut out = format!("{:<8} {:>6} {:>9} {:>8}\n", "class", "n", "anomalous", "AUROC");
        for row in &self.auroc.per_class {
            let a = row.auroc.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
            out.push_str(&format!("{:<8} {:>6} {:>9} {:>8}\n", row.class_id, row.n, row.n_anomalous, a));
        }
        out.push_str(&format!("{:<8} {:>6} {:>9} {:>8.1}\n", "mean", self.records.len(), "", 100.0 * self.auroc.mean));
        out
    }
}

fn record_id(entry: &ManifestEntry) -> String {
    entry.id.clone().unwrap_or_else(|| entry.path.display().to_string())
}

/// Loads and scores every bundle of `entries` in parallel.
pub fn run_benchmark<F: Real>(model: &ExpertModel<F>, entries: &[ManifestEntry]) -> Result<BenchmarkReport, Error> {
    if entries.is_empty() {
        return Err(Error::Data("empty manifest".into()));
    }
    let scores: Vec<f64> = with_thread_cap(|| {
        entries
            .par_iter()
            .map(|e| {
                let bundle = load_bundle(&e.path)?;
                if bundle.label != e.label || bundle.class_id != e.class_id {
                    return Err(Error::Data(format!("{}: label/class disagree with manifest", e.path.display())));
                }
                model.score(&bundle)
            })
            .collect::<Result<_, _>>()
    })?;
    let labels: Vec<bool> = entries.iter().map(|e| e.label.is_anomalous()).collect();
    let classes: Vec<u32> = entries.iter().map(|e| e.class_id).collect();
    let auroc = class_auroc(&scores, &labels, &classes)?;
    let records = entries
        .iter()
        .zip(scores)
        .map(|(e, score)| ScoredRecord { id: record_id(e), class_id: e.class_id, label: e.label, score })
        .collect();
    Ok(BenchmarkReport { auroc, records })
}
