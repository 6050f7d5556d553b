//! Offline logic of the web-image collection pipeline: search-prompt
//! generation, per-class near-duplicate removal and label cleaning. Every
//! external service sits behind [`Client`].

mod client;
mod dedup;

pub use client::{
    Client, ClientError, EchoJudge, FailingClient, InvertJudge, MockLanguageModel, Request, Response, SearchHit, CLIENT_SCHEMA,
};
pub use dedup::{dedup, dedup_by_class, DedupOutcome, DEDUP_THRESHOLD};

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Anomalous,
    Normal,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Anomalous, Polarity::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Anomalous => "anomalous",
            Polarity::Normal => "normal",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Anomalous => Polarity::Normal,
            Polarity::Normal => Polarity::Anomalous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    KeepNormal,
    KeepAnomalous,
    Discard,
}

impl Verdict {
    pub fn keep(p: Polarity) -> Self {
        match p {
            Polarity::Anomalous => Verdict::KeepAnomalous,
            Polarity::Normal => Verdict::KeepNormal,
        }
    }
}

/// One image found by a search prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectedItem {
    pub id: String,
    pub search_prompt: String,
    pub class_name: String,
    /// Polarity of the prompt that found the item.
    pub hint: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

pub fn read_items(path: impl AsRef<Path>) -> Result<Vec<CollectedItem>, Error> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Manifest { path: path.into(), line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn write_items(path: impl AsRef<Path>, items: &[CollectedItem]) -> Result<(), Error> {
    let path = path.as_ref();
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("item serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Items after adjudication. Every input item lands in exactly one list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CleanedItems {
    pub normal: Vec<CollectedItem>,
    pub anomalous: Vec<CollectedItem>,
    pub discarded: Vec<CollectedItem>,
    /// Items whose adjudication failed, with the error.
    pub pending: Vec<(CollectedItem, String)>,
}

/// Asks `judge` about every item independently. A failed request leaves the
/// item pending; it is never kept by default.
pub fn clean_labels(items: Vec<CollectedItem>, judge: &dyn Client) -> CleanedItems {
    let verdicts: Vec<Result<Verdict, ClientError>> = items
        .par_iter()
        .map(|it| {
            let req = Request::Adjudicate {
                item_id: it.id.clone(),
                class_name: it.class_name.clone(),
                search_prompt: it.search_prompt.clone(),
                hint: it.hint,
            };
            judge.call(&req).and_then(client::expect_verdict)
        })
        .collect();
    let mut out = CleanedItems::default();
    for (mut it, v) in items.into_iter().zip(verdicts) {
        match v {
            Ok(verdict) => {
                it.verdict = Some(verdict);
                match verdict {
                    Verdict::KeepNormal => out.normal.push(it),
                    Verdict::KeepAnomalous => out.anomalous.push(it),
                    Verdict::Discard => out.discarded.push(it),
                }
            }
            Err(e) => {
                it.verdict = None;
                out.pending.push((it, e.to_string()));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchPrompt {
    pub class_name: String,
    pub polarity: Polarity,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PromptSet {
    /// Grouped by class (input order), then polarity (anomalous first).
    pub prompts: Vec<SearchPrompt>,
    /// Repeated phrases dropped per class.
    pub duplicates_removed: BTreeMap<String, usize>,
    /// Classes whose requests failed, with the error.
    pub failures: Vec<(String, String)>,
}

impl PromptSet {
    pub fn count(&self, class_name: &str, polarity: Polarity) -> usize {
        self.prompts.iter().filter(|p| p.class_name == class_name && p.polarity == polarity).count()
    }
}

/// Requests `phrases_per_class` phrases of each polarity for every class and
/// drops repeated phrases within a class.
pub fn build_prompt_set(classes: &[String], phrases_per_class: usize, lm: &dyn Client) -> PromptSet {
    let mut set = PromptSet::default();
    for class in classes {
        let mut fetched = Vec::new();
        let result: Result<(), ClientError> = Polarity::BOTH.iter().try_for_each(|&polarity| {
            let req = Request::Phrases { class_name: class.clone(), polarity, count: phrases_per_class };
            let phrases = lm.call(&req).and_then(client::expect_phrases)?;
            fetched.extend(phrases.into_iter().map(|phrase| SearchPrompt { class_name: class.clone(), polarity, phrase }));
            Ok(())
        });
        if let Err(e) = result {
            set.failures.push((class.clone(), e.to_string()));
            continue;
        }
        let mut seen = HashSet::new();
        let before = fetched.len();
        fetched.retain(|p| seen.insert(p.phrase.clone()));
        set.duplicates_removed.insert(class.clone(), before - fetched.len());
        set.prompts.extend(fetched);
    }
    set
}

pub fn list_classes(lm: &dyn Client, count: usize) -> Result<Vec<String>, ClientError> {
    lm.call(&Request::ListClasses { count }).and_then(client::expect_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<CollectedItem> {
        (0..n)
            .map(|i| CollectedItem {
                id: format!("img{i}"),
                search_prompt: format!("prompt {i}"),
                class_name: "bottle".into(),
                hint: if i % 3 == 0 { Polarity::Anomalous } else { Polarity::Normal },
                embedding: None,
                verdict: None,
            })
            .collect()
    }

    fn ids(v: &[CollectedItem]) -> Vec<String> {
        v.iter().map(|i| i.id.clone()).collect()
    }

    #[test]
    fn echo_and_invert_partition_by_hint() {
        let input = items(9);
        let hinted_anom: Vec<String> = input.iter().filter(|i| i.hint == Polarity::Anomalous).map(|i| i.id.clone()).collect();
        let hinted_norm: Vec<String> = input.iter().filter(|i| i.hint == Polarity::Normal).map(|i| i.id.clone()).collect();
        let echo = clean_labels(input.clone(), &EchoJudge);
        assert_eq!(ids(&echo.anomalous), hinted_anom);
        assert_eq!(ids(&echo.normal), hinted_norm);
        assert!(echo.anomalous.iter().all(|i| i.verdict == Some(Verdict::KeepAnomalous)));
        let inv = clean_labels(input, &InvertJudge);
        assert_eq!(ids(&inv.anomalous), hinted_norm);
        assert_eq!(ids(&inv.normal), hinted_anom);
    }

    #[test]
    fn failing_item_is_pending_only() {
        let input = items(6);
        let judge = FailingClient { inner: EchoJudge, fail_ids: ["img4".to_string()].into() };
        let out = clean_labels(input, &judge);
        assert_eq!(out.pending.len(), 1);
        assert_eq!(out.pending[0].0.id, "img4");
        assert!(out.pending[0].0.verdict.is_none());
        assert_eq!(out.normal.len() + out.anomalous.len() + out.discarded.len(), 5);
    }

    #[test]
    fn prompt_counts() {
        let lm = MockLanguageModel::default();
        let classes = vec!["bottle".to_string(), "cable".to_string()];
        let set = build_prompt_set(&classes, 10, &lm);
        assert_eq!(set.prompts.len(), 40);
        for c in &classes {
            for p in Polarity::BOTH {
                assert_eq!(set.count(c, p), 10);
            }
        }
        assert_eq!(set.prompts[0].polarity, Polarity::Anomalous);
        assert_eq!(set.prompts[10].polarity, Polarity::Normal);
        assert_eq!(set.prompts[20].class_name, "cable");

        let many = list_classes(&lm, 400).unwrap();
        assert_eq!(build_prompt_set(&many, 10, &lm).prompts.len(), 8000);
    }

    #[test]
    fn repeated_phrases_are_counted() {
        let lm = MockLanguageModel { repeat_every: Some(5), ..Default::default() };
        let set = build_prompt_set(&["screw".to_string()], 10, &lm);
        assert_eq!(set.duplicates_removed["screw"], 2);
        assert_eq!(set.prompts.len(), 18);
    }

    #[test]
    fn class_failure_is_reported() {
        let lm = FailingClient { inner: MockLanguageModel::default(), fail_ids: ["cable".to_string()].into() };
        let set = build_prompt_set(&["bottle".to_string(), "cable".to_string()], 10, &lm);
        assert_eq!(set.prompts.len(), 20);
        assert_eq!(set.failures.len(), 1);
        assert_eq!(set.failures[0].0, "cable");
    }
}
