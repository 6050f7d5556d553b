//! One request/response interface for every external service used by the
//! collection pipeline, plus deterministic mocks.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Polarity, Verdict};

/// JSON schema of [`Request`] and [`Response`].
pub const CLIENT_SCHEMA: &str = include_str!("client.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    /// Ask for `count` object class names.
    ListClasses { count: usize },
    /// Ask for `count` search phrases of one polarity for a class.
    Phrases { class_name: String, polarity: Polarity, count: usize },
    Search { prompt: String, limit: usize },
    /// Decide the label of a collected image; the search polarity is passed
    /// only as a hint.
    Adjudicate { item_id: String, class_name: String, search_prompt: String, hint: Polarity },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Response {
    Classes { names: Vec<String> },
    Phrases { phrases: Vec<String> },
    Hits { hits: Vec<SearchHit> },
    Verdict { verdict: Verdict },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("client failure: {0}")]
    Failed(String),
    #[error("unexpected response to {0} request")]
    Protocol(&'static str),
    #[error("request not supported by this client: {0}")]
    Unsupported(&'static str),
}

pub trait Client: Sync {
    fn call(&self, request: &Request) -> Result<Response, ClientError>;
}

fn request_kind(r: &Request) -> &'static str {
    match r {
        Request::ListClasses { .. } => "list_classes",
        Request::Phrases { .. } => "phrases",
        Request::Search { .. } => "search",
        Request::Adjudicate { .. } => "adjudicate",
    }
}

/// 64-bit FNV-1a, used to derive per-request mock seeds.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Language model and search stand-in. Phrases are numbered; with
/// `repeat_every = Some(k)` every k-th phrase repeats the previous one.
#[derive(Debug, Clone, Default)]
pub struct MockLanguageModel {
    pub seed: u64,
    pub repeat_every: Option<usize>,
    pub embedding_dim: usize,
}

impl Client for MockLanguageModel {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        match request {
            Request::ListClasses { count } => Ok(Response::Classes { names: (0..*count).map(|i| format!("object_{i:03}")).collect() }),
            Request::Phrases { class_name, polarity, count } => {
                let mut phrases: Vec<String> = Vec::with_capacity(*count);
                for k in 0..*count {
                    let repeat = self.repeat_every.is_some_and(|r| r > 0 && k > 0 && k % r == 0);
                    let p = if repeat { phrases[k - 1].clone() } else { format!("{} {class_name} photo {k}", polarity.as_str()) };
                    phrases.push(p);
                }
                Ok(Response::Phrases { phrases })
            }
            Request::Search { prompt, limit } => {
                let d = self.embedding_dim.max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(prompt.as_bytes()));
                let hits = (0..*limit)
                    .map(|i| SearchHit {
                        id: format!("{:016x}-{i}", fnv1a(prompt.as_bytes())),
                        embedding: (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
                    })
                    .collect();
                Ok(Response::Hits { hits })
            }
            Request::Adjudicate { .. } => Err(ClientError::Unsupported("adjudicate")),
        }
    }
}

/// Judge that confirms the hint.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoJudge;

/// Judge that flips the hint.
#[derive(Debug, Clone, Copy, Default)]
pub struct InvertJudge;

fn adjudicate_with(request: &Request, f: impl Fn(Polarity) -> Polarity) -> Result<Response, ClientError> {
    match request {
        Request::Adjudicate { hint, .. } => Ok(Response::Verdict { verdict: Verdict::keep(f(*hint)) }),
        other => Err(ClientError::Unsupported(request_kind(other))),
    }
}

impl Client for EchoJudge {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        adjudicate_with(request, |p| p)
    }
}

impl Client for InvertJudge {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        adjudicate_with(request, Polarity::flipped)
    }
}

/// Wraps a client and fails every request naming one of `fail_ids` (item
/// ids for adjudication, class names for phrase requests).
#[derive(Debug, Clone)]
pub struct FailingClient<C> {
    pub inner: C,
    pub fail_ids: BTreeSet<String>,
}

impl<C: Client> Client for FailingClient<C> {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        let key = match request {
            Request::Adjudicate { item_id, .. } => Some(item_id),
            Request::Phrases { class_name, .. } => Some(class_name),
            _ => None,
        };
        match key {
            Some(k) if self.fail_ids.contains(k) => Err(ClientError::Failed(format!("injected failure for {k}"))),
            _ => self.inner.call(request),
        }
    }
}

pub(crate) fn expect_phrases(r: Response) -> Result<Vec<String>, ClientError> {
    match r {
        Response::Phrases { phrases } => Ok(phrases),
        _ => Err(ClientError::Protocol("phrases")),
    }
}

pub(crate) fn expect_verdict(r: Response) -> Result<Verdict, ClientError> {
    match r {
        Response::Verdict { verdict } => Ok(verdict),
        _ => Err(ClientError::Protocol("adjudicate")),
    }
}

pub(crate) fn expect_classes(r: Response) -> Result<Vec<String>, ClientError> {
    match r {
        Response::Classes { names } => Ok(names),
        _ => Err(ClientError::Protocol("list_classes")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format_is_tagged() {
        let r = Request::Phrases { class_name: "bottle".into(), polarity: Polarity::Anomalous, count: 10 };
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["kind"], "phrases");
        assert_eq!(j["polarity"], "anomalous");
        assert_eq!(serde_json::from_value::<Request>(j).unwrap(), r);
        let v = serde_json::to_value(Response::Verdict { verdict: Verdict::Discard }).unwrap();
        assert_eq!(v, serde_json::json!({"kind": "verdict", "verdict": "discard"}));
    }

    #[test]
    fn mocks_are_pure() {
        let lm = MockLanguageModel { seed: 4, embedding_dim: 6, ..Default::default() };
        let req = Request::Search { prompt: "cracked bottle".into(), limit: 3 };
        assert_eq!(lm.call(&req).unwrap(), lm.call(&req).unwrap());
        let other = MockLanguageModel { seed: 5, ..lm.clone() };
        assert_ne!(lm.call(&req).unwrap(), other.call(&req).unwrap());
        assert!(EchoJudge.call(&req).is_err());
    }

    #[test]
    fn schema_is_valid_json() {
        let v: serde_json::Value = serde_json::from_str(CLIENT_SCHEMA).unwrap();
        assert!(v["$defs"]["request"].is_object());
        assert!(v["$defs"]["response"].is_object());
    }
}
