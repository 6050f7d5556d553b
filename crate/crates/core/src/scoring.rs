//! Image-level scoring and the indication-prompt layout handed to the
//! language model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::features::FeatureBundle;
use crate::params::TwoLayer;
use crate::Error;

/// Significance-weighted mean of every selected token across crops.
/// `v_s[j]` is `[cells×D_enc]`, `pooled_m[j]` is `[cells]`.
pub fn aggregate_global<F: Real>(tape: &mut Tape<F>, v_s: &[Var], pooled_m: &[Var]) -> Result<Var, AutodiffError> {
    if v_s.is_empty() || v_s.len() != pooled_m.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "aggregate_global",
            detail: format!("{} token groups, {} weight groups", v_s.len(), pooled_m.len()),
        });
    }
    let tokens = if v_s.len() == 1 { v_s[0] } else { tape.concat(v_s, 0)? };
    let weights = if pooled_m.len() == 1 { pooled_m[0] } else { tape.concat(pooled_m, 0)? };
    tape.weighted_mean(tokens, weights)
}

/// `sigmoid(mlp(r))` as a scalar.
pub fn score<F: Real>(tape: &mut Tape<F>, r: Var, mlp: &TwoLayer<Var>) -> Result<Var, AutodiffError> {
    let logit = mlp.forward(tape, r)?;
    let logit = tape.reshape(logit, &[])?;
    tape.sigmoid(logit)
}

/// Plain-value form of [`aggregate_global`].
pub fn aggregate_global_values<F: Real>(v_s: &[Tensor<F>], pooled_m: &[Tensor<F>]) -> Result<Tensor<F>, AutodiffError> {
    let mut tape = Tape::new();
    let vs: Vec<Var> = v_s.iter().map(|t| tape.constant(t.clone())).collect();
    let ms: Vec<Var> = pooled_m.iter().map(|t| tape.constant(t.clone())).collect();
    let r = aggregate_global(&mut tape, &vs, &ms)?;
    Ok(tape.value(r).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adverb {
    Highly,
    Moderately,
    Slightly,
}

impl Adverb {
    pub fn as_str(self) -> &'static str {
        match self {
            Adverb::Highly => "highly",
            Adverb::Moderately => "moderately",
            Adverb::Slightly => "slightly",
        }
    }

    pub fn indication_text(self) -> String {
        format!("with {} suspicious feature:", self.as_str())
    }
}

impl fmt::Display for Adverb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Score cut points for the adverb. Both are inclusive lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { low: 0.3, high: 0.7 }
    }
}

impl Thresholds {
    pub fn new(low: f64, high: f64) -> Result<Self, Error> {
        let t = Self { low, high };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if (0.0..=1.0).contains(&self.low) && (0.0..=1.0).contains(&self.high) && self.low < self.high {
            Ok(())
        } else {
            Err(Error::Config(format!("thresholds need 0 <= low < high <= 1, got ({}, {})", self.low, self.high)))
        }
    }
}

pub fn select_adverb(score: f64, thresholds: Thresholds) -> Result<Adverb, Error> {
    thresholds.validate()?;
    Ok(if score >= thresholds.high {
        Adverb::Highly
    } else if score >= thresholds.low {
        Adverb::Moderately
    } else {
        Adverb::Slightly
    })
}

/// Output of the selector and scorer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult<F> {
    /// Global anomaly vector, `[D_enc]`.
    pub r: Tensor<F>,
    pub score: f64,
    /// Selected tokens per crop, `[cells×D_enc]` each.
    pub v_s: Vec<Tensor<F>>,
    /// Pooled significance per crop, `[cells]` each.
    pub pooled_m: Vec<Tensor<F>>,
}

/// One contiguous group of the language-model input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment<'a, F> {
    OriginalTokens(&'a [Tensor<f32>]),
    Text(&'a str),
    Selected { r: &'a Tensor<F>, v_s: &'a [Tensor<F>] },
}

/// Token-sequence layout: original tokens, indication text, then `r`
/// followed by the selected tokens in crop order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptLayout<F> {
    pub original_tokens: Vec<Tensor<f32>>,
    pub text: String,
    pub r: Tensor<F>,
    pub v_s: Vec<Tensor<F>>,
    pub adverb: Adverb,
    pub thresholds: Thresholds,
    pub score: f64,
}

/// Machine-readable summary of a [`PromptLayout`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub adverb: Adverb,
    pub text: String,
    pub n_original: usize,
    /// Selected tokens, not counting `r`.
    pub n_selected: usize,
    pub score: f64,
}

impl<F: Real> PromptLayout<F> {
    pub fn segments(&self) -> [Segment<'_, F>; 3] {
        [
            Segment::OriginalTokens(&self.original_tokens),
            Segment::Text(&self.text),
            Segment::Selected { r: &self.r, v_s: &self.v_s },
        ]
    }

    pub fn n_original(&self) -> usize {
        self.original_tokens.iter().map(Tensor::rows).sum()
    }

    pub fn n_selected(&self) -> usize {
        self.v_s.iter().map(Tensor::rows).sum()
    }

    pub fn summary(&self) -> PromptSummary {
        PromptSummary {
            adverb: self.adverb,
            text: self.text.clone(),
            n_original: self.n_original(),
            n_selected: self.n_selected(),
            score: self.score,
        }
    }
}

pub fn assemble_prompt<F: Real>(
    bundle: &FeatureBundle,
    selection: &SelectionResult<F>,
    thresholds: Thresholds,
) -> Result<PromptLayout<F>, Error> {
    if selection.v_s.len() != bundle.layout.n_crops {
        return Err(Error::Data(format!(
            "selection has {} crops, bundle has {}",
            selection.v_s.len(),
            bundle.layout.n_crops
        )));
    }
    let adverb = select_adverb(selection.score, thresholds)?;
    Ok(PromptLayout {
        original_tokens: bundle.v_final.clone(),
        text: adverb.indication_text(),
        r: selection.r.clone(),
        v_s: selection.v_s.clone(),
        adverb,
        thresholds,
        score: selection.score,
    })
}
