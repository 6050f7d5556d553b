//! Look-twice feature matching.
//!
//! The resized original image (crop 0) is looked at a second time: per level,
//! its adapted tokens are fused along the token axis, concatenated with the
//! learnable positive/negative embeddings and passed through per-level MLPs
//! to produce abnormality/normality descriptions `d±`. Every adapted patch
//! token then gets the pairwise softmax of its cosine similarities to `d⁺`
//! and `d⁻`, and the four level maps are averaged.

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};
use crate::params::{Affine, ExpertTensors, TwoLayer, LEVELS};

/// Per-level description vectors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptions<F> {
    pub d_plus: Vec<Tensor<F>>,
    pub d_minus: Vec<Tensor<F>>,
}

/// Per-crop token weights in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceMap<F> {
    /// `per_level[level][crop]`, each `[g²]`.
    pub per_level: Vec<Vec<Tensor<F>>>,
    /// Level average per crop, each `[g²]`.
    pub averaged: Vec<Tensor<F>>,
    pub tau: f64,
}

/// Tape handles produced by [`significance_image`].
#[derive(Debug, Clone)]
pub struct SignificanceVars {
    pub per_level: Vec<Vec<Var>>,
    pub averaged: Vec<Var>,
    pub d_plus: Vec<Var>,
    pub d_minus: Vec<Var>,
}

/// Per-token linear compression `D_enc → D`.
pub fn adapt<F: Real>(tape: &mut Tape<F>, v_level: Var, adapter: &Affine<Var>) -> Result<Var, AutodiffError> {
    adapter.forward(tape, v_level)
}

/// Linear map across the token axis: `out[d] = Σ_t w_t·v[t, d] + b_d`.
pub fn lookback_fuse<F: Real>(tape: &mut Tape<F>, v0_adapted: Var, lookback: &Affine<Var>) -> Result<Var, AutodiffError> {
    let fused = tape.linear(lookback.weight, v0_adapted, lookback.bias)?;
    let d = tape.shape(fused)[1];
    tape.reshape(fused, &[d])
}

/// `mlp(concat(embedding, fused))`.
pub fn describe<F: Real>(tape: &mut Tape<F>, fused: Var, embedding: Var, mlp: &TwoLayer<Var>) -> Result<Var, AutodiffError> {
    let x = tape.concat(&[embedding, fused], 0)?;
    mlp.forward(tape, x)
}

/// Significance of every token of one adapted level map.
pub fn significance_level<F: Real>(
    tape: &mut Tape<F>,
    v_adapted: Var,
    d_plus: Var,
    d_minus: Var,
    tau: Var,
) -> Result<Var, AutodiffError> {
    let s_plus = tape.cosine_rows(v_adapted, d_plus)?;
    let s_minus = tape.cosine_rows(v_adapted, d_minus)?;
    tape.softmax_pair(s_plus, s_minus, tau)
}

/// Significance maps for every crop. `levels[level][crop]` are the raw
/// `[g²×D_enc]` level features. Descriptions are computed once from crop 0
/// and shared by all crops.
pub fn significance_image<F: Real>(
    tape: &mut Tape<F>,
    levels: &[Vec<Var>],
    params: &ExpertTensors<Var>,
) -> Result<SignificanceVars, AutodiffError> {
    if levels.len() != LEVELS {
        return Err(AutodiffError::ShapeMismatch { op: "significance_image", detail: format!("{} levels", levels.len()) });
    }
    let n_crops = levels[0].len();
    let mut per_level = Vec::with_capacity(LEVELS);
    let (mut d_plus, mut d_minus) = (Vec::new(), Vec::new());
    for (i, crops) in levels.iter().enumerate() {
        let adapted = crops
            .iter()
            .map(|&v| adapt(tape, v, &params.adapters[i]))
            .collect::<Result<Vec<_>, _>>()?;
        let fused = lookback_fuse(tape, adapted[0], &params.lookback[i])?;
        let dp = describe(tape, fused, params.e_plus, &params.mlp_plus[i])?;
        let dm = describe(tape, fused, params.e_minus, &params.mlp_minus[i])?;
        let maps = adapted
            .iter()
            .map(|&a| significance_level(tape, a, dp, dm, params.tau))
            .collect::<Result<Vec<_>, _>>()?;
        d_plus.push(dp);
        d_minus.push(dm);
        per_level.push(maps);
    }
    let mut averaged = Vec::with_capacity(n_crops);
    for j in 0..n_crops {
        let mut acc = per_level[0][j];
        for level in &per_level[1..] {
            acc = tape.add(acc, level[j])?;
        }
        averaged.push(tape.scale(acc, F::from_f64(1.0 / LEVELS as f64))?);
    }
    Ok(SignificanceVars { per_level, averaged, d_plus, d_minus })
}

impl SignificanceVars {
    pub fn values<F: Real>(&self, tape: &Tape<F>, tau: f64) -> (SignificanceMap<F>, Descriptions<F>) {
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        let map = SignificanceMap {
            per_level: self.per_level.iter().map(|l| grab(l)).collect(),
            averaged: grab(&self.averaged),
            tau,
        };
        (map, Descriptions { d_plus: grab(&self.d_plus), d_minus: grab(&self.d_minus) })
    }
}
