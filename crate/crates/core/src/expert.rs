//! Full forward pass of the anomaly expert over one feature bundle.

use rayon::prelude::*;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::features::FeatureBundle;
use crate::ltfm::{significance_image, Descriptions, SignificanceMap, SignificanceVars};
use crate::params::{ExpertConfig, ExpertParams, ExpertTensors};
use crate::scoring::{aggregate_global, score, SelectionResult};
use crate::selector::{pool_matrix, select_crop};
use crate::Error;

/// Bundle tensors registered on a tape as constants.
#[derive(Debug, Clone)]
pub struct BundleVars {
    pub v_final: Vec<Var>,
    pub v_levels: Vec<Vec<Var>>,
}

/// Every intermediate handle of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub significance: SignificanceVars,
    pub v_s: Vec<Var>,
    pub pooled_m: Vec<Var>,
    pub r: Var,
    pub score: Var,
}

pub fn check_compatible(config: &ExpertConfig, bundle: &FeatureBundle) -> Result<(), Error> {
    if bundle.layout.g != config.g || bundle.d_enc != config.d_enc {
        return Err(Error::Data(format!(
            "bundle has g={} d_enc={}, model expects g={} d_enc={}",
            bundle.layout.g, bundle.d_enc, config.g, config.d_enc
        )));
    }
    bundle.validate()?;
    Ok(())
}

pub fn bind_bundle<F: Real>(tape: &mut Tape<F>, bundle: &FeatureBundle) -> BundleVars {
    BundleVars {
        v_final: bundle.v_final.iter().map(|t| tape.constant(t.cast())).collect(),
        v_levels: bundle.v_levels.iter().map(|l| l.iter().map(|t| tape.constant(t.cast())).collect()).collect(),
    }
}

/// Significance, selection, aggregation and score. `pool` is the
/// [`pool_matrix`] for `config`.
pub fn forward<F: Real>(
    tape: &mut Tape<F>,
    input: &BundleVars,
    params: &ExpertTensors<Var>,
    config: &ExpertConfig,
    pool: Var,
) -> Result<ForwardVars, Error> {
    let significance = significance_image(tape, &input.v_levels, params)?;
    let mut v_s = Vec::with_capacity(input.v_final.len());
    let mut pooled_m = Vec::with_capacity(input.v_final.len());
    for (&v, &m) in input.v_final.iter().zip(&significance.averaged) {
        let (sel, pm) = select_crop(tape, v, m, pool, &params.qformer, config.n_heads, config.qformer_residual)?;
        v_s.push(sel);
        pooled_m.push(pm);
    }
    let r = aggregate_global(tape, &v_s, &pooled_m)?;
    let s = score(tape, r, &params.score_mlp)?;
    Ok(ForwardVars { significance, v_s, pooled_m, r, score: s })
}

/// Everything computed for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<F> {
    pub significance: SignificanceMap<F>,
    pub descriptions: Descriptions<F>,
    pub selection: SelectionResult<F>,
}

/// Inference-only wrapper around a parameter set.
#[derive(Debug, Clone)]
pub struct ExpertModel<F> {
    pub params: ExpertParams<F>,
    pool: Tensor<F>,
}

impl<F: Real> ExpertModel<F> {
    pub fn new(params: ExpertParams<F>) -> Result<Self, Error> {
        params.config.validate()?;
        let pool = pool_matrix(params.config.g, params.config.pool_h, params.config.pool_w)?;
        Ok(Self { params, pool })
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.params.config
    }

    pub fn infer(&self, bundle: &FeatureBundle) -> Result<Inference<F>, Error> {
        check_compatible(self.config(), bundle)?;
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false, false);
        let pool = tape.constant(self.pool.clone());
        let input = bind_bundle(&mut tape, bundle);
        let out = forward(&mut tape, &input, &params, self.config(), pool)?;
        let (significance, descriptions) = out.significance.values(&tape, self.params.tau().as_f64());
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        let selection = SelectionResult {
            r: tape.value(out.r).clone(),
            score: tape.value(out.score).item().as_f64(),
            v_s: grab(&out.v_s),
            pooled_m: grab(&out.pooled_m),
        };
        Ok(Inference { significance, descriptions, selection })
    }

    pub fn score(&self, bundle: &FeatureBundle) -> Result<f64, Error> {
        Ok(self.infer(bundle)?.selection.score)
    }

    /// Scores in input order, computed in parallel.
    pub fn score_batch(&self, bundles: &[FeatureBundle]) -> Result<Vec<f64>, Error> {
        with_thread_cap(|| bundles.par_iter().map(|b| self.score(b)).collect())
    }
}

/// Thread count requested through `AOV_THREADS`, if any.
pub fn thread_cap() -> Option<usize> {
    std::env::var("AOV_THREADS").ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// Runs `f` on a rayon pool capped by `AOV_THREADS`, or on the global pool.
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap().and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_generate, SynthConfig};

    fn setup() -> (ExpertModel<f64>, Vec<FeatureBundle>) {
        let cfg = ExpertConfig { g: 4, d_enc: 8, d: 8, n_heads: 2, ..ExpertConfig::default() };
        let data = synth_generate(&SynthConfig { n_classes: 1, images_per_class: 4, g: 4, d_enc: 8, patch_size: 2, ..SynthConfig::default() }).unwrap();
        (ExpertModel::new(ExpertParams::init(&cfg, 1).unwrap()).unwrap(), data)
    }

    #[test]
    fn inference_shapes_and_ranges() {
        let (model, data) = setup();
        let inf = model.infer(&data[0]).unwrap();
        assert_eq!(inf.significance.averaged.len(), 2);
        assert_eq!(inf.significance.per_level.len(), 4);
        assert_eq!(inf.selection.v_s[1].shape(), &[4, 8]);
        assert_eq!(inf.selection.r.shape(), &[8]);
        assert!(inf.selection.score > 0.0 && inf.selection.score < 1.0);
        assert!(inf.significance.averaged.iter().flat_map(|m| m.data()).all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn batch_matches_sequential() {
        let (model, data) = setup();
        let batch = model.score_batch(&data).unwrap();
        let seq: Vec<f64> = data.iter().map(|b| model.score(b).unwrap()).collect();
        assert_eq!(batch, seq);
    }

    #[test]
    fn mismatched_bundle_is_a_data_error() {
        let (model, _) = setup();
        let other = synth_generate(&SynthConfig { n_classes: 1, images_per_class: 1, g: 5, d_enc: 8, patch_size: 2, ..SynthConfig::default() }).unwrap();
        assert!(matches!(model.infer(&other[0]), Err(Error::Data(_))));
    }
}
