//! Seeded planted-anomaly features standing in for a pretrained encoder.
//!
//! Every class `c` owns a direction `μ_c` (norm `class_norm`) and a unit
//! anomaly direction `a_c`. A normal token is `μ_c + ε`; an anomalous bundle
//! shifts a contiguous `patch_size × patch_size` block of tokens by
//! `anomaly_shift_norm · a_c` in the final features and in all four levels,
//! at the same token positions in every crop.
//!
//! `noise_sigma` is the expected norm of a token's noise vector: each
//! coordinate of `ε` is drawn from `N(0, noise_sigma² / d_enc)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CropLayout, FeatureBundle, Label};
use crate::autodiff::Tensor;
use crate::params::LEVELS;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub anomaly_fraction: f64,
    pub g: usize,
    pub d_enc: usize,
    pub n_crops: usize,
    /// Side of the planted square, in tokens.
    pub patch_size: usize,
    pub anomaly_shift_norm: f64,
    pub noise_sigma: f64,
    pub class_norm: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            images_per_class: 200,
            anomaly_fraction: 0.5,
            g: 8,
            d_enc: 64,
            n_crops: 2,
            patch_size: 3,
            anomaly_shift_norm: 1.0,
            noise_sigma: 0.25,
            class_norm: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return bad("anomaly_fraction must lie in (0, 1)");
        }
        if self.patch_size == 0 || self.patch_size >= self.g {
            return bad("patch_size must be in [1, g)");
        }
        if self.n_classes == 0 || self.images_per_class == 0 || self.d_enc == 0 || self.n_crops == 0 {
            return bad("counts and dimensions must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.anomaly_shift_norm >= 0.0 && self.class_norm >= 0.0) {
            return bad("norms must be non-negative");
        }
        Ok(())
    }

    /// Anomalous images per class.
    pub fn anomalous_per_class(&self) -> usize {
        (self.anomaly_fraction * self.images_per_class as f64).round() as usize
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates `n_classes × images_per_class` bundles, class-major. The output
/// is a pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<FeatureBundle>, Error> {
    cfg.validate()?;
    let (g, d, p) = (cfg.g, cfg.d_enc, cfg.patch_size);
    let t = g * g;
    let coord_sigma = cfg.noise_sigma / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_classes)
        .map(|_| {
            let mu = unit_vector(&mut rng, d).into_iter().map(|x| x * cfg.class_norm).collect();
            let a = unit_vector(&mut rng, d);
            (mu, a)
        })
        .collect();

    let mut out = Vec::with_capacity(cfg.n_classes * cfg.images_per_class);
    for (class_id, (mu, a)) in classes.iter().enumerate() {
        let mut anomalous = vec![false; cfg.images_per_class];
        anomalous[..cfg.anomalous_per_class()].fill(true);
        anomalous.shuffle(&mut rng);
        for &is_anomalous in &anomalous {
            let region: Vec<u32> = if is_anomalous {
                let r0 = rng.random_range(0..=g - p);
                let c0 = rng.random_range(0..=g - p);
                (0..p).flat_map(|dr| (0..p).map(move |dc| ((r0 + dr) * g + c0 + dc) as u32)).collect()
            } else {
                Vec::new()
            };
            let mut in_region = vec![false; t];
            for &i in &region {
                in_region[i as usize] = true;
            }
            let make = |rng: &mut ChaCha8Rng| {
                let mut data = Vec::with_capacity(t * d);
                for &shifted in &in_region {
                    for k in 0..d {
                        let eps: f64 = StandardNormal.sample(rng);
                        let mut v = mu[k] + coord_sigma * eps;
                        if shifted {
                            v += cfg.anomaly_shift_norm * a[k];
                        }
                        data.push(v as f32);
                    }
                }
                Tensor::new(vec![t, d], data).expect("shape")
            };
            let v_final = (0..cfg.n_crops).map(|_| make(&mut rng)).collect();
            let v_levels = (0..LEVELS).map(|_| (0..cfg.n_crops).map(|_| make(&mut rng)).collect()).collect();
            out.push(FeatureBundle {
                layout: CropLayout { n_crops: cfg.n_crops, g },
                d_enc: d,
                v_final,
                v_levels,
                label: if is_anomalous { Label::Anomalous } else { Label::Normal },
                class_id: class_id as u32,
                anomaly_region: region,
            });
        }
    }
    Ok(out)
}

/// Stratified split: within every `(class, label)` group a seeded shuffle
/// sends `round(heldout_fraction · group size)` bundles to the held-out side.
/// Both sides keep input order.
pub fn holdout_split(bundles: Vec<FeatureBundle>, heldout_fraction: f64, seed: u64) -> Result<(Vec<FeatureBundle>, Vec<FeatureBundle>), Error> {
    if !(0.0..1.0).contains(&heldout_fraction) {
        return Err(Error::Config(format!("heldout_fraction must lie in [0, 1), got {heldout_fraction}")));
    }
    let mut groups: std::collections::BTreeMap<(u32, u8), Vec<usize>> = std::collections::BTreeMap::new();
    for (i, b) in bundles.iter().enumerate() {
        groups.entry((b.class_id, b.label.as_u8())).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heldout = vec![false; bundles.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let n = (heldout_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n] {
            heldout[i] = true;
        }
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (b, h) in bundles.into_iter().zip(heldout) {
        if h {
            held.push(b);
        } else {
            train.push(b);
        }
    }
    Ok((train, held))
}
