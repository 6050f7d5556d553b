//! How well significance maps point at a known anomaly region.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::expert::ExpertModel;
use crate::features::FeatureBundle;
use crate::ltfm::SignificanceMap;
use crate::Error;

/// Mean level-averaged significance inside and outside `region`, pooled over
/// crops. `None` when either side is empty.
pub fn region_contrast<F: Real>(sig: &SignificanceMap<F>, region: &[u32]) -> Option<(f64, f64)> {
    let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for map in &sig.averaged {
        let mut inside = vec![false; map.numel()];
        for &t in region {
            *inside.get_mut(t as usize)? = true;
        }
        for (m, &is_in) in map.data().iter().zip(&inside) {
            if is_in {
                sum_in += m.as_f64();
                n_in += 1;
            } else {
                sum_out += m.as_f64();
                n_out += 1;
            }
        }
    }
    (n_in > 0 && n_out > 0).then(|| (sum_in / n_in as f64, sum_out / n_out as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Bundles whose region mean exceeds the outside mean.
    pub hits: usize,
    /// Anomalous bundles with a recorded region.
    pub total: usize,
    pub fraction: f64,
}

pub fn localization<F: Real>(model: &ExpertModel<F>, bundles: &[FeatureBundle]) -> Result<Localization, Error> {
    let (mut hits, mut total) = (0, 0);
    for b in bundles.iter().filter(|b| b.label.is_anomalous() && !b.anomaly_region.is_empty()) {
        let inf = model.infer(b)?;
        let (inside, outside) = region_contrast(&inf.significance, &b.anomaly_region)
            .ok_or_else(|| Error::Data("anomaly region covers no or every token".into()))?;
        total += 1;
        hits += usize::from(inside > outside);
    }
    let fraction = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok(Localization { hits, total, fraction })
}
