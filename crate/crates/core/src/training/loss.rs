//! Class-balanced binary cross entropy.

use crate::autodiff::{AutodiffError, Real, Tape, Tensor, Var};

/// Probability clamp applied before the logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Per-class weights used for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceWeights {
    pub positive: f64,
    pub negative: f64,
    /// The batch held a single class, so plain BCE was used.
    pub single_class: bool,
}

impl BceWeights {
    /// `n / (2·n_pos)` and `n / (2·n_neg)`; all ones for a single-class batch.
    pub fn for_labels(labels: &[bool]) -> Self {
        let n = labels.len() as f64;
        let n_pos = labels.iter().filter(|&&y| y).count() as f64;
        let n_neg = n - n_pos;
        if n_pos == 0.0 || n_neg == 0.0 {
            Self { positive: 1.0, negative: 1.0, single_class: true }
        } else {
            Self { positive: n / (2.0 * n_pos), negative: n / (2.0 * n_neg), single_class: false }
        }
    }
}

/// Balanced BCE of `scores: [n]` against boolean labels.
pub fn balanced_bce<F: Real>(tape: &mut Tape<F>, scores: Var, labels: &[bool]) -> Result<(Var, BceWeights), AutodiffError> {
    if labels.is_empty() {
        return Err(AutodiffError::InvalidArgument("empty batch".into()));
    }
    let w = BceWeights::for_labels(labels);
    let targets: Vec<F> = labels.iter().map(|&y| if y { F::one() } else { F::zero() }).collect();
    let weights: Vec<F> = labels.iter().map(|&y| F::from_f64(if y { w.positive } else { w.negative })).collect();
    let loss = tape.bce(scores, &targets, &weights, F::from_f64(BCE_EPS))?;
    Ok((loss, w))
}

/// Plain-value form of [`balanced_bce`].
pub fn balanced_bce_value(scores: &[f64], labels: &[bool]) -> Result<(f64, BceWeights), AutodiffError> {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::vector(scores.to_vec()));
    let (loss, w) = balanced_bce(&mut tape, s, labels)?;
    Ok((tape.value(loss).item(), w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;

    fn plain_bce(s: &[f64], y: &[bool]) -> f64 {
        s.iter().zip(y).map(|(&s, &y)| if y { -s.ln() } else { -(1.0 - s).ln() }).sum::<f64>() / s.len() as f64
    }

    #[test]
    fn half_half_is_ln2() {
        let (loss, w) = balanced_bce_value(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(!w.single_class);
    }

    #[test]
    fn near_perfect_scores_hit_the_clamp() {
        let (loss, _) = balanced_bce_value(&[1.0 - 1e-7, 1e-7, 1.0, 0.0], &[true, false, true, false]).unwrap();
        let expected = -(1.0f64 - 1e-7).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!(loss <= 1.61e-6);
    }

    #[test]
    fn imbalanced_hand_case() {
        // n = 4, one positive: w_pos = 2, w_neg = 2/3.
        let s = [0.8, 0.3, 0.1, 0.6];
        let y = [true, false, false, false];
        let expected = (2.0 * -(0.8f64).ln() + (2.0 / 3.0) * (-(0.7f64).ln() - (0.9f64).ln() - (0.4f64).ln())) / 4.0;
        let (loss, w) = balanced_bce_value(&s, &y).unwrap();
        assert_eq!((w.positive, w.negative), (2.0, 2.0 / 3.0));
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn single_class_falls_back() {
        let s = [0.2, 0.9, 0.6];
        let (loss, w) = balanced_bce_value(&s, &[true; 3]).unwrap();
        assert!(w.single_class);
        assert!((loss - plain_bce(&s, &[true; 3])).abs() < 1e-12);
        assert!(balanced_bce_value(&[], &[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels = [true, false, false, true, false];
        let s = Tensor::vector(vec![0.3, 0.6, 0.2, 0.9, 0.45]);
        let err = grad_check(|tape, v| Ok(balanced_bce(tape, v[0], &labels)?.0), &[s], 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn equal_counts_equal_plain_mean(s in proptest::collection::vec(0.01f64..0.99, 8)) {
            let y = [true, false, true, false, false, true, true, false];
            let (loss, _) = balanced_bce_value(&s, &y).unwrap();
            prop_assert!((loss - plain_bce(&s, &y)).abs() < 1e-12);
        }

        #[test]
        fn loss_is_finite_and_non_negative(s in proptest::collection::vec(0.0f64..=1.0, 1..20), seed in 0u64..1000) {
            let y: Vec<bool> = (0..s.len()).map(|i| (seed >> (i % 10)) & 1 == 1).collect();
            let (loss, _) = balanced_bce_value(&s, &y).unwrap();
            prop_assert!(loss.is_finite() && loss >= 0.0);
        }
    }
}
