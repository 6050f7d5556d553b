//! Central-difference gradient checking in double precision.

use super::{AutodiffError, Tape, Tensor, Var};

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar-valued `f` against central
/// differences with step `h` over every coordinate of every input, returning
/// the maximum relative error.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], h: f64) -> Result<f64, AutodiffError>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    Ok(check(f, inputs, h, false)?.max_error)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KinkAwareCheck {
    /// Maximum relative error over coordinates whose probes stay on one side
    /// of every `relu` kink.
    pub max_error: f64,
    /// `(analytic, numeric)` for every compared coordinate.
    pub pairs: Vec<(f64, f64)>,
    /// Coordinates where `x + h`, `x` and `x − h` disagree on the sign of
    /// some `relu` input.
    pub straddled: usize,
}

/// [`grad_check`], except that coordinates whose two probes see different
/// `relu` sign patterns are counted rather than compared: central differences
/// across a kink do not estimate either one-sided derivative.
pub fn grad_check_kink_aware<Fun>(f: Fun, inputs: &[Tensor<f64>], h: f64) -> Result<KinkAwareCheck, AutodiffError>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    check(f, inputs, h, true)
}

fn check<Fun>(f: Fun, inputs: &[Tensor<f64>], h: f64, kink_aware: bool) -> Result<KinkAwareCheck, AutodiffError>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Vec<bool>), AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(AutodiffError::NotScalar(tape.shape(out).to_vec()));
        }
        let signs = if kink_aware { tape.relu_signs() } else { Vec::new() };
        Ok((tape.value(out).item(), signs))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let base_signs = if kink_aware { tape.relu_signs() } else { Vec::new() };

    let mut report = KinkAwareCheck::default();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let (fp, sp) = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let (fm, sm) = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            if sp != sm || sp != base_signs {
                report.straddled += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            report.max_error = report.max_error.max(relative_error(analytic.data()[i], numeric));
            report.pairs.push((analytic.data()[i], numeric));
        }
    }
    Ok(report)
}
