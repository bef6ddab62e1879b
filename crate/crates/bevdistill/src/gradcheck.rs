//! Central finite-difference verification of tape gradients.
//!
//! [`finite_diff_check`] evaluates a scalar function twice per parameter
//! element, `(f(p+h) - f(p-h)) / 2h`, and compares against the gradients the
//! tape produced at the unperturbed point. The function under test must be
//! deterministic; the checker rebuilds the tape for every probe.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by the verification suites (`h = 1e-5`).
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative tolerance every differentiable path must satisfy.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// Worst relative error over all parameter elements.
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst element.
    pub worst_param: String,
    /// Flat element index of the worst element within that parameter.
    pub worst_index: usize,
    /// Per-parameter worst relative error, in input order.
    pub per_param: Vec<(String, f64)>,
}

impl FiniteDiffReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Checks the tape gradient of `f` against central finite differences.
///
/// `params` supplies named tensors; each is placed on a fresh tape (with
/// gradients enabled) and handed to `f` in order. `f` returns the scalar
/// loss variable. Parameters the loss does not reach are treated as having
/// zero gradient.
pub fn finite_diff_check<F>(
    params: &[(&str, Tensor)],
    h: f64,
    f: F,
) -> Result<FiniteDiffReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = f(&tape, &vars)?;
        let value = tape.value(loss).scalar_value()?;
        let grads = tape.backward(loss)?;
        let out = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        Ok((value, out))
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = eval(&base)?;

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        per_param: Vec::new(),
    };

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut param_worst = 0.0f64;
        for ei in 0..tensor.len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[ei] += h;
            let (f_plus, _) = eval(&plus)?;

            let mut minus = base.clone();
            minus[pi].data_mut()[ei] -= h;
            let (f_minus, _) = eval(&minus)?;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let tape_grad = analytic[pi]
                .as_ref()
                .map(|g| g.data()[ei])
                .unwrap_or(0.0);
            let err = rel_err(tape_grad, numeric);
            if err > param_worst {
                param_worst = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.to_string();
                report.worst_index = ei;
            }
        }
        report.per_param.push((name.to_string(), param_worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        // f(p) = ||p||^2; central differences are exact for quadratics.
        let data: Vec<f64> = (0..10)
            .map(|i| 0.2 + 0.08 * i as f64) // bounded away from zero
            .collect();
        let p = Tensor::matrix(2, 5, data).with_grad();
        let report = finite_diff_check(&[("p", p)], DEFAULT_STEP, |tape, vars| {
            tape.mse_mean(vars[0], tape.leaf(Tensor::matrix(2, 5, vec![0.0; 10])))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn softmax_mse_composition_passes() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 5 % 7) as f64 - 3.0) / 4.0).collect();
        let p = Tensor::matrix(3, 4, data).with_grad();
        let report = finite_diff_check(&[("p", p)], DEFAULT_STEP, |tape, vars| {
            let y = tape.softmax_rows(vars[0]);
            tape.mse_mean(y, tape.leaf(Tensor::matrix(3, 4, vec![0.25; 12])))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        // Negative control: the first evaluation (the one whose tape
        // gradient is recorded) computes 2*sum(p); every finite-difference
        // probe afterwards computes sum(p). The mismatch must be flagged.
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let p = Tensor::matrix(1, 3, vec![0.4, -0.3, 0.9]).with_grad();
        let report = finite_diff_check(&[("p", p)], DEFAULT_STEP, |tape, vars| {
            let n = calls.get();
            calls.set(n + 1);
            let factor = if n == 0 { 2.0 } else { 1.0 };
            Ok(tape.scale(tape.sum_all(vars[0]), factor))
        })
        .unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE), "{report:?}");
        assert_eq!(report.worst_param, "p");
    }
}
