//! Central-difference gradient verification.
//!
//! This is the independent oracle for the whole autograd engine: a loss is
//! evaluated twice per parameter element with the element nudged up and
//! down, and the slope is compared against the gradient the tape produced.

use super::{Prng, Tape, Tensor, TensorError};

#[derive(Debug)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    /// Total parameter elements probed.
    pub checked: usize,
    pub tol: f64,
    /// (param index, element index, analytic, numeric) for the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `f` must be a pure function of the tensors in `params` (plus constants):
/// it is re-evaluated many times on non-recording tapes while elements are
/// perturbed by `step`. Every param must require a gradient. The error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`, so it behaves as
/// a relative error for large gradients and an absolute one near zero.
///
/// Generic over the loss error type so model- and objective-level losses
/// can be checked directly.
pub fn finite_diff_check<F, E>(
    f: F,
    params: &[Tensor],
    step: f64,
    tol: f64,
) -> std::result::Result<FiniteDiffReport, E>
where
    F: Fn(&Tape) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    if params.is_empty() {
        return Err(TensorError::Contract("finite_diff_check: no params given".into()).into());
    }
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            return Err(TensorError::Contract(format!(
                "finite_diff_check: param {i} does not require a gradient"
            ))
            .into());
        }
        p.zero_grad();
    }

    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();
    for p in params {
        p.zero_grad();
    }

    let eval = |tape: &Tape| -> std::result::Result<f64, E> { Ok(f(tape)?.item()?) };

    let mut report =
        FiniteDiffReport { max_rel_err: 0.0, checked: 0, tol, worst: None };
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let original = p.with_data(|d| d[e]);
            p.update_data(|d| d[e] = original + step);
            let plus = eval(&Tape::disabled())?;
            p.update_data(|d| d[e] = original - step);
            let minus = eval(&Tape::disabled())?;
            p.update_data(|d| d[e] = original);

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Convenience for tests: a small tensor with entries in [-1, 1) that
/// requires a gradient.
pub fn random_param(rows: usize, cols: usize, prng: &mut Prng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| prng.next_f64() * 2.0 - 1.0).collect();
    let t = Tensor::from_vec(rows, cols, data).expect("finite by construction");
    t.set_requires_grad(true);
    t
}
