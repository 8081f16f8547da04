//! Finite-difference gradient checking.
//!
//! Compares analytic (tape) gradients against central differences in 64-bit
//! precision. Single precision is too coarse for step sizes this small, so
//! the checker is fixed to `f64`.

use super::{backward, Tape, Tensor};
use crate::error::{Error, Result};

/// Central-difference step. Chosen for f64: small enough for truncation
/// error, large enough to dodge round-off.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude relative error is meaningless; entries whose values
/// or whose difference fall under it are judged on absolute error instead.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Relative error, or absolute error when both magnitudes are tiny.
    pub error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.error.partial_cmp(&b.error).unwrap())
    }
}

/// Checks `f`'s analytic gradients against central finite differences for
/// every element of every input. `f` must be deterministic and return a
/// scalar tensor.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    gradcheck_with_step(f, inputs, tol, DEFAULT_STEP)
}

pub fn gradcheck_with_step<F>(
    f: F,
    inputs: &[Tensor<f64>],
    tol: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    // Analytic pass over differentiable leaf copies.
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::leaf(t.shape(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let tape = Tape::new();
    let loss = f(&tape, &leaves)?;
    if loss.numel() != 1 {
        return Err(Error::contract("gradcheck", "function must return a scalar"));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric(format!(
            "gradcheck: non-finite loss {} at the base point",
            loss.item()
        )));
    }
    backward(&tape, &loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inactive();
        let out = f(&tape, points)?;
        Ok(out.item())
    };

    let mut entries = Vec::new();
    let mut max_error = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detached()).collect();
    for (i, input) in inputs.iter().enumerate() {
        let base = input.data().to_vec();
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus[j] += step;
            probe[i] = Tensor::from_vec(input.shape(), plus)?;
            let f_plus = eval(&probe)?;

            let mut minus = base.clone();
            minus[j] -= step;
            probe[i] = Tensor::from_vec(input.shape(), minus)?;
            let f_minus = eval(&probe)?;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradcheck: non-finite output perturbing input {i} element {j} \
                     (f+ = {f_plus}, f- = {f_minus})"
                )));
            }

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[i][j];
            let diff = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs());
            // Finite differences carry an absolute noise floor of roughly
            // eps_machine * |f| / step; tiny gradients and tiny differences
            // are judged absolutely, everything else relatively.
            let error = if denom < ABS_FALLBACK || diff < ABS_FALLBACK {
                diff
            } else {
                diff / denom
            };
            if error > max_error {
                max_error = error;
            }
            entries.push(GradCheckEntry {
                input: i,
                element: j,
                analytic: a,
                numeric,
                error,
            });
        }
        probe[i] = input.detached();
    }

    Ok(GradCheckReport {
        entries,
        max_error,
        tol,
        passed: max_error < tol,
    })
}
