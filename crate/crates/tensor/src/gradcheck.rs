//! Central finite-difference verification of tape gradients.

use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Coordinates with `|x| <= guard` are skipped (kinks of relu-like ops).
    pub kink_guard: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            kink_guard: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(input, flat index)` where the max was attained.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= tolerance
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| invalid("grad_check", "function is not scalar-valued", tape.shape(out)))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], |g| g.data().to_vec()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x = input.data()[j];
            if opts.kink_guard.is_some_and(|guard| x.abs() <= guard) {
                report.skipped += 1;
                continue;
            }
            probe[i].data_mut()[j] = x + opts.eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x - opts.eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
