//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Outcome of comparing tape gradients to finite differences for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks `d f / d x` for a scalar-valued `f` at `x` with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut checks = finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(checks.remove(0))
}

/// Checks the gradient with respect to each of several inputs at once.
///
/// `f` receives one leaf per entry of `inputs` (in order) and returns a
/// scalar. Every coordinate of every input is perturbed in turn.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut results = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.shape()).to_vec();
        let mut numeric = Vec::with_capacity(input.len());
        let base = input.to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            work[k] = Tensor::new(input.shape(), plus)?;
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[i] -= h;
            work[k] = Tensor::new(input.shape(), minus)?;
            let fm = eval(&work)?;
            numeric.push((fp - fm) / (2.0 * h));
        }
        work[k] = input.clone();

        let (worst, max_rel_error) = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .enumerate()
            .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
        results.push(GradCheck {
            max_rel_error,
            worst,
            analytic,
            numeric,
        });
    }
    Ok(results)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(shape_err!("gradient check needs a scalar function, got {:?}", t.shape()));
    }
    Ok(t.item())
}
