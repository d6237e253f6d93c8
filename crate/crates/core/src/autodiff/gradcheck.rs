use serde::Serialize;

use crate::error::Result;
use crate::tensor::Tensor;

use super::{NodeId, Tape};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares tape gradients of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node. The relative error of entry `i` is
/// `|a_i - n_i| / max(|a_i|, |n_i|, floor)`; non-finite values fail.
pub fn grad_check<F>(f: F, x: &Tensor, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let analytic = tape.backward(root)?.get(leaf)?.data().to_vec();

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(t);
        let root = f(&mut tape, leaf)?;
        tape.value(root).item()
    };

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * opts.step));
    }

    let mut max_abs_error: f64 = 0.0;
    let mut max_rel_error: f64 = 0.0;
    let mut finite = true;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        if !a.is_finite() || !n.is_finite() {
            finite = false;
            continue;
        }
        let abs = (a - n).abs();
        max_abs_error = max_abs_error.max(abs);
        max_rel_error = max_rel_error.max(abs / a.abs().max(n.abs()).max(opts.floor));
    }
    if !finite {
        max_rel_error = f64::INFINITY;
    }
    Ok(GradCheckReport {
        passed: finite && max_rel_error <= opts.tol,
        analytic,
        numeric,
        max_abs_error,
        max_rel_error,
    })
}
