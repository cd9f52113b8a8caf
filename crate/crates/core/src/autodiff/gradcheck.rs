use crate::error::Result;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Worst-case comparison for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryReport {
    pub param: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_param: Vec<EntryReport>,
    /// Every entry over tolerance, in parameter order.
    pub failures: Vec<EntryReport>,
    pub max_rel_err: f64,
    pub n_entries: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&EntryReport> {
        self.per_param
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f(params)` against central
/// differences `(f(p + eps) − f(p − eps)) / 2eps`, entry by entry.
///
/// `f` receives a fresh tape and one leaf per parameter, in order.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    drop(tape);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut failures = Vec::new();
    let mut n_entries = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst = EntryReport {
            param: pi,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_err: 0.0,
        };
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[k];
            let err = relative_error(a, numeric);
            // NaN compares false; force it to register as a failure
            let err = if err.is_nan() { f64::INFINITY } else { err };
            let entry = EntryReport { param: pi, worst_index: k, analytic: a, numeric, rel_err: err };
            if err >= tol {
                failures.push(entry.clone());
            }
            if err > worst.rel_err {
                worst = entry;
            }
            n_entries += 1;
        }
        per_param.push(worst);
    }
    let max_rel_err = per_param.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, failures, max_rel_err, n_entries, tol })
}
