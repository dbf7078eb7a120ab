//! Central finite-difference verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    /// Set when a function value or gradient was not finite.
    pub non_finite: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_error <= self.tol
    }
}

/// Per-coordinate errors are `|a - n| / max(|a|, |n|, floor)`, where `floor` is
/// this fraction of the largest gradient magnitude. Coordinates whose true
/// gradient is many orders below the rest are then compared on the scale of
/// the whole gradient instead of amplifying round-off.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Compare the tape gradient of scalar `f` at `point` with central differences.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point, and must return a scalar node.
pub fn grad_check<F>(mut f: F, point: &Tensor<f64>, step: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, Var) -> Var,
{
    let eval = |f: &mut F, p: Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&mut tape, x);
        tape.value(y).item()
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x);
    let y0 = tape.value(y).item();
    let grads = tape.backward(y);
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; point.numel()],
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic,
        numeric: vec![0.0; point.numel()],
        tol,
        non_finite: None,
    };
    if !y0.is_finite() {
        report.non_finite = Some(format!("function value {} at the unperturbed point", y0));
        return report;
    }

    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(&mut f, plus), eval(&mut f, minus));
        if !fp.is_finite() || !fm.is_finite() {
            report.non_finite = Some(format!("non-finite function value perturbing coordinate {}", i));
            return report;
        }
        report.numeric[i] = (fp - fm) / (2.0 * step);
        if !report.analytic[i].is_finite() {
            report.non_finite = Some(format!("non-finite analytic gradient at coordinate {}", i));
            return report;
        }
    }

    let scale = report
        .analytic
        .iter()
        .chain(&report.numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * RELATIVE_FLOOR).max(f64::MIN_POSITIVE);
    for i in 0..point.numel() {
        let (a, n) = (report.analytic[i], report.numeric[i]);
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
    }
    report
}
