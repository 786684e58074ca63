//! Central-difference gradient verification.
//!
//! The numeric side re-evaluates the forward graph at perturbed leaf values
//! on a [`Precision::Double`] tape, so the difference quotient is not drowned
//! by 32-bit rounding noise. The analytic side is the production path: a
//! [`Precision::Single`] tape with its recorded backward rules. The two share
//! forward code but no derivative code, which is exactly the independence the
//! check needs.
//!
//! Piecewise-smooth graphs (relu) have measure-zero points where central
//! differences are meaningless: when the probe interval straddles a kink, the
//! two one-sided slopes disagree and no step size fixes it. Such elements are
//! detected (one-sided slope disagreement), loosely validated against the
//! subgradient envelope, and excluded from the central-difference tally. A
//! report fails if more than a few percent of elements needed exclusion.

use super::tape::{Precision, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-3;

/// Pass threshold on [`rel_err`].
pub const FD_TOLERANCE: f64 = 1e-3;

/// Relative error with an absolute floor: denominators below 1e-2 are
/// clamped, so entries near zero are compared absolutely at 1e-5 when the
/// tolerance is 1e-3.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-2);
    (a - b).abs() / denom
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst [`rel_err`] across every smooth element of every checked leaf.
    pub max_rel_err: f64,
    /// Per-leaf worst errors, in argument order.
    pub per_leaf: Vec<f64>,
    /// Elements compared.
    pub checked: usize,
    /// Elements excluded because the probe interval crossed a kink.
    pub kink_skips: usize,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE && self.kink_skips <= self.checked / 20 + 3
    }
}

/// Per-element bookkeeping shared by the leaf-based and model-based checks.
pub(crate) struct FdTally {
    pub per_leaf: Vec<f64>,
    pub checked: usize,
    pub kink_skips: usize,
}

impl FdTally {
    pub fn new(leaves: usize) -> Self {
        FdTally {
            per_leaf: vec![0.0; leaves],
            checked: 0,
            kink_skips: 0,
        }
    }

    /// Judges one element given its analytic gradient and an evaluator of
    /// the f64 forward at a given value of that element.
    pub fn judge(
        &mut self,
        leaf: usize,
        analytic: f64,
        orig: f32,
        eval: &mut dyn FnMut(f32) -> Result<f64>,
    ) -> Result<()> {
        self.checked += 1;
        let hi = (orig as f64 + FD_EPSILON) as f32;
        let lo = (orig as f64 - FD_EPSILON) as f32;
        let f_hi = eval(hi)?;
        let f_lo = eval(lo)?;
        let central = (f_hi - f_lo) / (hi as f64 - lo as f64);
        let err = rel_err(analytic, central);
        if err < FD_TOLERANCE {
            if err > self.per_leaf[leaf] {
                self.per_leaf[leaf] = err;
            }
            return Ok(());
        }
        // Central difference failed: distinguish a kink crossing from a real
        // gradient bug via the one-sided slopes.
        let f_mid = eval(orig)?;
        let slope_r = (f_hi - f_mid) / (hi as f64 - orig as f64);
        let slope_l = (f_mid - f_lo) / (orig as f64 - lo as f64);
        let jump = (slope_r - slope_l).abs();
        let scale = slope_r.abs().max(slope_l.abs()).max(1e-2);
        let envelope_err = rel_err(analytic, slope_l).min(rel_err(analytic, slope_r));
        // One-sided slopes carry O(eps) truncation, hence the loose bound.
        if jump > 0.05 * scale && envelope_err < 0.05 {
            self.kink_skips += 1;
            return Ok(());
        }
        if err > self.per_leaf[leaf] {
            self.per_leaf[leaf] = err;
        }
        Ok(())
    }

    pub fn report(self) -> FdReport {
        FdReport {
            max_rel_err: self.per_leaf.iter().cloned().fold(0.0, f64::max),
            per_leaf: self.per_leaf,
            checked: self.checked,
            kink_skips: self.kink_skips,
        }
    }
}

/// Compares the tape's analytic gradients against central finite differences
/// for every leaf in `params`.
///
/// `build` must construct the same scalar loss from the supplied leaf vars
/// regardless of which tape it is handed; it is called once on the analytic
/// tape and several times per checked element on double-precision tapes.
pub fn finite_diff_check<F>(params: &[Tensor], mut build: F) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    // Analytic gradients from the production (single-precision) path.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad_f64(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.len_of(v)])
        })
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut tally = FdTally::new(params.len());
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let orig = work[pi].values()[j];
            let mut eval = |value: f32| -> Result<f64> {
                work[pi].values_mut()[j] = value;
                let mut t = Tape::with_precision(Precision::Double);
                let vs: Vec<Var> = work.iter().map(|p| t.leaf(p)).collect();
                let l = build(&mut t, &vs)?;
                let out = t.scalar_value(l);
                work[pi].values_mut()[j] = orig;
                out
            };
            tally.judge(pi, analytic[pi][j], orig, &mut eval)?;
        }
    }
    Ok(tally.report())
}
