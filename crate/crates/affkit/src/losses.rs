//! Differentiable training losses for the three affect tasks.
//!
//! The total objective is the unweighted sum of the per-task losses:
//! class-weighted cross entropy for expression classification, one minus the
//! concordance correlation coefficient per continuous dimension for
//! valence/arousal, and positively-weighted binary cross entropy for action
//! unit detection. Label smoothing mixes the one-hot target with a uniform
//! distribution and composes multiplicatively with the class weights.
//!
//! All losses operate on probabilities (softmax rows or sigmoid outputs),
//! not logits; logs are clamped at 1e-12 so every loss value is bounded.
//! Batch reduction is the mean over rows, keeping magnitudes independent of
//! batch size.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Row-sum slack accepted when validating probability inputs.
const SIMPLEX_TOL: f64 = 1e-5;

/// Denominator stabilizer for the concordance correlation coefficient;
/// makes equal constant sequences evaluate to 0 instead of 0/0.
pub const CCC_DELTA: f64 = 1e-8;

/// Per-task loss values of one training step, plus their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_expr: f32,
    pub l_va: f32,
    pub l_au: f32,
    pub total: f32,
}

/// Label-smoothing configuration: targets become
/// `(1 - epsilon) * onehot + epsilon / num_classes`.
#[derive(Debug, Clone, Copy)]
pub struct SmoothingConfig {
    epsilon: f64,
    num_classes: usize,
}

impl SmoothingConfig {
    pub fn new(epsilon: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::invalid(format!(
                "smoothing epsilon must be in [0,1), got {epsilon}"
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("smoothing needs at least one class"));
        }
        Ok(SmoothingConfig {
            epsilon,
            num_classes,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The smoothed target vector for a true class, in f64 so the
    /// sum-to-one property holds to well below 1e-9. Minimum entry is
    /// `epsilon / num_classes`.
    pub fn target_row(&self, label: usize) -> Vec<f64> {
        let c = self.num_classes;
        let uniform = self.epsilon / c as f64;
        let mut row = vec![uniform; c];
        row[label] += 1.0 - self.epsilon;
        row
    }
}

fn expect_rank2(tape: &Tape, v: Var, context: &'static str) -> Result<(usize, usize)> {
    let shape = tape.shape_of(v);
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "{context}: expected rank-2 probabilities, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

fn validate_simplex_rows(tape: &Tape, probs: Var, context: &'static str) -> Result<()> {
    let (rows, cols) = expect_rank2(tape, probs, context)?;
    let v = tape.value_f64(probs);
    for r in 0..rows {
        let sum: f64 = v[r * cols..(r + 1) * cols].iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "{context}: probability row {r} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Class-weighted cross entropy over softmax probabilities:
/// mean over the batch of `-w[y] * ln(p[y])`.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    weights: &[f32],
) -> Result<Var> {
    let cfg = SmoothingConfig::new(0.0, weights.len())?;
    smoothed_cross_entropy(tape, probs, labels, &cfg, Some(weights))
}

/// Label-smoothed, optionally class-weighted cross entropy:
/// mean over the batch of `-sum_i w_i * q_i * ln(p_i)` with
/// `q = (1 - eps) * onehot + eps / C`. With `epsilon == 0` this reduces,
/// bit for bit, to [`weighted_cross_entropy`] (which delegates here).
pub fn smoothed_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    cfg: &SmoothingConfig,
    weights: Option<&[f32]>,
) -> Result<Var> {
    let (rows, cols) = expect_rank2(tape, probs, "cross_entropy")?;
    if cols != cfg.num_classes() {
        return Err(Error::invalid(format!(
            "cross_entropy: {cols} probability columns but smoothing is configured for {} classes",
            cfg.num_classes()
        )));
    }
    if let Some(w) = weights {
        if w.len() != cols {
            return Err(Error::invalid(format!(
                "cross_entropy: {cols} classes but {} weights",
                w.len()
            )));
        }
    }
    if labels.len() != rows {
        return Err(Error::invalid(format!(
            "cross_entropy: {rows} probability rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::invalid(format!(
            "cross_entropy: label {bad} out of range for {cols} classes"
        )));
    }
    validate_simplex_rows(tape, probs, "cross_entropy")?;

    // Constant matrix of per-entry target mass times class weight.
    let mut qw: Vec<f32> = Vec::with_capacity(rows * cols);
    for &label in labels {
        let row = cfg.target_row(label);
        match weights {
            Some(w) => qw.extend(row.iter().zip(w).map(|(&q, &wi)| (q * wi as f64) as f32)),
            None => qw.extend(row.iter().map(|&q| q as f32)),
        }
    }
    let qw = tape.constant_values(&[rows, cols], &qw)?;
    let logp = tape.log_clamped(probs)?;
    let weighted = tape.mul(qw, logp)?;
    let total = tape.sum(weighted)?;
    let mean = tape.scale(total, 1.0 / rows as f32)?;
    tape.neg(mean)
}

/// Concordance correlation coefficient between a prediction sequence and a
/// ground-truth sequence, with population (1/N) moments:
///
/// `CCC = 2 cov(p,t) / (var(p) + var(t) + (mean(p) - mean(t))^2 + delta)`
///
/// Differentiable with respect to `pred`; `truth` is ingested as a constant.
pub fn ccc(tape: &mut Tape, pred: Var, truth: &[f32]) -> Result<Var> {
    let n = tape.len_of(pred);
    if tape.shape_of(pred).len() != 1 {
        return Err(Error::invalid(format!(
            "ccc: expected rank-1 predictions, got {:?}",
            tape.shape_of(pred)
        )));
    }
    if n < 2 {
        return Err(Error::invalid(format!("ccc: need at least 2 samples, got {n}")));
    }
    if truth.len() != n {
        return Err(Error::ShapeMismatch {
            left: vec![n],
            right: vec![truth.len()],
            context: "ccc",
        });
    }

    // Ground-truth moments in f64; they carry no gradient.
    let t_mean = truth.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let t_var = truth
        .iter()
        .map(|&x| (x as f64 - t_mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let centered_t: Vec<f32> = truth.iter().map(|&x| (x as f64 - t_mean) as f32).collect();

    let p_mean = tape.mean(pred)?;
    let p_centered = tape.sub(pred, p_mean)?;
    let ct = tape.constant_values(&[n], &centered_t)?;
    let cross = tape.mul(p_centered, ct)?;
    let cov = tape.mean(cross)?;
    let p_sq = tape.mul(p_centered, p_centered)?;
    let p_var = tape.mean(p_sq)?;

    let mean_t = tape.scalar_const(t_mean as f32);
    let mean_diff = tape.sub(p_mean, mean_t)?;
    let mean_diff_sq = tape.mul(mean_diff, mean_diff)?;

    let stabile = tape.scalar_const((t_var + CCC_DELTA) as f32);
    let d1 = tape.add(p_var, stabile)?;
    let denom = tape.add(d1, mean_diff_sq)?;
    let numer = tape.scale(cov, 2.0)?;
    tape.div(numer, denom)
}

/// Valence/arousal loss: `(1 - CCC_V) + (1 - CCC_A)`, in `[0, 4]`.
pub fn va_loss(
    tape: &mut Tape,
    pred_valence: Var,
    truth_valence: &[f32],
    pred_arousal: Var,
    truth_arousal: &[f32],
) -> Result<Var> {
    let n = tape.len_of(pred_valence);
    if tape.len_of(pred_arousal) != n
        || truth_valence.len() != n
        || truth_arousal.len() != n
    {
        return Err(Error::ShapeMismatch {
            left: vec![n, tape.len_of(pred_arousal)],
            right: vec![truth_valence.len(), truth_arousal.len()],
            context: "va_loss",
        });
    }
    let ccc_v = ccc(tape, pred_valence, truth_valence)?;
    let ccc_a = ccc(tape, pred_arousal, truth_arousal)?;
    let both = tape.add(ccc_v, ccc_a)?;
    let two = tape.scalar_const(2.0);
    tape.sub(two, both)
}

/// Weighted binary cross entropy over sigmoid outputs, mean over the batch:
/// `-sum_i [ w_i * y_i * ln(p_i) + (1 - y_i) * ln(1 - p_i) ]`.
/// The positive weight multiplies only the positive term.
///
/// Labels must be exactly 0 or 1; unlabeled entries are the caller's problem
/// (see [`weighted_bce_masked`]).
pub fn weighted_bce(
    tape: &mut Tape,
    probs: Var,
    labels: &Tensor,
    pos_weights: &[f32],
) -> Result<Var> {
    let ones = Tensor::filled(labels.shape().to_vec(), 1.0)?;
    weighted_bce_masked(tape, probs, labels, &ones, pos_weights)
}

/// [`weighted_bce`] with a 0/1 mask zeroing individual entries. The batch
/// denominator counts rows with at least one unmasked entry, so appending
/// fully-masked rows never changes the loss or its gradients.
pub fn weighted_bce_masked(
    tape: &mut Tape,
    probs: Var,
    labels: &Tensor,
    mask: &Tensor,
    pos_weights: &[f32],
) -> Result<Var> {
    let (rows, cols) = expect_rank2(tape, probs, "weighted_bce")?;
    if labels.shape() != [rows, cols] {
        return Err(Error::ShapeMismatch {
            left: vec![rows, cols],
            right: labels.shape().to_vec(),
            context: "weighted_bce labels",
        });
    }
    if mask.shape() != [rows, cols] {
        return Err(Error::ShapeMismatch {
            left: vec![rows, cols],
            right: mask.shape().to_vec(),
            context: "weighted_bce mask",
        });
    }
    if pos_weights.len() != cols {
        return Err(Error::invalid(format!(
            "weighted_bce: {cols} outputs but {} positive weights",
            pos_weights.len()
        )));
    }
    if let Some(bad) = labels.values().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!(
            "weighted_bce: labels must be 0 or 1, got {bad} (mask unlabeled entries first)"
        )));
    }
    if mask.values().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("weighted_bce: mask entries must be 0 or 1"));
    }
    let scored_rows = (0..rows)
        .filter(|&r| mask.values()[r * cols..(r + 1) * cols].iter().any(|&m| m == 1.0))
        .count();
    if scored_rows == 0 {
        return Err(Error::invalid("weighted_bce: every row is fully masked"));
    }

    // Positive-term coefficients w_i * y_i * m and negative-term (1-y) * m.
    let mut pos_coef = Vec::with_capacity(rows * cols);
    let mut neg_coef = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let y = labels.values()[r * cols + c];
            let m = mask.values()[r * cols + c];
            pos_coef.push(pos_weights[c] * y * m);
            neg_coef.push((1.0 - y) * m);
        }
    }
    let pos_coef = tape.constant_values(&[rows, cols], &pos_coef)?;
    let neg_coef = tape.constant_values(&[rows, cols], &neg_coef)?;

    let log_p = tape.log_clamped(probs)?;
    // Only scalar right-hand sides broadcast, so 1 - p is built as -p + 1.
    let neg_p = tape.neg(probs)?;
    let one = tape.scalar_const(1.0);
    let one_minus = tape.add(neg_p, one)?;
    let log_q = tape.log_clamped(one_minus)?;

    let pos_term = tape.mul(pos_coef, log_p)?;
    let neg_term = tape.mul(neg_coef, log_q)?;
    let both = tape.add(pos_term, neg_term)?;
    let total = tape.sum(both)?;
    let mean = tape.scale(total, 1.0 / scored_rows as f32)?;
    tape.neg(mean)
}

/// Sums the three task losses into the total training objective and captures
/// the values for logging. Rejects non-finite inputs, naming the task.
pub fn mtl_total(tape: &mut Tape, l_expr: Var, l_va: Var, l_au: Var) -> Result<(Var, LossBreakdown)> {
    let vals = [
        ("expression", tape.scalar_value(l_expr)?),
        ("valence/arousal", tape.scalar_value(l_va)?),
        ("action-unit", tape.scalar_value(l_au)?),
    ];
    for (task, v) in vals {
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite {task} loss: {v}")));
        }
    }
    let partial = tape.add(l_expr, l_va)?;
    let total = tape.add(partial, l_au)?;
    let breakdown = LossBreakdown {
        l_expr: vals[0].1 as f32,
        l_va: vals[1].1 as f32,
        l_au: vals[2].1 as f32,
        total: tape.scalar_value(total)? as f32,
    };
    Ok((total, breakdown))
}
