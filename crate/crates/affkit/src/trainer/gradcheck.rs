//! Runnable gradient-verification suites: every loss, the backbone, the
//! multi-slot heads, and the deviation extractor, checked against central
//! finite differences on fixed seeds.
//!
//! Losses over constrained outputs (softmax rows, sigmoids) are checked
//! through their producing activation, since simplex/interval points cannot
//! be perturbed coordinate-wise.

use crate::autodiff::check::{finite_diff_check, FdReport, FD_EPSILON, FD_TOLERANCE};
use crate::autodiff::{Precision, Tape, Tensor};
use crate::data::{SampleRecord, TaskKind, NUM_AUS, UNLABELED, VA_UNLABELED};
use crate::error::{Error, Result};
use crate::losses::{ccc, smoothed_cross_entropy, va_loss, weighted_bce, SmoothingConfig};
use crate::model::{BackboneConfig, BackboneParams, MultiHeadModel};
use crate::seeding::mix2;
use crate::trainer::training::{build_batch_loss, TaskWeights, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Losses,
    Backbone,
    Deviation,
    Full,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Suite::Losses),
            "backbone" => Ok(Suite::Backbone),
            "deviation" => Ok(Suite::Deviation),
            "full" => Ok(Suite::Full),
            other => Err(Error::invalid(format!(
                "unknown suite {other:?}; expected losses, backbone, deviation or full"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub kink_skips: usize,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub components: Vec<ComponentReport>,
    /// Largest frozen-twin gradient magnitude observed (deviation suites);
    /// the freeze contract requires exactly zero.
    pub frozen_grad_max: Option<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
            && self.frozen_grad_max.map(|g| g == 0.0).unwrap_or(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.components {
            let _ = writeln!(
                s,
                "{} max_rel_err={:.3e} checked={} kink_skips={} {}",
                c.name,
                c.max_rel_err,
                c.checked,
                c.kink_skips,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        if let Some(g) = self.frozen_grad_max {
            let _ = writeln!(
                s,
                "frozen_twin_grad={:.3e} {}",
                g,
                if g == 0.0 { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            s,
            "overall: {} (tolerance {FD_TOLERANCE:.0e}, eps {FD_EPSILON:.0e})",
            if self.passed() { "pass" } else { "FAIL" }
        );
        s
    }
}

fn component(name: &'static str, report: FdReport) -> ComponentReport {
    ComponentReport {
        name,
        max_rel_err: report.max_rel_err,
        kink_skips: report.kink_skips,
        checked: report.checked,
        passed: report.passes(),
    }
}

fn random_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_slice(shape, &values).unwrap()
}

fn losses_components(seed: u64) -> Result<Vec<ComponentReport>> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix2(seed, 1));
    let mut out = Vec::new();

    let logits = random_tensor(&mut rng, &[4, 6]);
    let labels = [0usize, 5, 2, 3];
    let weights: Vec<f32> = (0..6).map(|i| 0.5 + 0.25 * i as f32).collect();

    let w = weights.clone();
    out.push(component(
        "weighted_cross_entropy",
        finite_diff_check(&[logits.clone()], |tape, vars| {
            let probs = tape.softmax_rows(vars[0])?;
            let cfg = SmoothingConfig::new(0.0, 6)?;
            smoothed_cross_entropy(tape, probs, &labels, &cfg, Some(&w))
        })?,
    ));

    let w = weights.clone();
    out.push(component(
        "smoothed_cross_entropy",
        finite_diff_check(&[logits], |tape, vars| {
            let probs = tape.softmax_rows(vars[0])?;
            let cfg = SmoothingConfig::new(0.2, 6)?;
            smoothed_cross_entropy(tape, probs, &labels, &cfg, Some(&w))
        })?,
    ));

    let pred = random_tensor(&mut rng, &[16]);
    let truth: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let t = truth.clone();
    out.push(component(
        "ccc",
        finite_diff_check(&[pred.clone()], |tape, vars| ccc(tape, vars[0], &t))?,
    ));

    let truth_a: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    out.push(component(
        "va_loss",
        finite_diff_check(&[pred.clone(), pred], |tape, vars| {
            va_loss(tape, vars[0], &truth, vars[1], &truth_a)
        })?,
    ));

    let raw = random_tensor(&mut rng, &[3, NUM_AUS]);
    let label_values: Vec<f32> = (0..3 * NUM_AUS)
        .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    let bce_labels = Tensor::from_slice(&[3, NUM_AUS], &label_values).unwrap();
    let pos_weights: Vec<f32> = (0..NUM_AUS).map(|i| 0.5 + 0.5 * i as f32).collect();
    out.push(component(
        "weighted_bce",
        finite_diff_check(&[raw], |tape, vars| {
            let probs = tape.sigmoid(vars[0])?;
            weighted_bce(tape, probs, &bce_labels, &pos_weights)
        })?,
    ));

    Ok(out)
}

fn tiny_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        input_size: 8,
        channels: [2, 3],
        feature_dim: 4,
        seed,
    }
}

fn random_batch(cfg: &BackboneConfig, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    random_tensor(&mut rng, &[n, 3, cfg.input_size, cfg.input_size])
}

/// Finite differences through an entire model forward: perturbs the model's
/// own parameters, re-running the forward on a double-precision tape.
fn model_fd_check(
    model: &mut MultiHeadModel,
    batch: &Tensor,
    loss_fn: &dyn Fn(&mut Tape, &crate::model::ForwardPass) -> Result<crate::autodiff::Var>,
) -> Result<FdReport> {
    // Analytic pass on the production tape.
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, batch, model.task)?;
    let loss = loss_fn(&mut tape, &pass)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = pass
        .param_vars
        .iter()
        .map(|&v| {
            tape.grad_f64(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.len_of(v)])
        })
        .collect();

    let num_params = analytic.len();
    let mut tally = crate::autodiff::check::FdTally::new(num_params);
    for pi in 0..num_params {
        for j in 0..analytic[pi].len() {
            let orig = model.named_params()[pi].1.values()[j];
            let mut eval = |value: f32| -> Result<f64> {
                model.named_params_mut()[pi].1.values_mut()[j] = value;
                let mut t = Tape::with_precision(Precision::Double);
                let pass = model.forward(&mut t, batch, model.task)?;
                let l = loss_fn(&mut t, &pass)?;
                let out = t.scalar_value(l);
                model.named_params_mut()[pi].1.values_mut()[j] = orig;
                out
            };
            tally.judge(pi, analytic[pi][j], orig, &mut eval)?;
        }
    }
    Ok(tally.report())
}

/// Scalar probe: mean of squared expression probabilities (plus VA/AU heads
/// when present) so every head contributes to the pullback.
fn probe_loss(tape: &mut Tape, pass: &crate::model::ForwardPass) -> Result<crate::autodiff::Var> {
    let sq = tape.mul(pass.expr_probs, pass.expr_probs)?;
    let mut loss = tape.mean(sq)?;
    if let Some(va) = pass.va {
        let sq = tape.mul(va, va)?;
        let m = tape.mean(sq)?;
        loss = tape.add(loss, m)?;
    }
    if let Some(au) = pass.au_probs {
        let sq = tape.mul(au, au)?;
        let m = tape.mean(sq)?;
        loss = tape.add(loss, m)?;
    }
    Ok(loss)
}

fn backbone_components(seed: u64) -> Result<Vec<ComponentReport>> {
    let cfg = tiny_config(mix2(seed, 2));
    let batch = random_batch(&cfg, 2, mix2(seed, 3));
    let mut single = MultiHeadModel::new(TaskKind::Mtl, cfg, 1)?;
    let backbone = component(
        "backbone",
        model_fd_check(&mut single, &batch, &probe_loss)?,
    );
    let mut multi = MultiHeadModel::new(TaskKind::Mtl, cfg, 3)?;
    let slots = component(
        "multi_slot_heads",
        model_fd_check(&mut multi, &batch, &probe_loss)?,
    );
    Ok(vec![backbone, slots])
}

fn deviation_components(seed: u64) -> Result<(Vec<ComponentReport>, f64)> {
    let cfg = tiny_config(mix2(seed, 4));
    let pretrained = BackboneParams::init(&cfg, mix2(seed, 5));
    let mut model = MultiHeadModel::with_deviation(TaskKind::Lsd, cfg, 1, pretrained)?;
    // Nudge the trainable twin so the deviation features are nonzero.
    model.named_params_mut()[5].1.values_mut()[0] += 0.3;
    let batch = random_batch(&cfg, 2, mix2(seed, 6));
    let rep = component("deviation", model_fd_check(&mut model, &batch, &probe_loss)?);

    // Freeze contract: run a full forward+backward and confirm the frozen
    // twin accumulated no gradient anywhere.
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch, TaskKind::Lsd)?;
    let loss = probe_loss(&mut tape, &pass)?;
    tape.backward(loss)?;
    let frozen_grad_max = match &model.extractor {
        crate::model::Extractor::Deviation(d) => d
            .frozen()
            .conv1_kernels
            .grad()
            .into_iter()
            .chain(d.frozen().fc_weight.grad())
            .flat_map(|g| g.iter())
            .fold(0.0f64, |acc, &g| acc.max(g.abs() as f64)),
        _ => unreachable!(),
    };
    Ok((vec![rep], frozen_grad_max))
}

/// An end-to-end composite: multi-task model, sentinel-bearing batch, the
/// production loss assembly.
fn full_components(seed: u64) -> Result<Vec<ComponentReport>> {
    let cfg = tiny_config(mix2(seed, 7));
    let mut model = MultiHeadModel::new(TaskKind::Mtl, cfg, 2)?;
    let batch = random_batch(&cfg, 4, mix2(seed, 8));
    let mut rng = ChaCha12Rng::seed_from_u64(mix2(seed, 9));

    let mut records = Vec::new();
    for i in 0..4 {
        let mut aus = [0i8; NUM_AUS];
        for au in aus.iter_mut() {
            *au = if rng.gen_bool(0.2) {
                UNLABELED as i8
            } else {
                i8::from(rng.gen_bool(0.5))
            };
        }
        records.push(SampleRecord {
            image_path: format!("fd_{i}.png"),
            valence: if i == 3 { VA_UNLABELED } else { rng.gen_range(-1.0..1.0) },
            arousal: if i == 3 { VA_UNLABELED } else { rng.gen_range(-1.0..1.0) },
            expression: if i == 2 { UNLABELED } else { rng.gen_range(0..8) },
            aus,
        });
    }
    let train_cfg = TrainConfig {
        smoothing: 0.1,
        ..TrainConfig::default_for(TaskKind::Mtl)
    };
    let weights = TaskWeights {
        expr: Some((0..8).map(|i| 0.75 + 0.1 * i as f32).collect()),
        au_pos: (0..NUM_AUS).map(|i| 1.0 + 0.25 * i as f32).collect(),
    };

    let record_refs: Vec<&SampleRecord> = records.iter().collect();
    let loss_fn = move |tape: &mut Tape, pass: &crate::model::ForwardPass| {
        build_batch_loss(tape, pass, &record_refs, &train_cfg, &weights, 0).map(|(l, _)| l)
    };
    let rep = component("full_mtl_composite", model_fd_check(&mut model, &batch, &loss_fn)?);
    Ok(vec![rep])
}

/// Runs the requested suite on a fixed seed.
pub fn gradient_check(suite: Suite, seed: u64) -> Result<GradCheckReport> {
    let mut components = Vec::new();
    let mut frozen = None;
    match suite {
        Suite::Losses => components.extend(losses_components(seed)?),
        Suite::Backbone => components.extend(backbone_components(seed)?),
        Suite::Deviation => {
            let (c, g) = deviation_components(seed)?;
            components.extend(c);
            frozen = Some(g);
        }
        Suite::Full => {
            components.extend(losses_components(seed)?);
            components.extend(backbone_components(seed)?);
            let (c, g) = deviation_components(seed)?;
            components.extend(c);
            frozen = Some(g);
            components.extend(full_components(seed)?);
        }
    }
    Ok(GradCheckReport {
        components,
        frozen_grad_max: frozen,
    })
}
