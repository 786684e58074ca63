//! Parameter update rules: SGD with momentum, Adam with bias correction,
//! and the cosine annealing schedule.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::invalid(format!(
                "unknown schedule {other:?}; expected cosine or constant"
            ))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        })
    }
}

/// `lr = 0.5 * base * (1 + cos(pi * step / total))`, floored at zero; steps
/// beyond `total_steps` clamp to the floor.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(total_steps >= 1);
    if step >= total_steps {
        return 0.0;
    }
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!(
                "unknown optimizer {other:?}; expected sgd_momentum or adam"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Per-parameter state buffers, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum OptSlot {
    Velocity(Vec<f32>),
    Moments { m: Vec<f32>, v: Vec<f32> },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    slots: BTreeMap<String, OptSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Momentum is configuration, not state; a restored optimizer takes it
    /// from the active training config.
    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. `v <- mu*v + g; w <- w - lr*v` for SGD momentum
    /// (no dampening, no Nesterov, no weight decay); the standard
    /// bias-corrected update for Adam. Parameters with no gradient recorded
    /// are treated as zero-gradient.
    pub fn step(&mut self, lr: f64, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        for (name, tensor) in params.iter_mut() {
            let grad = tensor.grad_or_zeros();
            let n = tensor.len();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| match self.kind {
                OptimizerKind::SgdMomentum => OptSlot::Velocity(vec![0.0; n]),
                OptimizerKind::Adam => OptSlot::Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            });
            match (self.kind, slot) {
                (OptimizerKind::SgdMomentum, OptSlot::Velocity(vel)) => {
                    if vel.len() != n {
                        return Err(Error::ShapeMismatch {
                            left: vec![vel.len()],
                            right: vec![n],
                            context: "optimizer velocity buffer",
                        });
                    }
                    for i in 0..n {
                        let v = self.momentum * vel[i] as f64 + grad[i] as f64;
                        vel[i] = v as f32;
                        let w = tensor.values()[i] as f64 - lr * v;
                        tensor.values_mut()[i] = w as f32;
                    }
                }
                (OptimizerKind::Adam, OptSlot::Moments { m, v }) => {
                    if m.len() != n {
                        return Err(Error::ShapeMismatch {
                            left: vec![m.len()],
                            right: vec![n],
                            context: "optimizer moment buffer",
                        });
                    }
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    for i in 0..n {
                        let g = grad[i] as f64;
                        let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                        let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let m_hat = mi / bc1;
                        let v_hat = vi / bc2;
                        let w = tensor.values()[i] as f64 - lr * m_hat / (v_hat.sqrt() + self.epsilon);
                        tensor.values_mut()[i] = w as f32;
                    }
                }
                _ => {
                    return Err(Error::invalid(
                        "optimizer state kind does not match optimizer",
                    ))
                }
            }
        }
        Ok(())
    }

    /// State buffers for checkpointing, in deterministic name order.
    pub fn state_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, slot) in &self.slots {
            match slot {
                OptSlot::Velocity(v) => {
                    out.push((
                        format!("opt.velocity.{name}"),
                        Tensor::new(vec![v.len()], v.clone()).expect("nonempty buffer"),
                    ));
                }
                OptSlot::Moments { m, v } => {
                    out.push((
                        format!("opt.m.{name}"),
                        Tensor::new(vec![m.len()], m.clone()).expect("nonempty buffer"),
                    ));
                    out.push((
                        format!("opt.v.{name}"),
                        Tensor::new(vec![v.len()], v.clone()).expect("nonempty buffer"),
                    ));
                }
            }
        }
        out
    }

    /// Rebuilds optimizer state from checkpoint entries.
    pub fn restore(
        kind: OptimizerKind,
        momentum: f64,
        step_count: u64,
        entries: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut opt = Optimizer::new(kind, momentum);
        opt.step_count = step_count;
        for (key, tensor) in entries {
            if let Some(name) = key.strip_prefix("opt.velocity.") {
                opt.slots
                    .insert(name.to_string(), OptSlot::Velocity(tensor.values().to_vec()));
            } else if let Some(name) = key.strip_prefix("opt.m.") {
                let v_key = format!("opt.v.{name}");
                let v = entries
                    .get(&v_key)
                    .ok_or_else(|| Error::invalid(format!("checkpoint missing {v_key}")))?;
                opt.slots.insert(
                    name.to_string(),
                    OptSlot::Moments {
                        m: tensor.values().to_vec(),
                        v: v.values().to_vec(),
                    },
                );
            }
        }
        Ok(opt)
    }
}
