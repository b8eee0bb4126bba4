//! First-order optimizers for the network weights.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Optimizer with its per-parameter state. Moments are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, adam: None }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of Adam steps taken so far.
    pub fn timestep(&self) -> i32 {
        self.adam.as_ref().map_or(0, |s| s.t)
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::StateShapeMismatch(format!(
                "{} parameter tensors, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::StateShapeMismatch(format!(
                    "tensor {i}: {} values, gradient has {}",
                    p.len(),
                    g.len()
                )));
            }
        }
        let cfg = self.config;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w = T::from_f64(w.to_f64() - cfg.lr * d.to_f64());
                    }
                }
            }
            OptimizerKind::Adam => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
                    v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
                    t: 0,
                });
                if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
                    return Err(Error::StateShapeMismatch("adam moments do not match parameters".into()));
                }
                state.t += 1;
                let bc1 = 1.0 - cfg.beta1.powi(state.t);
                let bc2 = 1.0 - cfg.beta2.powi(state.t);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
                    for (((w, &d), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = d.to_f64();
                        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * d;
                        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * d * d;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w = T::from_f64(w.to_f64() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
                    }
                }
            }
        }
        Ok(())
    }
}
