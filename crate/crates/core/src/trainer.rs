//! Training loops.
//!
//! Networks with PMDN layers train with [`alternating_step`]: the
//! coefficients take a plain gradient step on the metadata loss while the
//! weights are frozen, then the weights take an optimizer step on the task
//! loss while the coefficients are frozen. Every other network trains with
//! [`plain_step`].

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{MetaBatch, MetadataMatrix};
use crate::mdn::pmdn_loss;
use crate::nn::loss::bce_loss;
use crate::nn::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::nn::{Mode, Network, NormMode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Step size of the plain gradient step on PMDN coefficients.
    pub eta1: f64,
    /// Learning rate of the weight optimizer.
    pub eta2: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub norm_mode: NormMode,
    pub shuffle: bool,
    /// Run the coefficient-phase forward pass only up to the last PMDN layer.
    pub skip_redundant_forward: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            epochs: 50,
            eta1: 0.4,
            eta2: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            norm_mode: NormMode::Pmdn,
            shuffle: true,
            skip_redundant_forward: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [("eta1", self.eta1), ("eta2", self.eta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative finite number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig::new(self.optimizer, self.eta2)
    }
}

/// One training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Task loss of the batch (after the coefficient update, for PMDN).
    pub loss: f64,
    /// Summed PMDN metadata loss before the coefficient update; 0 without PMDN.
    pub lstar: f64,
    /// Norm of all normalization coefficients after the step.
    pub beta_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,batch,loss,lstar,beta_norm";

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.epoch, r.batch, r.loss, r.lstar, r.beta_norm)?;
        }
        Ok(())
    }

    /// Mean task loss over the last epoch, or `None` for an empty log.
    pub fn final_epoch_loss(&self) -> Option<f64> {
        let last = self.records.last()?.epoch;
        let tail: Vec<f64> = self.records.iter().filter(|r| r.epoch == last).map(|r| r.loss).collect();
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Vec<T>,
    pub meta: Option<MetaBatch>,
}

/// Losses produced by one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lstar: f64,
    pub beta_norm: f64,
}

fn task_update<T: Scalar>(net: &mut Network<T>, opt: &mut Optimizer, batch: &Batch<T>) -> Result<f64> {
    let (logits, tape) = net.forward(&batch.x, batch.meta.as_ref(), Mode::Train)?;
    let (loss, d_logits) = bce_loss(&logits, &batch.y)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = net.backward(&tape, &d_logits)?;
    drop(tape);
    opt.step(&mut net.task_params_mut(), &grads.task)?;
    Ok(loss)
}

fn non_finite(loss: f64, lstar: f64) -> Error {
    Error::NonFiniteLoss {
        epoch: 0,
        batch: 0,
        loss,
        lstar,
    }
}

/// Coefficient step on the summed metadata loss with the weights frozen,
/// then a weight step on the task loss with the coefficients frozen.
pub fn alternating_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let layers = net.pmdn_layers();
    let last = *layers
        .last()
        .ok_or_else(|| Error::Config("alternating step needs a network with PMDN layers".into()))?;

    // (1) forward with the current coefficients
    let tape = if cfg.skip_redundant_forward {
        net.forward_prefix(&batch.x, batch.meta.as_ref(), last + 1)?
    } else {
        net.forward(&batch.x, batch.meta.as_ref(), Mode::Train)?.1
    };
    // (2) every layer's gradient is taken at the same pre-update state
    let mut lstar = 0.0;
    let mut updates = Vec::with_capacity(layers.len());
    for input in tape.pmdn_inputs() {
        let params = net.pmdn_params(input.layer).expect("pmdn layer");
        let l = pmdn_loss(input.features, input.meta, params)?;
        lstar += l.value;
        updates.push((input.layer, l.grad));
    }
    drop(tape);
    if !lstar.is_finite() {
        return Err(non_finite(f64::NAN, lstar));
    }
    for (layer, grad) in updates {
        net.pmdn_params_mut(layer).expect("pmdn layer").step(&grad, cfg.eta1)?;
    }
    // (3) second forward with the new coefficients, (4) weight update
    let loss = task_update(net, opt, batch)?;
    if !loss.is_finite() {
        return Err(non_finite(loss, lstar));
    }
    Ok(StepStats {
        loss,
        lstar,
        beta_norm: net.beta_norm(),
    })
}

/// One forward pass and one weight update; MDN layers re-estimate their
/// coefficients inside the forward pass.
pub fn plain_step<T: Scalar>(net: &mut Network<T>, opt: &mut Optimizer, batch: &Batch<T>) -> Result<StepStats> {
    if !net.pmdn_layers().is_empty() {
        return Err(Error::Config("networks with PMDN layers train with the alternating step".into()));
    }
    let loss = task_update(net, opt, batch)?;
    if !loss.is_finite() {
        return Err(non_finite(loss, 0.0));
    }
    Ok(StepStats {
        loss,
        lstar: 0.0,
        beta_norm: net.beta_norm(),
    })
}

/// Training inputs: images, 0/1 labels and the training metadata matrix
/// (with its label column) when the network normalizes on metadata.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T> {
    pub x: &'a Tensor<T>,
    pub y: &'a [f64],
    pub meta: Option<&'a MetadataMatrix>,
}

impl<T: Scalar> TrainData<'_, T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch<T>> {
        Ok(Batch {
            x: self.x.select_rows(idx)?,
            y: idx.iter().map(|&i| T::from_f64(self.y[i])).collect(),
            meta: self.meta.map(|m| m.batch(idx)).transpose()?,
        })
    }
}

/// Batch size actually used on `n` training rows: the requested size,
/// capped at `n`.
pub fn effective_batch_size(requested: usize, n: usize) -> usize {
    requested.min(n).max(1)
}

/// Per-epoch sample orders, drawn from one RNG stream seeded by `seed`.
pub fn epoch_order(rng: &mut ChaCha8Rng, n: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Runs `cfg.epochs` passes over shuffled mini-batches. The final partial
/// batch of an epoch is kept.
pub fn fit<T: Scalar>(net: &mut Network<T>, data: &TrainData<'_, T>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let n = data.len();
    if data.x.rows() != n {
        return Err(Error::shape("training images", n, data.x.rows()));
    }
    if let Some(m) = data.meta {
        if m.n_rows() != n {
            return Err(Error::shape("training metadata rows", n, m.n_rows()));
        }
    }
    let has_pmdn = !net.pmdn_layers().is_empty();
    let b = effective_batch_size(cfg.batch_size, n);
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(&mut rng, n, cfg.shuffle);
        for (bi, idx) in order.chunks(b).enumerate() {
            let batch = data.batch(idx)?;
            let step = if has_pmdn {
                alternating_step(net, &mut opt, &batch, cfg)
            } else {
                plain_step(net, &mut opt, &batch)
            };
            let s = step.map_err(|e| match e {
                Error::NonFiniteLoss { loss, lstar, .. } => Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss,
                    lstar,
                },
                other => other,
            })?;
            log.records.push(TrainRecord {
                epoch,
                batch: bi,
                loss: s.loss,
                lstar: s.lstar,
                beta_norm: s.beta_norm,
            });
        }
    }
    Ok(log)
}
