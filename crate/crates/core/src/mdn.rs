//! Metadata normalization layers on `batch x channels` feature matrices.
//!
//! Both layers output the residual `r = f - M beta` per channel. They differ
//! in where `beta` comes from:
//!
//! - **MDN** re-estimates `beta` from every training batch in closed form
//!   (`(N/b) G^-1 sum m_i f_i`) and keeps an exponential moving average for
//!   inference.
//! - **PMDN** stores `beta` as a parameter and moves it by gradient steps on
//!   the metadata loss `L* = mean_i (f_i - m_i beta)^2`, alternating with the
//!   task-loss updates of the network weights (see [`crate::trainer`]).
//!
//! At inference the label column is removed from `M` together with the
//! matching `beta` component, so eval outputs never depend on labels.

use crate::error::{Error, Result};
use crate::linalg::{weighted_normal_solve, ColumnRole, GramInverse, MetaBatch, MetadataMatrix, DEFAULT_RIDGE_EPS};
use crate::nn::Mode;
use crate::tensor::{Op, Tensor};

/// EMA momentum for the MDN inference coefficients.
pub const MDN_MOMENTUM: f64 = 0.9;

fn check_features(f: &Tensor, m: &MetaBatch, channels: usize) -> Result<(usize, usize)> {
    let (b, c) = f.dims()?;
    if b != m.rows() {
        return Err(Error::shape("metadata rows", b, m.rows()));
    }
    if c != channels {
        return Err(Error::shape("feature channels", channels, c));
    }
    Ok((b, c))
}

/// Metadata block and coefficient block to use for one forward pass.
///
/// In `Eval` mode the label column is dropped from both sides; the batch may
/// be given with or without its label column.
fn effective_coefficients(
    beta: &Tensor,
    train_roles: &[ColumnRole],
    m: &MetaBatch,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    match mode {
        Mode::Train => {
            if m.roles() != train_roles {
                return Err(Error::shape(
                    "metadata roles",
                    format!("{train_roles:?}"),
                    format!("{:?}", m.roles()),
                ));
            }
            Ok((m.values().clone(), beta.clone()))
        }
        Mode::Eval => {
            let m = m.without_label()?;
            let beta = match train_roles.iter().position(|&r| r == ColumnRole::LabelAug) {
                Some(c) => beta.drop_column(c)?,
                None => beta.clone(),
            };
            let kept: Vec<ColumnRole> = train_roles
                .iter()
                .copied()
                .filter(|&r| r != ColumnRole::LabelAug)
                .collect();
            if m.roles() != kept.as_slice() {
                return Err(Error::shape(
                    "eval metadata roles",
                    format!("{kept:?}"),
                    format!("{:?}", m.roles()),
                ));
            }
            Ok((m.values().clone(), beta))
        }
    }
}

/// `f - M beta^T` where `beta` is `C x K`.
fn subtract_fit(f: &Tensor, m: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let fit = m.matmul_op(Op::N, beta, Op::T)?;
    f.sub(&fit)
}

/// `(N/b) M G^-1 M^T v`: the metadata fit MDN subtracts from `v`.
pub(crate) fn batch_projection(gram_inv: &GramInverse, m: &Tensor, v: &Tensor) -> Result<Tensor> {
    let n_total = gram_inv.source_rows();
    let beta = weighted_normal_solve(gram_inv, m, v, n_total as f64 / m.rows() as f64)?;
    m.matmul(&beta)
}

/// Running state of one MDN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnState {
    gram_inv: GramInverse,
    roles: Vec<ColumnRole>,
    running_beta: Tensor,
    momentum: f64,
    seen_batches: u64,
    last_beta: Option<Tensor>,
}

impl MdnState {
    /// `gram_inv` is built over every row of the training matrix, including
    /// its label column.
    pub fn new(train_meta: &MetadataMatrix, channels: usize) -> Result<Self> {
        Self::with_gram(train_meta.gram_inverse(DEFAULT_RIDGE_EPS)?, train_meta.roles().to_vec(), channels)
    }

    pub fn with_gram(gram_inv: GramInverse, roles: Vec<ColumnRole>, channels: usize) -> Result<Self> {
        if gram_inv.dim() != roles.len() {
            return Err(Error::shape("gram inverse size", roles.len(), gram_inv.dim()));
        }
        let k = roles.len();
        Ok(Self {
            gram_inv,
            roles,
            running_beta: Tensor::zeros([channels, k]),
            momentum: MDN_MOMENTUM,
            seen_batches: 0,
            last_beta: None,
        })
    }

    pub fn gram_inv(&self) -> &GramInverse {
        &self.gram_inv
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn channels(&self) -> usize {
        self.running_beta.rows()
    }

    /// EMA of the per-batch coefficients, `C x K`.
    pub fn running_beta(&self) -> &Tensor {
        &self.running_beta
    }

    /// Coefficients from the most recent training batch, `C x K`.
    pub fn last_beta(&self) -> Option<&Tensor> {
        self.last_beta.as_ref()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn seen_batches(&self) -> u64 {
        self.seen_batches
    }

    pub fn n_total(&self) -> usize {
        self.gram_inv.source_rows()
    }

    pub(crate) fn restore(&mut self, running_beta: Tensor, seen_batches: u64) -> Result<()> {
        if running_beta.shape() != self.running_beta.shape() {
            return Err(Error::shape(
                "running beta",
                format!("{:?}", self.running_beta.shape()),
                format!("{:?}", running_beta.shape()),
            ));
        }
        self.running_beta = running_beta;
        self.seen_batches = seen_batches;
        Ok(())
    }

    pub(crate) fn set_momentum(&mut self, momentum: f64) -> Result<()> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("mdn momentum must lie in (0, 1), got {momentum}")));
        }
        self.momentum = momentum;
        Ok(())
    }

    /// Overwrites the inference coefficients, e.g. for tests or imports.
    pub fn set_running_beta(&mut self, running_beta: Tensor) -> Result<()> {
        let seen = self.seen_batches.max(1);
        self.restore(running_beta, seen)
    }
}

/// Training-mode MDN: closed-form batch coefficients, residual, EMA update.
pub fn mdn_forward_train(f: &Tensor, m_batch: &MetaBatch, state: &mut MdnState) -> Result<Tensor> {
    let fit = mdn_train_fit(f, m_batch, state)?;
    f.sub(&fit)
}

/// The `M beta_batch` term MDN subtracts in training mode.
pub(crate) fn mdn_train_fit(f: &Tensor, m_batch: &MetaBatch, state: &mut MdnState) -> Result<Tensor> {
    check_features(f, m_batch, state.channels())?;
    let (m, _) = effective_coefficients(&state.running_beta, &state.roles, m_batch, Mode::Train)?;
    let n_total = state.n_total();
    let beta_kc = weighted_normal_solve(&state.gram_inv, &m, f, n_total as f64 / m.rows() as f64)?;
    let beta = beta_kc.transpose()?;
    beta.check_finite("mdn batch beta")?;
    let fit = m.matmul(&beta_kc)?;

    let mom = state.momentum;
    for (run, &new) in state.running_beta.data_mut().iter_mut().zip(beta.data()) {
        *run = mom * *run + (1.0 - mom) * new;
    }
    state.seen_batches += 1;
    state.last_beta = Some(beta);
    Ok(fit)
}

/// Inference-mode MDN using the running coefficients without the label term.
pub fn mdn_forward_eval(f: &Tensor, m_eval: &MetaBatch, state: &MdnState) -> Result<Tensor> {
    check_features(f, m_eval, state.channels())?;
    let fit = mdn_eval_fit(m_eval, state)?;
    f.sub(&fit)
}

pub(crate) fn mdn_eval_fit(m_eval: &MetaBatch, state: &MdnState) -> Result<Tensor> {
    if state.seen_batches == 0 {
        return Err(Error::NeverTrained);
    }
    let (m, beta) = effective_coefficients(&state.running_beta, &state.roles, m_eval, Mode::Eval)?;
    m.matmul_op(Op::N, &beta, Op::T)
}

/// Trainable coefficients of one PMDN layer, one row per feature channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PmdnParams {
    beta: Tensor,
    roles: Vec<ColumnRole>,
}

impl PmdnParams {
    /// Zero-initialized, so the layer starts as the identity map.
    pub fn zeros(channels: usize, roles: Vec<ColumnRole>) -> Self {
        let k = roles.len();
        Self {
            beta: Tensor::zeros([channels, k]),
            roles,
        }
    }

    pub fn from_beta(beta: Tensor, roles: Vec<ColumnRole>) -> Result<Self> {
        let (_, k) = beta.dims()?;
        if k != roles.len() {
            return Err(Error::shape("pmdn beta columns", roles.len(), k));
        }
        beta.check_finite("pmdn beta")?;
        Ok(Self { beta, roles })
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn roles(&self) -> &[ColumnRole] {
        &self.roles
    }

    pub fn channels(&self) -> usize {
        self.beta.rows()
    }

    /// Plain gradient step `beta <- beta - lr * grad`.
    pub fn step(&mut self, grad: &Tensor, lr: f64) -> Result<()> {
        if grad.shape() != self.beta.shape() {
            return Err(Error::shape(
                "pmdn gradient",
                format!("{:?}", self.beta.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        for (b, g) in self.beta.data_mut().iter_mut().zip(grad.data()) {
            *b -= lr * g;
        }
        self.beta.check_finite("pmdn beta update")
    }
}

/// PMDN residual. The Jacobian with respect to `f` is the identity.
pub fn pmdn_forward(f: &Tensor, m_batch: &MetaBatch, params: &PmdnParams, mode: Mode) -> Result<Tensor> {
    check_features(f, m_batch, params.channels())?;
    f.sub(&pmdn_fit(m_batch, params, mode)?)
}

/// The `M beta` term PMDN subtracts.
pub(crate) fn pmdn_fit(m_batch: &MetaBatch, params: &PmdnParams, mode: Mode) -> Result<Tensor> {
    let (m, beta) = effective_coefficients(&params.beta, &params.roles, m_batch, mode)?;
    m.matmul_op(Op::N, &beta, Op::T)
}

/// Metadata loss of one PMDN layer and its coefficient gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PmdnLoss {
    /// `(1/C) sum_c mean_i (f_ic - m_i beta_c)^2`.
    pub value: f64,
    /// `mean_i (f_ic - m_i beta_c)^2` for each channel.
    pub per_channel: Vec<f64>,
    /// Row `c` is `d per_channel[c] / d beta_c = -2 M^T (f_c - M beta_c) / b`.
    pub grad: Tensor,
}

pub fn pmdn_loss(f: &Tensor, m_batch: &MetaBatch, params: &PmdnParams) -> Result<PmdnLoss> {
    let (b, c) = check_features(f, m_batch, params.channels())?;
    let (m, beta) = effective_coefficients(&params.beta, &params.roles, m_batch, Mode::Train)?;
    let r = subtract_fit(f, &m, &beta)?;
    let mut per_channel = vec![0.0; c];
    for i in 0..b {
        for (acc, v) in per_channel.iter_mut().zip(r.row(i)) {
            *acc += v * v;
        }
    }
    per_channel.iter_mut().for_each(|v| *v /= b as f64);
    let value = per_channel.iter().sum::<f64>() / c as f64;
    // (M^T r)^T -> C x K
    let mut grad = r.matmul_op(Op::T, &m, Op::N)?;
    let scale = -2.0 / b as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(PmdnLoss {
        value,
        per_channel,
        grad,
    })
}
