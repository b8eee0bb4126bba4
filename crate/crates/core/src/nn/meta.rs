//! Network-facing wrappers around the MDN and PMDN operations.
//!
//! Conv feature maps are reduced to one scalar per channel by global average
//! pooling; the fitted metadata term is then subtracted from every spatial
//! position of that channel. Dense features (`S = 1`) pass through unchanged.

use crate::error::{Error, Result};
use crate::linalg::{MetaBatch, GramInverse};
use crate::mdn::{self, MdnState, PmdnParams};
use crate::nn::Mode;
use crate::tensor::{Scalar, Tensor};

/// `b x C` channel means (f64) of a `b x C x S` activation.
pub(crate) fn pool<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<Tensor> {
    if x.shape().len() < 2 || x.shape()[1] != channels {
        return Err(Error::shape("metadata layer input", format!("[b, {channels}, ..]"), format!("{:?}", x.shape())));
    }
    let (b, s) = (x.rows(), x.row_len() / channels);
    let mut f = Vec::with_capacity(b * channels);
    for i in 0..b {
        let row = x.row(i);
        for c in 0..channels {
            f.push(row[c * s..(c + 1) * s].iter().map(|v| v.to_f64()).sum::<f64>() / s as f64);
        }
    }
    Tensor::new([b, channels], f)
}

/// `x - broadcast(fit)` where `fit` is `b x C`.
pub(crate) fn subtract_broadcast<T: Scalar>(x: &Tensor<T>, fit: &Tensor) -> Tensor<T> {
    let (b, c) = (fit.rows(), fit.row_len());
    let s = x.row_len() / c;
    let mut out = x.clone();
    for i in 0..b {
        let o = out.row_mut(i);
        for ch in 0..c {
            let v = T::from_f64(fit.at(i, ch));
            o[ch * s..(ch + 1) * s].iter_mut().for_each(|x| *x -= v);
        }
    }
    out
}

fn require_meta(meta: Option<&MetaBatch>, rows: usize) -> Result<&MetaBatch> {
    let m = meta.ok_or_else(|| Error::Config("metadata batch required by MDN/PMDN layer".into()))?;
    if m.rows() != rows {
        return Err(Error::shape("metadata rows", rows, m.rows()));
    }
    Ok(m)
}

/// Backward cache of an MDN layer in training mode.
#[derive(Debug, Clone)]
pub(crate) struct MdnCache {
    pub m: Tensor,
    pub gram_inv: GramInverse,
}

/// Backward cache of a PMDN layer: its pooled input and metadata, which the
/// trainer also uses for the metadata loss.
#[derive(Debug, Clone)]
pub(crate) struct PmdnCache {
    pub features: Tensor,
    pub meta: MetaBatch,
}

pub(crate) fn mdn_forward<T: Scalar>(
    state: &mut MdnState,
    x: &Tensor<T>,
    meta: Option<&MetaBatch>,
) -> Result<(Tensor<T>, MdnCache)> {
    let m = require_meta(meta, x.rows())?;
    let f = pool(x, state.channels())?;
    let fit = mdn::mdn_train_fit(&f, m, state)?;
    let cache = MdnCache {
        m: m.values().clone(),
        gram_inv: state.gram_inv().clone(),
    };
    Ok((subtract_broadcast(x, &fit), cache))
}

pub(crate) fn mdn_eval<T: Scalar>(state: &MdnState, x: &Tensor<T>, meta: Option<&MetaBatch>) -> Result<Tensor<T>> {
    let m = require_meta(meta, x.rows())?;
    if x.shape().len() < 2 || x.shape()[1] != state.channels() {
        return Err(Error::shape("mdn input", state.channels(), format!("{:?}", x.shape())));
    }
    let fit = mdn::mdn_eval_fit(m, state)?;
    Ok(subtract_broadcast(x, &fit))
}

/// `dx = g - broadcast(P mean_S(g))` with `P = (N/b) M G^-1 M^T`.
pub(crate) fn mdn_backward<T: Scalar>(cache: &MdnCache, dy: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let v = pool(dy, channels)?;
    let p = mdn::batch_projection(&cache.gram_inv, &cache.m, &v)?;
    Ok(subtract_broadcast(dy, &p))
}

pub(crate) fn pmdn_forward<T: Scalar>(
    params: &PmdnParams,
    x: &Tensor<T>,
    meta: Option<&MetaBatch>,
    mode: Mode,
    cache: bool,
) -> Result<(Tensor<T>, Option<PmdnCache>)> {
    let m = require_meta(meta, x.rows())?;
    if x.shape().len() < 2 || x.shape()[1] != params.channels() {
        return Err(Error::shape("pmdn input", params.channels(), format!("{:?}", x.shape())));
    }
    let fit = mdn::pmdn_fit(m, params, mode)?;
    let cache = if cache {
        Some(PmdnCache {
            features: pool(x, params.channels())?,
            meta: m.clone(),
        })
    } else {
        None
    };
    Ok((subtract_broadcast(x, &fit), cache))
}
