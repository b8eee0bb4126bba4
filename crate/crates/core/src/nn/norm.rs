//! LayerNorm and BatchNorm over `b x C x S` activations (`S = 1` for dense
//! features). Affine parameters are per channel; statistics are accumulated
//! in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

fn channel_layout<T: Scalar>(x: &Tensor<T>, channels: usize, context: &'static str) -> Result<(usize, usize)> {
    if x.shape().len() < 2 || x.shape()[1] != channels {
        return Err(Error::shape(context, format!("[b, {channels}, ..]"), format!("{:?}", x.shape())));
    }
    Ok((x.rows(), x.row_len() / channels))
}

/// Cached normalized values and inverse standard deviations.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

/// Per-sample normalization over all `C x S` features.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub(crate) channels: usize,
    pub(crate) gamma: Vec<T>,
    pub(crate) beta: Vec<T>,
    pub(crate) eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            eps: NORM_EPS,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, cache: bool) -> Result<(Tensor<T>, Option<NormCache<T>>)> {
        let (b, s) = channel_layout(x, self.channels, "layernorm input")?;
        let d = self.channels * s;
        let mut out = x.clone();
        let mut xhat = if cache { Some(x.clone()) } else { None };
        let mut inv_stds = Vec::with_capacity(b);
        for i in 0..b {
            let row = x.row(i);
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            inv_stds.push(inv_std);
            let o = out.row_mut(i);
            for c in 0..self.channels {
                let (g, bta) = (self.gamma[c].to_f64(), self.beta[c].to_f64());
                for j in c * s..(c + 1) * s {
                    let n = (row[j].to_f64() - mean) * inv_std;
                    o[j] = T::from_f64(g * n + bta);
                    if let Some(xh) = xhat.as_mut() {
                        xh.row_mut(i)[j] = T::from_f64(n);
                    }
                }
            }
        }
        let cache = xhat.map(|xhat| NormCache { xhat, inv_std: inv_stds });
        Ok((out, cache))
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub(crate) fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let (b, s) = channel_layout(dy, self.channels, "layernorm gradient")?;
        let d = (self.channels * s) as f64;
        let mut dgamma = vec![0.0f64; self.channels];
        let mut dbeta = vec![0.0f64; self.channels];
        let mut dx = dy.clone();
        let mut dxhat = vec![0.0f64; self.channels * s];
        for i in 0..b {
            let g = dy.row(i);
            let xh = cache.xhat.row(i);
            let (mut sum, mut sum_x) = (0.0, 0.0);
            for c in 0..self.channels {
                let gamma = self.gamma[c].to_f64();
                for j in c * s..(c + 1) * s {
                    let (gv, xv) = (g[j].to_f64(), xh[j].to_f64());
                    dgamma[c] += gv * xv;
                    dbeta[c] += gv;
                    dxhat[j] = gv * gamma;
                    sum += dxhat[j];
                    sum_x += dxhat[j] * xv;
                }
            }
            let (mean, mean_x) = (sum / d, sum_x / d);
            let inv_std = cache.inv_std[i];
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = T::from_f64(inv_std * (dxhat[j] - mean - xh[j].to_f64() * mean_x));
            }
        }
        Ok((
            dx,
            dgamma.into_iter().map(T::from_f64).collect(),
            dbeta.into_iter().map(T::from_f64).collect(),
        ))
    }
}

/// Per-channel normalization over the batch (and spatial positions), with
/// running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub(crate) channels: usize,
    pub(crate) gamma: Vec<T>,
    pub(crate) beta: Vec<T>,
    pub(crate) running_mean: Vec<f64>,
    pub(crate) running_var: Vec<f64>,
    pub(crate) momentum: f64,
    pub(crate) eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            channels,
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps: NORM_EPS,
        }
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, NormCache<T>)> {
        let (b, s) = channel_layout(x, self.channels, "batchnorm input")?;
        let count = (b * s) as f64;
        let mut mean = vec![0.0f64; self.channels];
        let mut var = vec![0.0f64; self.channels];
        for i in 0..b {
            let row = x.row(i);
            for (c, m) in mean.iter_mut().enumerate() {
                *m += row[c * s..(c + 1) * s].iter().map(|v| v.to_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..b {
            let row = x.row(i);
            for (c, v) in var.iter_mut().enumerate() {
                *v += row[c * s..(c + 1) * s]
                    .iter()
                    .map(|x| (x.to_f64() - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut out = x.clone();
        let mut xhat = x.clone();
        for i in 0..b {
            let row = x.row(i);
            let (o, xh) = (out.row_mut(i), xhat.row_mut(i));
            for c in 0..self.channels {
                let (g, bta) = (self.gamma[c].to_f64(), self.beta[c].to_f64());
                for j in c * s..(c + 1) * s {
                    let n = (row[j].to_f64() - mean[c]) * inv_std[c];
                    xh[j] = T::from_f64(n);
                    o[j] = T::from_f64(g * n + bta);
                }
            }
        }
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for c in 0..self.channels {
            self.running_mean[c] = self.momentum * self.running_mean[c] + (1.0 - self.momentum) * mean[c];
            self.running_var[c] = self.momentum * self.running_var[c] + (1.0 - self.momentum) * var[c] * unbias;
        }
        Ok((out, NormCache { xhat, inv_std }))
    }

    pub(crate) fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, s) = channel_layout(x, self.channels, "batchnorm input")?;
        let mut out = x.clone();
        for i in 0..b {
            let o = out.row_mut(i);
            for c in 0..self.channels {
                let inv_std = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let (g, bta, m) = (self.gamma[c].to_f64(), self.beta[c].to_f64(), self.running_mean[c]);
                for v in &mut o[c * s..(c + 1) * s] {
                    *v = T::from_f64(g * (v.to_f64() - m) * inv_std + bta);
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let (b, s) = channel_layout(dy, self.channels, "batchnorm gradient")?;
        let count = (b * s) as f64;
        let mut dgamma = vec![0.0f64; self.channels];
        let mut dbeta = vec![0.0f64; self.channels];
        for i in 0..b {
            let (g, xh) = (dy.row(i), cache.xhat.row(i));
            for c in 0..self.channels {
                for j in c * s..(c + 1) * s {
                    dgamma[c] += g[j].to_f64() * xh[j].to_f64();
                    dbeta[c] += g[j].to_f64();
                }
            }
        }
        // dxhat = gamma * dy; sums of dxhat and dxhat * xhat follow from dbeta/dgamma
        let mut dx = dy.clone();
        for i in 0..b {
            let (g, xh) = (dy.row(i), cache.xhat.row(i));
            let o = dx.row_mut(i);
            for c in 0..self.channels {
                let gamma = self.gamma[c].to_f64();
                let mean = gamma * dbeta[c] / count;
                let mean_x = gamma * dgamma[c] / count;
                for j in c * s..(c + 1) * s {
                    let dxhat = gamma * g[j].to_f64();
                    o[j] = T::from_f64(cache.inv_std[c] * (dxhat - mean - xh[j].to_f64() * mean_x));
                }
            }
        }
        Ok((
            dx,
            dgamma.into_iter().map(T::from_f64).collect(),
            dbeta.into_iter().map(T::from_f64).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(shape: [usize; 4], scale: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| 1.5 + scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layernorm_standardizes_each_sample() {
        let x = sample([3, 2, 4, 4], 5.0, 1);
        let ln = LayerNorm::<f64>::new(2);
        let (y, _) = ln.forward(&x, false).unwrap();
        for i in 0..3 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-5, "{var}");
        }
    }

    #[test]
    fn batchnorm_standardizes_each_channel_in_train_mode() {
        let x = sample([6, 3, 2, 2], 4.0, 2);
        let mut bn = BatchNorm::<f64>::new(3, BATCHNORM_MOMENTUM);
        let (y, _) = bn.forward_train(&x).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..6).flat_map(|i| y.row(i)[c * 4..(c + 1) * 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-5, "{var}");
        }
        // running mean moved 10% of the way towards the batch mean of ~1.5
        assert!(bn.running_mean()[0] > 0.05 && bn.running_mean()[0] < 0.3);
    }

    #[test]
    fn batchnorm_eval_depends_only_on_running_stats() {
        let mut bn = BatchNorm::<f64>::new(2, BATCHNORM_MOMENTUM);
        bn.running_mean = vec![1.0, -1.0];
        bn.running_var = vec![4.0, 0.25];
        let x = Tensor::new([1, 2], vec![3.0, 0.0]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        let e = |v: f64, m: f64, var: f64| (v - m) / (var + NORM_EPS).sqrt();
        assert!((y.data()[0] - e(3.0, 1.0, 4.0)).abs() < 1e-12);
        assert!((y.data()[1] - e(0.0, -1.0, 0.25)).abs() < 1e-12);
        // single-sample output is independent of what else is in the batch
        let both = Tensor::new([2, 2], vec![3.0, 0.0, 100.0, -100.0]).unwrap();
        assert_eq!(bn.forward_eval(&both).unwrap().row(0), y.row(0));
    }
}
