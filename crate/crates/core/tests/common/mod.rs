//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use confound_guard::linalg::{ColumnRole, MetaBatch};
use confound_guard::mdn::{pmdn_loss, PmdnParams};
use confound_guard::synth::{threshold_accuracy, Dataset};
use confound_guard::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Squared distance covariance straight from its definition,
/// `S1 + S2 - 2 S3`, with an explicit triple loop for `S3`.
pub fn dcov2_defining(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let nf = n as f64;
    let mut s1 = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut s3 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = euclid(&x[i], &x[j]);
            let b = euclid(&y[i], &y[j]);
            s1 += a * b;
            sx += a;
            sy += b;
            for k in 0..n {
                s3 += a * euclid(&y[i], &y[k]);
            }
        }
    }
    s1 / (nf * nf) + (sx / (nf * nf)) * (sy / (nf * nf)) - 2.0 * s3 / (nf * nf * nf)
}

/// Squared distance correlation from [`dcov2_defining`].
pub fn dcor2_defining(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let xy = dcov2_defining(x, y);
    let xx = dcov2_defining(x, x);
    let yy = dcov2_defining(y, y);
    if xx * yy <= 0.0 {
        return 0.0;
    }
    xy / (xx * yy).sqrt()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new([rows, cols], data).unwrap()
}

/// A random metadata batch `[1, z_1 .. z_q]` with a well-conditioned Gram.
pub fn random_meta(n: usize, q: usize, rng: &mut ChaCha8Rng) -> MetaBatch {
    let mut data = Vec::with_capacity(n * (q + 1));
    for _ in 0..n {
        data.push(1.0);
        for _ in 0..q {
            data.push(rng.gen_range(-2.0..2.0));
        }
    }
    let mut roles = vec![ColumnRole::Intercept];
    roles.extend(std::iter::repeat_n(ColumnRole::Confounder, q));
    MetaBatch::new(Tensor::new([n, q + 1], data).unwrap(), roles).unwrap()
}

/// Plain gradient descent on the PMDN metadata loss with the features held
/// fixed. Returns the final coefficients.
pub fn pmdn_descent(f: &Tensor, meta: &MetaBatch, lr: f64, steps: usize) -> PmdnParams {
    let mut params = PmdnParams::zeros(f.row_len(), meta.roles().to_vec());
    for _ in 0..steps {
        let l = pmdn_loss(f, meta, &params).unwrap();
        params.step(&l.grad, lr).unwrap();
    }
    params
}

/// Picks the threshold on the main-feature variance that maximizes accuracy
/// on `fit` and reports accuracy on `test`.
pub fn fitted_threshold_accuracy(fit: &[(u8, f64)], test: &[(u8, f64)]) -> (f64, f64) {
    let mut candidates: Vec<f64> = fit.iter().map(|p| p.1).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let step = (candidates.len() / 400).max(1);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in candidates.iter().step_by(step) {
        let acc = threshold_accuracy(fit.iter().copied(), t);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    (threshold_accuracy(test.iter().copied(), best.1), best.1)
}

/// `(label, main_sigma2)` pairs of a dataset.
pub fn main_feature_pairs(ds: &Dataset) -> Vec<(u8, f64)> {
    ds.samples.iter().map(|s| (s.label, s.main_sigma2)).collect()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
