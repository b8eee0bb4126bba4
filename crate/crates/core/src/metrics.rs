//! Dependence statistics and task metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance variances at or below this are treated as a constant input.
pub const DVAR_FLOOR: f64 = 1e-12;

fn distance_matrix(x: &Tensor) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            let v = s.sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Subtracts row and column means and adds back the grand mean, in place.
fn double_center(d: &mut [f64], n: usize) {
    let row_means: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    // distance matrices are symmetric, so column means equal row means
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] += grand - row_means[i] - row_means[j];
        }
    }
}

fn mean_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Squared sample distance correlation between the rows of `x` (`n x p`)
/// and `y` (`n x q`), using the biased (V-statistic) estimator.
pub fn dcor2(x: &Tensor, y: &Tensor) -> Result<f64> {
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::shape("dcor2 rows", n, y.rows()));
    }
    if n < 4 {
        return Err(Error::TooFewSamples { needed: 4, got: n });
    }
    x.check_finite("dcor2 input")?;
    y.check_finite("dcor2 input")?;
    let mut a = distance_matrix(x);
    let mut b = distance_matrix(y);
    double_center(&mut a, n);
    double_center(&mut b, n);
    let dvar_x = mean_product(&a, &a);
    let dvar_y = mean_product(&b, &b);
    if dvar_x <= DVAR_FLOOR || dvar_y <= DVAR_FLOOR {
        return Ok(0.0);
    }
    let v = mean_product(&a, &b) / (dvar_x * dvar_y).sqrt();
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupedDcor {
    /// dcor² within label 0 and label 1.
    pub per_group: [f64; 2],
    pub mean: f64,
}

/// dcor² between features and metadata computed separately inside each
/// label group, plus their average.
pub fn grouped_dcor2(features: &Tensor, meta: &Tensor, labels: &[f64]) -> Result<GroupedDcor> {
    let n = features.rows();
    if meta.rows() != n || labels.len() != n {
        return Err(Error::shape("grouped dcor2 rows", n, format!("{} / {}", meta.rows(), labels.len())));
    }
    let mut per_group = [0.0; 2];
    for (g, out) in per_group.iter_mut().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == g as f64).collect();
        if idx.len() < 4 {
            return Err(Error::TooFewSamples {
                needed: 4,
                got: idx.len(),
            });
        }
        *out = dcor2(&features.select_rows(&idx)?, &meta.select_rows(&idx)?)?;
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    Ok(GroupedDcor {
        per_group,
        mean: (per_group[0] + per_group[1]) / 2.0,
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::shape("pearson inputs", n, y.len()));
    }
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Point-biserial correlation via the mean-difference formula
/// `(mean_1 - mean_0) / s_y * sqrt(n_1 n_0 / n^2)` with population `s_y`.
pub fn point_biserial(b: &[f64], y: &[f64]) -> Result<f64> {
    let n = b.len();
    if y.len() != n {
        return Err(Error::shape("point-biserial inputs", n, y.len()));
    }
    if b.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Config("point-biserial group variable must be 0 or 1".into()));
    }
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&g, &v) in b.iter().zip(y) {
        if g == 1.0 {
            s1 += v;
            n1 += 1;
        } else {
            s0 += v;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::SingleClass);
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd == 0.0 {
        return Err(Error::ConstantInput);
    }
    let (n, n1, n0) = (n as f64, n1 as f64, n0 as f64);
    Ok((s1 / n1 - s0 / n0) / sd * (n1 * n0 / (n * n)).sqrt())
}

/// Fraction of samples where `logit > 0` agrees with the 0/1 label.
pub fn accuracy(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape("accuracy inputs", logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (z > 0.0) == (y == 1.0))
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Evaluation summary of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub batch_size: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub dcor2_group: [f64; 2],
    pub dcor2_mean: f64,
    /// Pearson correlation between eval logits and the raw confounder
    /// (0 when the logits are constant).
    pub pearson_meta: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "method,batch_size,seed,accuracy,dcor2_g1,dcor2_g2,dcor2_mean,pearson_meta";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.batch_size,
            self.seed,
            self.accuracy,
            self.dcor2_group[0],
            self.dcor2_group[1],
            self.dcor2_mean,
            self.pearson_meta
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new([v.len(), 1], v.to_vec()).unwrap()
    }

    fn random(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new([n, p], (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn self_and_affine_correlation_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(30, 3, &mut rng);
        assert!((dcor2(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let s = random(25, 1, &mut rng);
        let t = s.map(|v| -3.0 * v + 7.0);
        assert!((dcor2(&s, &t).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_input_gives_zero_and_small_n_errors() {
        let x = col(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let c = col(&[2.0; 5]);
        assert_eq!(dcor2(&x, &c).unwrap(), 0.0);
        let small = col(&[1.0, 2.0, 3.0]);
        assert!(matches!(dcor2(&small, &small), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn hand_sized_instance() {
        // X = Y^2 on a symmetric grid: uncorrelated but dependent
        let y = [-2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
        let x: Vec<f64> = y.iter().map(|v| v * v).collect();
        let v = dcor2(&col(&x), &col(&y)).unwrap();
        assert!(v > 0.3 && v < 1.0, "{v}");
    }

    #[test]
    fn grouped_requires_samples_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random(40, 2, &mut rng);
        let labels: Vec<f64> = (0..40).map(|i| f64::from(i >= 3)).collect();
        assert!(matches!(
            grouped_dcor2(&f, &f, &labels),
            Err(Error::TooFewSamples { got: 3, .. })
        ));
        let labels: Vec<f64> = (0..40).map(|i| f64::from(i % 2 == 0)).collect();
        let g = grouped_dcor2(&f, &f, &labels).unwrap();
        assert!((g.mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pearson_known_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &up).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &down).unwrap() + 1.0).abs() < 1e-15);
        // hand computation: sxy = 11.5, sxx = 82.5, syy = 10.9
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let b = [2.0, 1.0, 4.0, 3.0, 5.0, 4.0, 6.0, 5.0, 3.0, 4.0];
        let mb = 3.7;
        let sxy: f64 = a.iter().zip(&b).map(|(x, y)| (x - 5.5) * (y - mb)).sum();
        let syy: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let hand = sxy / (82.5f64 * syy).sqrt();
        assert!((pearson(&a, &b).unwrap() - hand).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::ConstantInput)));
    }

    #[test]
    fn point_biserial_known_values() {
        let b = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        let y = [1.0, 3.0, 2.0, 5.0, 4.0, 6.0, 5.0, 2.0];
        // means 2 and 5, n0 = n1 = 4, population sd of y
        let m = 28.0 / 8.0;
        let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0f64).sqrt();
        let hand = (5.0 - 2.0) / sd * 0.5;
        assert!((point_biserial(&b, &y).unwrap() - hand).abs() < 1e-12);
        let flat = [1.0, 2.0, 1.0, 2.0];
        assert!(point_biserial(&[0.0, 0.0, 1.0, 1.0], &flat).unwrap().abs() < 1e-15);
        assert!(matches!(point_biserial(&[1.0; 3], &[1.0, 2.0, 3.0]), Err(Error::SingleClass)));
    }

    #[test]
    fn accuracy_cases() {
        let labels = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(accuracy(&[2.0, -1.0, 0.5, -3.0], &labels).unwrap(), 1.0);
        assert_eq!(accuracy(&[-2.0, 1.0, -0.5, 3.0], &labels).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        assert!((accuracy(&logits, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn dcor2_symmetric_bounded_shift_invariant(seed in 0u64..10_000, n in 4usize..20, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(n, 2, &mut rng);
            let y = random(n, 1, &mut rng);
            let v = dcor2(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - dcor2(&y, &x).unwrap()).abs() < 1e-12);
            let shifted = x.map(|a| a + shift);
            prop_assert!((v - dcor2(&shifted, &y).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn point_biserial_equals_pearson(seed in 0u64..10_000, n in 3usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            b[0] = 0.0;
            b[1] = 1.0;
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let pb = point_biserial(&b, &y).unwrap();
            prop_assert!((pb - pearson(&b, &y).unwrap()).abs() < 1e-12);
        }
    }
}
