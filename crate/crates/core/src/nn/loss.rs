use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits, `max(z,0) - z y + ln(1 + e^-|z|)`,
/// and its gradient `(sigmoid(z) - y) / b` shaped like `logits`.
pub fn bce_loss<T: Scalar>(logits: &Tensor<T>, targets: &[T]) -> Result<(f64, Tensor<T>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape("bce targets", logits.len(), targets.len()));
    }
    let b = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(targets.len());
    for (&z, &y) in logits.data().iter().zip(targets) {
        let (z, y) = (z.to_f64(), y.to_f64());
        if y != 0.0 && y != 1.0 {
            return Err(Error::Config(format!("bce targets must be 0 or 1, got {y}")));
        }
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad.push(T::from_f64((sigmoid(z) - y) / b));
    }
    Ok((loss / b, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(z: f64, y: f64) -> (f64, f64) {
        let (l, g) = bce_loss(&Tensor::new([1, 1], vec![z]).unwrap(), &[y]).unwrap();
        (l, g.data()[0])
    }

    #[test]
    fn known_values() {
        let (l, g) = one(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g + 0.5).abs() < 1e-12);
        let (l, _) = one(20.0, 1.0);
        assert!((l - 2.061153618e-9).abs() < 1e-15, "{l}");
        let (l, _) = one(-800.0, 1.0);
        assert!((l - 800.0).abs() < 1e-9);
        assert!(one(800.0, 0.0).0.is_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = vec![0.3, -1.7, 2.5, -0.1, 4.0];
        let targets = [1.0, 0.0, 0.0, 1.0, 1.0];
        let t = Tensor::new([5, 1], logits.clone()).unwrap();
        let (_, g) = bce_loss(&t, &targets).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            let at = |d: f64| {
                let mut l = logits.clone();
                l[i] += d;
                bce_loss(&Tensor::new([5, 1], l).unwrap(), &targets).unwrap().0
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            assert!((numeric - g.data()[i]).abs() <= 1e-6 * numeric.abs().max(1e-3), "{i}");
        }
    }

    #[test]
    fn rejects_non_binary_targets() {
        let t = Tensor::new([1], vec![0.0f64]).unwrap();
        assert!(bce_loss(&t, &[0.5]).is_err());
        assert!(bce_loss(&t, &[1.0, 0.0]).is_err());
    }
}
