use rand::Rng;

use super::dense::LayerGrads;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Scalar, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
///
/// Weights are `out x in x 3 x 3`; inputs and outputs are `b x C x H x W`.
/// Each sample is lowered with im2col and multiplied with one gemm.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub(crate) in_channels: usize,
    pub(crate) out_channels: usize,
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * TAPS * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::ZERO;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::ZERO;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * TAPS;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            in_channels,
            out_channels,
            weight,
            bias: vec![T::ZERO; out_channels],
        }
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    fn dims(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        match x.shape() {
            &[b, c, h, w] if c == self.in_channels && h >= 2 && w >= 2 => Ok((b, h, w)),
            s => Err(Error::shape(
                "conv2d input",
                format!("[b, {}, h, w]", self.in_channels),
                format!("{s:?}"),
            )),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, h, w) = self.dims(x)?;
        let hw = h * w;
        let k = self.in_channels * TAPS;
        let in_len = self.in_channels * hw;
        let out_len = self.out_channels * hw;
        let mut cols = vec![T::ZERO; k * hw];
        let mut out = vec![T::ZERO; b * out_len];
        for s in 0..b {
            im2col(&x.data()[s * in_len..(s + 1) * in_len], self.in_channels, h, w, &mut cols);
            let y = &mut out[s * out_len..(s + 1) * out_len];
            for (o, &bias) in self.bias.iter().enumerate() {
                y[o * hw..(o + 1) * hw].fill(bias);
            }
            gemm(
                Op::N,
                Op::N,
                &self.weight,
                (self.out_channels, k),
                &cols,
                (k, hw),
                T::ONE,
                T::ONE,
                y,
            );
        }
        Tensor::new([b, self.out_channels, h, w], out)
    }

    pub(crate) fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<LayerGrads<T>> {
        let (b, h, w) = self.dims(x)?;
        let hw = h * w;
        let k = self.in_channels * TAPS;
        let in_len = self.in_channels * hw;
        let out_len = self.out_channels * hw;
        let mut cols = vec![T::ZERO; k * hw];
        let mut dcols = vec![T::ZERO; k * hw];
        let mut dw = vec![T::ZERO; self.weight.len()];
        let mut db = vec![0.0f64; self.out_channels];
        let mut dx = if need_dx { vec![T::ZERO; b * in_len] } else { Vec::new() };
        for s in 0..b {
            let g = &dy.data()[s * out_len..(s + 1) * out_len];
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += g[o * hw..(o + 1) * hw].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            im2col(&x.data()[s * in_len..(s + 1) * in_len], self.in_channels, h, w, &mut cols);
            gemm(
                Op::N,
                Op::T,
                g,
                (self.out_channels, hw),
                &cols,
                (k, hw),
                T::ONE,
                T::ONE,
                &mut dw,
            );
            if need_dx {
                gemm(
                    Op::T,
                    Op::N,
                    &self.weight,
                    (self.out_channels, k),
                    g,
                    (self.out_channels, hw),
                    T::ONE,
                    T::ZERO,
                    &mut dcols,
                );
                col2im(&dcols, self.in_channels, h, w, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        let dx = if need_dx {
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        };
        Ok((dx, dw, db.into_iter().map(T::from_f64).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = vec![0.0; b * conv.out_channels * h * w];
        for s in 0..b {
            for o in 0..conv.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[o];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((s * c + ci) * h + sy as usize) * w + sx as usize];
                                    acc += conv.weight[((o * c + ci) * 3 + ky) * 3 + kx] * xv;
                                }
                            }
                        }
                        out[((s * conv.out_channels + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(2, 3, &mut rng);
        conv.bias = vec![0.1, -0.2, 0.3];
        let x = Tensor::new([2, 2, 5, 4], (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let fast = conv.forward(&x).unwrap();
        let slow = naive(&conv, &x);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_is_adjoint() {
        // <conv(x), g> - <bias term, g> == <x, dx(g)> for a linear map
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv2d::<f64>::new(3, 2, &mut rng);
        let x = Tensor::new([1, 3, 4, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = Tensor::new([1, 2, 4, 6], (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = conv.forward(&x).unwrap();
        let (dx, _, _) = conv.backward(&x, &g, true).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
