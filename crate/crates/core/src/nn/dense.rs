use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Scalar, Tensor};

/// Input gradient (if requested), weight gradient, bias gradient.
pub(crate) type LayerGrads<T> = (Option<Tensor<T>>, Vec<T>, Vec<T>);

/// Fully connected layer, `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub(crate) input: usize,
    pub(crate) output: usize,
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    /// Kaiming-uniform weights, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / input as f64).sqrt();
        let weight = (0..input * output)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self {
            input,
            output,
            weight,
            bias: vec![T::ZERO; output],
        }
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn set_weight(&mut self, weight: Vec<T>) -> Result<()> {
        if weight.len() != self.weight.len() {
            return Err(Error::shape("dense weight", self.weight.len(), weight.len()));
        }
        self.weight = weight;
        Ok(())
    }

    pub fn set_bias(&mut self, bias: Vec<T>) -> Result<()> {
        if bias.len() != self.bias.len() {
            return Err(Error::shape("dense bias", self.bias.len(), bias.len()));
        }
        self.bias = bias;
        Ok(())
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = x.rows();
        if x.row_len() != self.input {
            return Err(Error::shape("dense input", self.input, x.row_len()));
        }
        let mut out = Vec::with_capacity(b * self.output);
        for _ in 0..b {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            Op::N,
            Op::T,
            x.data(),
            (b, self.input),
            &self.weight,
            (self.output, self.input),
            T::ONE,
            T::ONE,
            &mut out,
        );
        Tensor::new([b, self.output], out)
    }

    /// Returns `(dx, dW, db)`; `dx` is skipped when not needed.
    pub(crate) fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Result<LayerGrads<T>> {
        let b = x.rows();
        let mut dw = vec![T::ZERO; self.weight.len()];
        gemm(
            Op::T,
            Op::N,
            dy.data(),
            (b, self.output),
            x.data(),
            (b, self.input),
            T::ONE,
            T::ZERO,
            &mut dw,
        );
        let mut db = vec![0.0f64; self.output];
        for i in 0..b {
            for (acc, v) in db.iter_mut().zip(dy.row(i)) {
                *acc += v.to_f64();
            }
        }
        let db = db.into_iter().map(T::from_f64).collect();
        let dx = if need_dx {
            let mut dx = vec![T::ZERO; b * self.input];
            gemm(
                Op::N,
                Op::N,
                dy.data(),
                (b, self.output),
                &self.weight,
                (self.output, self.input),
                T::ONE,
                T::ZERO,
                &mut dx,
            );
            Some(Tensor::new(x.shape().to_vec(), dx)?)
        } else {
            None
        };
        Ok((dx, dw, db))
    }
}
