use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, Scalar, Tensor};

/// Fully-connected layer, `y = x·Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x` holds `n` rows of `input_dim` values.
    pub fn forward(&self, x: &[T], n: usize) -> Result<Vec<T>> {
        let (i, o) = (self.input_dim(), self.output_dim());
        if x.len() != n * i {
            return Err(Error::Shape(format!(
                "linear layer expects {n}x{i} input, got {} values",
                x.len()
            )));
        }
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(self.bias.data());
        }
        matmul_bt(n, i, o, x, self.weight.data(), &mut y, true);
        Ok(y)
    }

    pub fn backward(&self, x: &[T], dy: &[T], n: usize, grad: &mut Linear<T>, need_dx: bool) -> Option<Vec<T>> {
        let (i, o) = (self.input_dim(), self.output_dim());
        debug_assert_eq!(dy.len(), n * o);
        for row in dy.chunks_exact(o) {
            for (g, &d) in grad.bias.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
        // dW[o×i] += dYᵀ · X
        matmul_at(o, n, i, dy, x, grad.weight.data_mut(), true);
        need_dx.then(|| {
            let mut dx = vec![T::zero(); n * i];
            matmul(n, o, i, dy, self.weight.data(), &mut dx, false);
            dx
        })
    }
}
