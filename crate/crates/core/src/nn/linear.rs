use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Fully connected layer, `y = x W^T + b`, weight stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let [out, _] = weight.dims2()?;
        if bias.numel() != out {
            return Err(Error::Shape(format!("bias length {} != outputs {out}", bias.numel())));
        }
        Ok(Self { weight: weight.with_grad(), bias: bias.with_grad() })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub fn linear_forward<S: Scalar>(x: &Tensor<S>, p: &LinearParams<S>) -> Result<Tensor<S>> {
    let [n, inp] = x.dims2()?;
    if inp != p.in_features() {
        return Err(Error::Shape(format!(
            "linear input width {inp} != weight in_features {}",
            p.in_features()
        )));
    }
    let out = p.out_features();
    let mut y = vec![S::zero(); n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(p.bias.data());
    }
    gemm(false, true, n, out, inp, x.data(), p.weight.data(), &mut y, true);
    Tensor::new(vec![n, out], y)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    p: &mut LinearParams<S>,
) -> Result<Tensor<S>> {
    let [n, inp] = x.dims2()?;
    let out = p.out_features();
    if grad_out.shape() != [n, out] {
        return Err(Error::Shape(format!(
            "linear upstream gradient {:?} != [{n}, {out}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    {
        let (_, dw) = p.weight.data_and_grad_mut();
        gemm(true, false, out, inp, n, g, x.data(), dw, true);
    }
    {
        let (_, db) = p.bias.data_and_grad_mut();
        for row in g.chunks(out) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let mut dx = vec![S::zero(); n * inp];
    gemm(false, false, n, inp, out, g, p.weight.data(), &mut dx, false);
    Tensor::new(vec![n, inp], dx)
}
