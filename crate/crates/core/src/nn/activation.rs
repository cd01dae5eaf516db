//! ReLU, global average pooling and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let data = x.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient through ReLU given the forward *output*; the derivative at 0 is 0.
pub fn relu_backward<S: Scalar>(grad: &Tensor<S>, output: &Tensor<S>) -> Result<Tensor<S>> {
    if grad.shape() != output.shape() {
        return Err(Error::Shape(format!(
            "relu gradient {:?} vs output {:?}",
            grad.shape(),
            output.shape()
        )));
    }
    let data = grad
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &o)| if o > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::new(grad.shape().to_vec(), data)
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let inv = S::one() / S::of(hw as f64);
    let data = x.data().chunks(hw).map(|p| p.iter().copied().sum::<S>() * inv).collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<S: Scalar>(grad: &Tensor<S>, input_dims: [usize; 4]) -> Result<Tensor<S>> {
    let [n, c, h, w] = input_dims;
    if grad.shape() != [n, c] {
        return Err(Error::Shape(format!("pool gradient {:?} != [{n}, {c}]", grad.shape())));
    }
    let hw = h * w;
    let inv = S::one() / S::of(hw as f64);
    let mut out = Vec::with_capacity(n * c * hw);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(vec![n, c, h, w], out)
}

#[derive(Debug, Clone)]
pub struct CrossEntropy<S> {
    /// Mean negative log-likelihood over the batch.
    pub loss: S,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor<S>,
    pub correct: usize,
}

/// Mean softmax cross-entropy over a `[N, classes]` batch of logits.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<CrossEntropy<S>> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
    }
    logits.check_finite("logits")?;
    let inv_n = S::one() / S::of(n as f64);
    let mut grad = vec![S::zero(); n * k];
    let mut loss = S::zero();
    let mut correct = 0;
    for (i, (row, g)) in logits.data().chunks(k).zip(grad.chunks_mut(k)).enumerate() {
        let (argmax, max) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, S::neg_infinity()), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        if argmax == labels[i] {
            correct += 1;
        }
        let mut z = S::zero();
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp();
            z += *gj;
        }
        loss += z.ln() + max - row[labels[i]];
        for gj in g.iter_mut() {
            *gj = *gj / z * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    Ok(CrossEntropy { loss: loss * inv_n, grad: Tensor::new(vec![n, k], grad)?, correct })
}
