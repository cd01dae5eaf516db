//! Central finite-difference gradient checking (double precision only).

use crate::error::Result;
use crate::model::Network;
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward_cached, linear_backward,
    linear_forward, softmax_cross_entropy, BNParams, ConvParams, LinearParams,
};
use crate::tensor::Tensor;

/// Denominator floor of the relative error; keeps entries whose true
/// gradient is ~0 from turning round-off into huge ratios.
pub const REL_ERROR_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;

/// A scalar loss over a set of tensors whose gradients can be computed
/// analytically.
pub trait Objective {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>>;
    fn loss(&mut self) -> Result<f64>;
    /// Recompute the loss and overwrite every tensor's gradient buffer.
    fn loss_and_grad(&mut self) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: usize,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare every analytic gradient entry against `(L(w+h) - L(w-h)) / 2h`.
pub fn gradient_check<O: Objective>(obj: &mut O, step: f64) -> Result<GradCheckReport> {
    obj.loss_and_grad()?;
    let analytic: Vec<Vec<f64>> = obj
        .tensors_mut()
        .into_iter()
        .map(|t| t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_tensor: 0, worst_index: 0, checked: 0 };
    for (ti, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = obj.tensors_mut()[ti].data()[i];
            obj.tensors_mut()[ti].data_mut()[i] = orig + step;
            let plus = obj.loss()?;
            obj.tensors_mut()[ti].data_mut()[i] = orig - step;
            let minus = obj.loss()?;
            obj.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_tensor = ti;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn quadratic_loss(out: &[f64], proj: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(out.len());
    for (&o, &r) in out.iter().zip(proj) {
        loss += 0.5 * o * o + r * o;
        grad.push(o + r);
    }
    (loss, grad)
}

/// Single convolution under `L = sum(r * y) + sum(y^2) / 2`; checks the
/// weight and input gradients.
pub struct ConvFragment {
    pub params: ConvParams<f64>,
    pub input: Tensor<f64>,
    pub proj: Vec<f64>,
}

impl Objective for ConvFragment {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.params.weights, &mut self.input]
    }

    fn loss(&mut self) -> Result<f64> {
        let (y, _) = conv2d_forward_cached(&self.input, &self.params)?;
        Ok(quadratic_loss(y.data(), &self.proj).0)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let (y, cache) = conv2d_forward_cached(&self.input, &self.params)?;
        let (loss, g) = quadratic_loss(y.data(), &self.proj);
        self.params.weights.zero_grad();
        let dy = Tensor::new(y.shape().to_vec(), g)?;
        let dx = conv2d_backward(&dy, &mut self.params, &cache, true)?.expect("requested");
        let (_, gi) = self.input.data_and_grad_mut();
        gi.copy_from_slice(dx.data());
        Ok(loss)
    }
}

/// Training-mode batch-norm under `L = sum(r * z) + sum(z^2) / 2`; checks
/// the input, gamma and beta gradients.
pub struct BnFragment {
    pub params: BNParams<f64>,
    pub input: Tensor<f64>,
    pub proj: Vec<f64>,
}

impl Objective for BnFragment {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.input, &mut self.params.gamma, &mut self.params.beta]
    }

    fn loss(&mut self) -> Result<f64> {
        let (z, _) = batchnorm_forward(&self.input, &mut self.params, true)?;
        Ok(quadratic_loss(z.data(), &self.proj).0)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let (z, cache) = batchnorm_forward(&self.input, &mut self.params, true)?;
        let (loss, g) = quadratic_loss(z.data(), &self.proj);
        let grads = batchnorm_backward(&Tensor::new(z.shape().to_vec(), g)?, &self.params, cache.as_ref())?;
        self.input.data_and_grad_mut().1.copy_from_slice(grads.dy.data());
        self.params.gamma.data_and_grad_mut().1.copy_from_slice(&grads.dgamma);
        self.params.beta.data_and_grad_mut().1.copy_from_slice(&grads.dbeta);
        Ok(loss)
    }
}

/// Linear layer followed by mean softmax cross-entropy.
pub struct LinearCeFragment {
    pub params: LinearParams<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Objective for LinearCeFragment {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.params.weight, &mut self.params.bias, &mut self.input]
    }

    fn loss(&mut self) -> Result<f64> {
        let logits = linear_forward(&self.input, &self.params)?;
        Ok(softmax_cross_entropy(&logits, &self.labels)?.loss)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let logits = linear_forward(&self.input, &self.params)?;
        let ce = softmax_cross_entropy(&logits, &self.labels)?;
        self.params.weight.zero_grad();
        self.params.bias.zero_grad();
        let dx = linear_backward(&ce.grad, &self.input, &mut self.params)?;
        self.input.data_and_grad_mut().1.copy_from_slice(dx.data());
        Ok(ce.loss)
    }
}

/// A whole network on a fixed batch under softmax cross-entropy.
pub struct NetworkObjective<'a> {
    pub net: &'a mut Network<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Objective for NetworkObjective<'_> {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        self.net.params_mut().into_iter().map(|p| p.tensor).collect()
    }

    fn loss(&mut self) -> Result<f64> {
        let logits = self.net.forward(&self.input, true)?;
        Ok(softmax_cross_entropy(&logits, &self.labels)?.loss)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        Ok(self.net.loss_and_grad(&self.input, &self.labels)?.loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_ce_on_four_samples() {
        let w = Tensor::from_fn(&[3, 5], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let b = Tensor::from_fn(&[3], |i| i as f64 * 0.05);
        let mut frag = LinearCeFragment {
            params: LinearParams::new(w, b).unwrap(),
            input: Tensor::from_fn(&[4, 5], |i| ((i * 13 % 7) as f64 - 3.0) * 0.3),
            labels: vec![0, 2, 1, 2],
        };
        let rep = gradient_check(&mut frag, DEFAULT_STEP).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
        assert_eq!(rep.checked, 15 + 3 + 20);
    }
}
