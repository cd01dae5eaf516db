//! Per-channel batch normalization over NCHW tensors.
//!
//! The backward pass is written as the explicit three-term chain rule
//! (direct path through `1/sqrt(var + eps)`, the mean coupling and the
//! variance coupling) rather than the folded closed form. When a channel is
//! identically zero (`mean = var = 0`) the direct term is scaled by
//! `1/sqrt(eps)`, which is what produces pulse gradients on freshly pruned
//! filters.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BNParams<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub eps: S,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    /// Weight of the newest batch statistic in the running averages.
    pub momentum: S,
}

impl<S: Scalar> BNParams<S> {
    pub fn new(channels: usize) -> Self {
        Self::with_config(channels, S::of(DEFAULT_EPS), S::of(DEFAULT_MOMENTUM))
    }

    pub fn with_config(channels: usize, eps: S, momentum: S) -> Self {
        assert!(eps > S::zero(), "BN eps must be positive");
        assert!(momentum > S::zero() && momentum < S::one(), "BN momentum must lie in (0, 1)");
        Self {
            gamma: Tensor::full(&[channels], S::one()).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            eps,
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Forward-pass quantities retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<S> {
    dims: [usize; 4],
    centered: Vec<S>,
    var: Vec<S>,
}

impl<S: Scalar> BnCache<S> {
    /// Biased batch variance of each channel.
    pub fn batch_var(&self) -> &[S] {
        &self.var
    }
}

#[derive(Debug, Clone)]
pub struct BnGrads<S> {
    pub dy: Tensor<S>,
    pub dgamma: Vec<S>,
    pub dbeta: Vec<S>,
}

/// `z = beta + gamma * (y - mean) / sqrt(var + eps)` per channel.
///
/// Training mode uses biased batch statistics over `N*H*W` and updates the
/// running estimates; inference mode uses the running estimates.
pub fn batchnorm_forward<S: Scalar>(
    y: &Tensor<S>,
    params: &mut BNParams<S>,
    training: bool,
) -> Result<(Tensor<S>, Option<BnCache<S>>)> {
    let [n, c, h, w] = y.dims4()?;
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "batchnorm over {c} channels but parameters have {}",
            params.channels()
        )));
    }
    y.check_finite("batchnorm input")?;
    let hw = h * w;
    let m = n * hw;
    let m_s = S::of(m as f64);
    let x = y.data();
    let gamma = params.gamma.data().to_vec();
    let beta = params.beta.data().to_vec();
    let mut out = vec![S::zero(); x.len()];

    if !training {
        for ch in 0..c {
            let scale = gamma[ch] / (params.running_var[ch] + params.eps).sqrt();
            let mean = params.running_mean[ch];
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = beta[ch] + scale * (x[i] - mean);
                }
            }
        }
        return Ok((Tensor::new(y.shape().to_vec(), out)?, None));
    }

    let mut centered = vec![S::zero(); x.len()];
    let mut vars = vec![S::zero(); c];
    for ch in 0..c {
        let mut sum = S::zero();
        for s in 0..n {
            let base = (s * c + ch) * hw;
            sum += x[base..base + hw].iter().copied().sum::<S>();
        }
        let mean = sum / m_s;
        let mut sq = S::zero();
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let d = x[i] - mean;
                centered[i] = d;
                sq += d * d;
            }
        }
        let var = sq / m_s;
        vars[ch] = var;
        let inv_std = S::one() / (var + params.eps).sqrt();
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                out[i] = beta[ch] + gamma[ch] * centered[i] * inv_std;
            }
        }
        let unbiased = if m > 1 { var * m_s / S::of((m - 1) as f64) } else { var };
        let mom = params.momentum;
        params.running_mean[ch] = (S::one() - mom) * params.running_mean[ch] + mom * mean;
        params.running_var[ch] = (S::one() - mom) * params.running_var[ch] + mom * unbiased;
    }
    let out = Tensor::new(y.shape().to_vec(), out)?;
    Ok((out, Some(BnCache { dims: [n, c, h, w], centered, var: vars })))
}

/// Gradients of the training-mode forward pass with respect to `y`, `gamma`
/// and `beta`.
pub fn batchnorm_backward<S: Scalar>(
    upstream: &Tensor<S>,
    params: &BNParams<S>,
    cache: Option<&BnCache<S>>,
) -> Result<BnGrads<S>> {
    let cache = cache.ok_or_else(|| {
        Error::Contract("batchnorm backward needs a training-mode forward cache".into())
    })?;
    let [n, c, h, w] = cache.dims;
    if upstream.shape() != [n, c, h, w] {
        return Err(Error::Shape(format!(
            "batchnorm upstream gradient {:?} does not match cached [{n}, {c}, {h}, {w}]",
            upstream.shape()
        )));
    }
    let hw = h * w;
    let m_s = S::of((n * hw) as f64);
    let two = S::of(2.0);
    let half = S::of(0.5);
    let dz = upstream.data();
    let gamma = params.gamma.data();
    let mut dy = vec![S::zero(); dz.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];

    for ch in 0..c {
        let var_eps = cache.var[ch] + params.eps;
        let inv_std = S::one() / var_eps.sqrt();
        let inv_std3 = inv_std * inv_std * inv_std;
        let g = gamma[ch];

        // dL/dvar and the sums needed for dL/dmean.
        let mut dvar = S::zero();
        let mut dxhat_sum = S::zero();
        let mut centered_sum = S::zero();
        let mut dg = S::zero();
        let mut db = S::zero();
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let d = cache.centered[i];
                let dxhat = dz[i] * g;
                dvar += dxhat * d;
                dxhat_sum += dxhat;
                centered_sum += d;
                dg += dz[i] * d * inv_std;
                db += dz[i];
            }
        }
        dvar = -half * dvar * inv_std3;
        let dmean = -dxhat_sum * inv_std + dvar * (-two * centered_sum / m_s);

        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let direct = dz[i] * g * inv_std;
                let var_term = dvar * two * cache.centered[i] / m_s;
                let mean_term = dmean / m_s;
                dy[i] = direct + var_term + mean_term;
            }
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
    }
    Ok(BnGrads { dy: Tensor::new(vec![n, c, h, w], dy)?, dgamma, dbeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let y = Tensor::<f64>::full(&[2, 1, 2, 2], 7.5);
        let mut p = BNParams::new(1);
        let (z, _) = batchnorm_forward(&y, &mut p, true).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn balanced_pair_is_standardized_then_affine() {
        let y = Tensor::<f64>::new(vec![2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let mut p = BNParams::with_config(1, 1e-12, 0.1);
        p.gamma.data_mut()[0] = 2.0;
        p.beta.data_mut()[0] = 3.0;
        let (z, _) = batchnorm_forward(&y, &mut p, true).unwrap();
        assert!((z.data()[0] - 1.0).abs() < 1e-9);
        assert!((z.data()[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn inference_with_identity_stats_scales_by_eps_factor() {
        let y = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64 - 3.0);
        let mut p = BNParams::new(2);
        let (z, cache) = batchnorm_forward(&y, &mut p, false).unwrap();
        assert!(cache.is_none());
        let f = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in z.data().iter().zip(y.data()) {
            assert!((a - b * f).abs() < 1e-15);
        }
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let y = Tensor::<f64>::new(vec![4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut p = BNParams::new(1);
        batchnorm_forward(&y, &mut p, true).unwrap();
        assert!((p.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased var = 5/3
        assert!((p.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let y = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let mut p = BNParams::new(2);
        assert!(matches!(batchnorm_forward(&y, &mut p, true), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_without_cache_is_a_contract_error() {
        let p = BNParams::<f64>::new(1);
        let g = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(batchnorm_backward(&g, &p, None), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let y = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| ((i * 7) % 5) as f64);
        let mut p = BNParams::new(2);
        let (_, cache) = batchnorm_forward(&y, &mut p, true).unwrap();
        let grads = batchnorm_backward(&Tensor::zeros(&[2, 2, 3, 3]), &p, cache.as_ref()).unwrap();
        assert!(grads.dy.data().iter().all(|&v| v == 0.0));
        assert!(grads.dgamma.iter().chain(&grads.dbeta).all(|&v| v == 0.0));
    }
}
