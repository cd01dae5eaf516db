use proptest::prelude::*;

use psap::gradcheck::{gradient_check, ConvFragment, Objective, DEFAULT_STEP};
use psap::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, conv2d_forward_cached, relu_backward,
    relu_forward, BNParams, ConvParams,
};
use psap::optim::{sgd_step, Param, SgdConfig, SgdState};
use psap::{Result, Tensor64};

fn reference_conv(x: &Tensor64, w: &Tensor64, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * f * ho * wo);
    for s in 0..n {
        for o in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for a in 0..kh {
                            for b in 0..kw {
                                let (y, z) = ((i * stride + a) as isize - pad as isize, (j * stride + b) as isize - pad as isize);
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < wd {
                                    acc += x.data()[((s * c + ch) * h + y as usize) * wd + z as usize]
                                        * w.data()[((o * c + ch) * kh + a) * kw + b];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn ramp(shape: &[usize], mul: usize, modulo: usize, scale: f64) -> Tensor64 {
    Tensor64::from_fn(shape, |i| ((i * mul) % modulo) as f64 * scale - 0.5)
}

#[test]
fn identity_kernel_passes_input_through() {
    let x = Tensor64::full(&[1, 1, 3, 3], 1.0);
    let p = ConvParams::new(Tensor64::full(&[1, 1, 1, 1], 1.0), 1, 0).unwrap();
    let y = conv2d_forward(&x, &p).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 1.0));
}

#[test]
fn zero_weights_give_zero_output() {
    let x = ramp(&[2, 3, 5, 5], 7, 13, 0.3);
    let p = ConvParams::new(Tensor64::zeros(&[4, 3, 3, 3]), 2, 1).unwrap();
    assert!(conv2d_forward(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn matches_loop_reference_on_2x3x8x8() {
    let x = ramp(&[2, 3, 8, 8], 37, 101, 0.01);
    let w = ramp(&[4, 3, 3, 3], 11, 17, 0.07);
    let expected = reference_conv(&x, &w, 1, 1);
    let y = conv2d_forward(&x, &ConvParams::new(w, 1, 1).unwrap()).unwrap();
    assert_eq!(y.shape(), &[2, 4, 8, 8]);
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let p = ConvParams::new(Tensor64::zeros(&[2, 3, 3, 3]), 1, 1).unwrap();
    assert!(matches!(conv2d_forward(&Tensor64::zeros(&[1, 2, 4, 4]), &p), Err(psap::Error::Shape(_))));
}

#[test]
fn constant_channel_normalizes_to_zero() {
    let y = Tensor64::full(&[4, 1, 2, 2], 3.5);
    let mut bn = BNParams::<f64>::new(1);
    let (z, _) = batchnorm_forward(&y, &mut bn, true).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn balanced_plus_minus_one_is_standardized_then_shifted() {
    let y = Tensor64::new(vec![4, 1, 1, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
    let mut bn = BNParams::with_config(1, 1e-12, 0.1);
    bn.gamma.data_mut()[0] = 2.0;
    bn.beta.data_mut()[0] = 3.0;
    let (z, _) = batchnorm_forward(&y, &mut bn, true).unwrap();
    for (v, e) in z.data().iter().zip([1.0, 5.0, 1.0, 5.0]) {
        assert!((v - e).abs() < 1e-9, "{v} vs {e}");
    }
}

#[test]
fn inference_with_identity_statistics() {
    let y = ramp(&[2, 2, 3, 3], 5, 11, 0.4);
    let mut bn = BNParams::<f64>::new(2);
    let (z, cache) = batchnorm_forward(&y, &mut bn, false).unwrap();
    assert!(cache.is_none());
    let f = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in z.data().iter().zip(y.data()) {
        assert!((a - b * f).abs() < 1e-15);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let y = ramp(&[3, 2, 2, 2], 7, 9, 0.5);
    let mut bn = BNParams::<f64>::new(2);
    let (_, cache) = batchnorm_forward(&y, &mut bn, true).unwrap();
    let g = batchnorm_backward(&Tensor64::zeros(&[3, 2, 2, 2]), &bn, cache.as_ref()).unwrap();
    assert!(g.dy.data().iter().chain(&g.dgamma).chain(&g.dbeta).all(|&v| v == 0.0));
}

#[test]
fn backward_without_cache_is_contract_error() {
    let bn = BNParams::<f64>::new(1);
    assert!(matches!(batchnorm_backward(&Tensor64::zeros(&[1, 1, 1, 1]), &bn, None), Err(psap::Error::Contract(_))));
}

fn one_param_step(w: f64, g: f64, cfg: SgdConfig) -> f64 {
    let mut t = Tensor64::new(vec![1], vec![w]).unwrap().with_grad();
    t.grad_mut().unwrap()[0] = g;
    let mut state = SgdState::new(cfg);
    sgd_step(&mut [Param { name: "w".into(), tensor: &mut t }], &mut state).unwrap();
    t.data()[0]
}

#[test]
fn sgd_single_scalar_step() {
    let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.0, clip_max_norm: None };
    assert!((one_param_step(1.0, 1.0, cfg) - 0.9).abs() < 1e-15);
    assert_eq!(one_param_step(1.0, 0.0, cfg), 1.0);
}

#[test]
fn sgd_clips_global_norm() {
    // grad (30, 40) has norm 50; clipping to 5 scales it by 0.1.
    let run = |clip| {
        let mut t = Tensor64::new(vec![2], vec![1.0, 1.0]).unwrap().with_grad();
        t.grad_mut().unwrap().copy_from_slice(&[30.0, 40.0]);
        let cfg = SgdConfig { learning_rate: 0.01, momentum: 0.9, weight_decay: 0.0, clip_max_norm: clip };
        let mut state = SgdState::new(cfg);
        let rep = sgd_step(&mut [Param { name: "w".into(), tensor: &mut t }], &mut state).unwrap();
        (t.data().to_vec(), rep)
    };
    let (clipped, rep) = run(Some(5.0));
    assert_eq!(rep.grad_norm, 50.0);
    assert!((rep.clip_scale - 0.1).abs() < 1e-15);
    assert!((clipped[0] - (1.0 - 0.01 * 3.0)).abs() < 1e-15);
    assert!((clipped[1] - (1.0 - 0.01 * 4.0)).abs() < 1e-15);
    let (raw, _) = run(None);
    assert!(((1.0 - raw[1]) / (1.0 - clipped[1]) - 10.0).abs() < 1e-9);
}

#[test]
fn sgd_non_finite_gradient_is_numerical_error() {
    let mut t = Tensor64::new(vec![1], vec![1.0]).unwrap().with_grad();
    t.grad_mut().unwrap()[0] = f64::NAN;
    let mut state = SgdState::new(SgdConfig::default());
    let res = sgd_step(&mut [Param { name: "w".into(), tensor: &mut t }], &mut state);
    assert!(matches!(res, Err(psap::Error::Numerical(_))));
}

/// conv -> BN -> ReLU under a quadratic loss, with BN's shift chosen so
/// every ReLU input sits well away from zero.
struct ConvBnRelu {
    conv: ConvParams<f64>,
    bn: BNParams<f64>,
    x: Tensor64,
}

fn stack_loss(a: &Tensor64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut da = Vec::with_capacity(a.numel());
    for (i, v) in a.data().iter().enumerate() {
        let r = ((i % 5) as f64 - 2.0) * 0.1;
        loss += v * v * 0.5 + v * r;
        da.push(v + r);
    }
    (loss, da)
}

impl Objective for ConvBnRelu {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor64> {
        vec![&mut self.conv.weights, &mut self.bn.gamma, &mut self.bn.beta]
    }

    fn loss(&mut self) -> Result<f64> {
        let y = conv2d_forward(&self.x, &self.conv)?;
        let (z, _) = batchnorm_forward(&y, &mut self.bn, true)?;
        Ok(stack_loss(&relu_forward(&z)).0)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let (y, conv_cache) = conv2d_forward_cached(&self.x, &self.conv)?;
        let (z, bn_cache) = batchnorm_forward(&y, &mut self.bn, true)?;
        let a = relu_forward(&z);
        let (loss, da) = stack_loss(&a);
        let dz = relu_backward(&Tensor64::new(a.shape().to_vec(), da)?, &a)?;
        let g = batchnorm_backward(&dz, &self.bn, bn_cache.as_ref())?;
        self.bn.gamma.data_and_grad_mut().1.copy_from_slice(&g.dgamma);
        self.bn.beta.data_and_grad_mut().1.copy_from_slice(&g.dbeta);
        self.conv.weights.zero_grad();
        conv2d_backward(&g.dy, &mut self.conv, &conv_cache, false)?;
        Ok(loss)
    }
}

#[test]
fn conv_bn_relu_stack_gradient() {
    let mut bn = BNParams::<f64>::new(3);
    // Standardized values lie within about +-2.2 here; a shift of 3 with
    // gamma 0.5 keeps every ReLU input positive.
    bn.gamma.data_mut().iter_mut().for_each(|g| *g = 0.5);
    bn.beta.data_mut().iter_mut().for_each(|b| *b = 3.0);
    let mut obj = ConvBnRelu {
        conv: ConvParams::new(ramp(&[3, 2, 3, 3], 13, 23, 0.05).with_grad(), 1, 1).unwrap(),
        bn,
        x: ramp(&[2, 2, 4, 4], 29, 31, 0.04),
    };
    let rep = gradient_check(&mut obj, DEFAULT_STEP).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    let again = gradient_check(&mut obj, DEFAULT_STEP).unwrap();
    assert_eq!(rep.max_rel_error.to_bits(), again.max_rel_error.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_equals_loop_reference(
        n in 1usize..3, c in 1usize..4, f in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5]),
        pad in 0usize..3, stride in 1usize..3, extra_h in 0usize..5, extra_w in 0usize..5, seed in 0usize..1000,
    ) {
        let (h, w) = (k + extra_h, k + extra_w);
        let x = Tensor64::from_fn(&[n, c, h, w], |i| (((i + seed) * 7919) % 211) as f64 / 105.0 - 1.0);
        let wt = Tensor64::from_fn(&[f, c, k, k], |i| (((i + seed) * 104729) % 97) as f64 / 48.0 - 1.0);
        let expected = reference_conv(&x, &wt, stride, pad);
        let y = conv2d_forward(&x, &ConvParams::new(wt, stride, pad).unwrap()).unwrap();
        prop_assert_eq!(y.numel(), expected.len());
        for (a, b) in y.data().iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences(
        c in 1usize..3, f in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0usize..500,
    ) {
        let h = k + 2;
        let mut frag = ConvFragment {
            params: ConvParams::new(
                Tensor64::from_fn(&[f, c, k, k], |i| (((i + seed) * 31) % 17) as f64 / 8.0 - 1.0).with_grad(),
                stride,
                pad,
            ).unwrap(),
            input: Tensor64::from_fn(&[2, c, h, h], |i| (((i + seed) * 53) % 19) as f64 / 9.0 - 1.0).with_grad(),
            proj: Vec::new(),
        };
        let (ho, wo) = frag.params.output_hw(h, h).unwrap();
        frag.proj = (0..2 * f * ho * wo).map(|i| ((i * 3) % 7) as f64 / 7.0 - 0.5).collect();
        let rep = gradient_check(&mut frag, DEFAULT_STEP).unwrap();
        prop_assert!(rep.max_rel_error <= 1e-4, "{:?}", rep);
    }
}
