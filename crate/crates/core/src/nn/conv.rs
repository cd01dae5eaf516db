//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Convolution weights `[out_filters, in_channels, kh, kw]` plus geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S> {
    pub weights: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    pub fn new(weights: Tensor<S>, stride: usize, padding: usize) -> Result<Self> {
        weights.dims4()?;
        if stride == 0 {
            return Err(Error::Shape("convolution stride must be positive".into()));
        }
        let weights = if weights.grad().is_some() { weights } else { weights.with_grad() };
        Ok(Self { weights, stride, padding })
    }

    pub fn out_filters(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// Number of weights in one filter (`in_channels * kh * kw`).
    pub fn filter_len(&self) -> usize {
        let s = self.weights.shape();
        s[1] * s[2] * s[3]
    }

    /// Weights of filter `f` as a contiguous slice.
    pub fn filter(&self, f: usize) -> &[S] {
        let len = self.filter_len();
        &self.weights.data()[f * len..(f + 1) * len]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Saved forward state: per-sample im2col matrices.
#[derive(Debug, Clone)]
pub struct ConvCache<S> {
    cols: Vec<S>,
    input_dims: [usize; 4],
    out_hw: (usize, usize),
}

fn check_input<S: Scalar>(input: &Tensor<S>, params: &ConvParams<S>) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    if dims[1] != params.in_channels() {
        return Err(Error::Shape(format!(
            "conv input has {} channels, weights expect {} (input {:?}, weights {:?})",
            dims[1],
            params.in_channels(),
            input.shape(),
            params.weights.shape()
        )));
    }
    input.check_finite("conv2d input")?;
    Ok(dims)
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * hw_out;
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [S],
) {
    let hw_out = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * hw_out;
                for oy in 0..ho {
                    let iy = (oy * stride + i) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + j) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW batch with zero padding, keeping the cache
/// needed by [`conv2d_backward`].
pub fn conv2d_forward_cached<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
) -> Result<(Tensor<S>, ConvCache<S>)> {
    let [n, c, h, w] = check_input(input, params)?;
    let (ho, wo) = params.output_hw(h, w)?;
    let (kh, kw) = params.kernel();
    let f = params.out_filters();
    let ckk = c * kh * kw;
    let hw_out = ho * wo;

    let mut cols = vec![S::zero(); n * ckk * hw_out];
    let mut out = vec![S::zero(); n * f * hw_out];
    let x = input.data();
    for s in 0..n {
        let col = &mut cols[s * ckk * hw_out..(s + 1) * ckk * hw_out];
        im2col(&x[s * c * h * w..(s + 1) * c * h * w], c, h, w, kh, kw, params.stride, params.padding, ho, wo, col);
        gemm(
            false,
            false,
            f,
            hw_out,
            ckk,
            params.weights.data(),
            col,
            &mut out[s * f * hw_out..(s + 1) * f * hw_out],
            false,
        );
    }
    let out = Tensor::new(vec![n, f, ho, wo], out)?;
    Ok((out, ConvCache { cols, input_dims: [n, c, h, w], out_hw: (ho, wo) }))
}

pub fn conv2d_forward<S: Scalar>(input: &Tensor<S>, params: &ConvParams<S>) -> Result<Tensor<S>> {
    conv2d_forward_cached(input, params).map(|(out, _)| out)
}

/// Accumulates the weight gradient into `params.weights` and returns the
/// input gradient when `want_input_grad` is set.
pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    params: &mut ConvParams<S>,
    cache: &ConvCache<S>,
    want_input_grad: bool,
) -> Result<Option<Tensor<S>>> {
    let [n, c, h, w] = cache.input_dims;
    let (ho, wo) = cache.out_hw;
    let f = params.out_filters();
    if grad_out.shape() != [n, f, ho, wo] {
        return Err(Error::Shape(format!(
            "conv upstream gradient {:?} does not match output [{n}, {f}, {ho}, {wo}]",
            grad_out.shape()
        )));
    }
    let (kh, kw) = params.kernel();
    let ckk = c * kh * kw;
    let hw_out = ho * wo;
    let g = grad_out.data();

    {
        let (_, dw) = params.weights.data_and_grad_mut();
        for s in 0..n {
            gemm(
                false,
                true,
                f,
                ckk,
                hw_out,
                &g[s * f * hw_out..(s + 1) * f * hw_out],
                &cache.cols[s * ckk * hw_out..(s + 1) * ckk * hw_out],
                dw,
                true,
            );
        }
    }

    if !want_input_grad {
        return Ok(None);
    }
    let mut dx = vec![S::zero(); n * c * h * w];
    let mut dcols = vec![S::zero(); ckk * hw_out];
    for s in 0..n {
        gemm(
            true,
            false,
            ckk,
            hw_out,
            f,
            params.weights.data(),
            &g[s * f * hw_out..(s + 1) * f * hw_out],
            &mut dcols,
            false,
        );
        col2im(&dcols, c, h, w, kh, kw, params.stride, params.padding, ho, wo, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
    }
    Ok(Some(Tensor::new(vec![n, c, h, w], dx)?))
}
