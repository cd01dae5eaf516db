//! Model builders and the conv/BN network used by the pruning engine.
//!
//! Every convolution is paired with the batch-norm that immediately follows
//! it; the pair is a [`ConvUnit`], the granularity at which filters are
//! masked. Units are stored in forward execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward_cached, global_avg_pool,
    global_avg_pool_backward, linear_backward, linear_forward, relu_backward, relu_forward,
    softmax_cross_entropy, BNParams, BnCache, ConvCache, ConvParams, CrossEntropy, LinearParams,
};
use crate::optim::Param;
use crate::rng::{derive_seed, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// One conv -> BN (-> ReLU) layer of a plain network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_true")]
    pub relu: bool,
}

impl ConvSpec {
    pub fn new(out_channels: usize) -> Self {
        Self { out_channels, kernel: 3, stride: 1, relu: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Plain stack of conv/BN/ReLU layers, global average pool, linear head.
    CnnSmall { layers: Vec<ConvSpec> },
    /// CIFAR-style ResNet: stem, three stages of `n_blocks` basic blocks with
    /// widths `w, 2w, 4w`, global pool, linear head. `n_blocks = 3` is the
    /// ResNet-20 shape, `n_blocks = 9` ResNet-56.
    ResnetTiny { n_blocks: usize, base_width: usize },
    /// Linear classifier on raw pixels.
    MlpProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {:?} has a zero dimension", self.input_shape)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        match &self.architecture {
            Architecture::CnnSmall { layers } => {
                if layers.is_empty() {
                    return Err(Error::Config("cnn_small needs at least one layer".into()));
                }
                for (i, l) in layers.iter().enumerate() {
                    if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                        return Err(Error::Config(format!("cnn_small layer {i} has a zero size: {l:?}")));
                    }
                }
            }
            Architecture::ResnetTiny { n_blocks, base_width } => {
                if *n_blocks == 0 || *base_width == 0 {
                    return Err(Error::Config("resnet_tiny needs n_blocks >= 1 and base_width >= 1".into()));
                }
                if h < 4 || w < 4 {
                    return Err(Error::Config("resnet_tiny needs inputs of at least 4x4".into()));
                }
            }
            Architecture::MlpProbe => {}
        }
        Ok(())
    }
}

/// A convolution together with the batch-norm that normalizes its output.
#[derive(Debug, Clone)]
pub struct ConvUnit<S> {
    pub name: String,
    pub conv: ConvParams<S>,
    pub bn: BNParams<S>,
    /// Shortcut projections are exempt from masking.
    pub maskable: bool,
    /// Unit whose (post-BN/ReLU) output is the *sole* input of this unit; a
    /// pruned filter there removes one of this unit's input channels.
    pub input_from: Option<usize>,
    conv_cache: Option<ConvCache<S>>,
    bn_cache: Option<BnCache<S>>,
}

impl<S: Scalar> ConvUnit<S> {
    fn forward(&mut self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let (y, conv_cache) = conv2d_forward_cached(x, &self.conv)?;
        let (z, bn_cache) = batchnorm_forward(&y, &mut self.bn, training)?;
        if training {
            self.conv_cache = Some(conv_cache);
            self.bn_cache = bn_cache;
        } else {
            self.conv_cache = None;
            self.bn_cache = None;
        }
        Ok(z)
    }

    fn backward(&mut self, dz: &Tensor<S>, want_input_grad: bool) -> Result<Option<Tensor<S>>> {
        let grads = batchnorm_backward(dz, &self.bn, self.bn_cache.as_ref())?;
        for (g, d) in self.bn.gamma.data_and_grad_mut().1.iter_mut().zip(&grads.dgamma) {
            *g += *d;
        }
        for (g, d) in self.bn.beta.data_and_grad_mut().1.iter_mut().zip(&grads.dbeta) {
            *g += *d;
        }
        let cache = self
            .conv_cache
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{}: backward before training forward", self.name)))?;
        conv2d_backward(&grads.dy, &mut self.conv, cache, want_input_grad)
    }

    /// Batch variance of each channel's pre-BN output in the last training forward.
    pub fn last_batch_var(&self) -> Option<&[S]> {
        self.bn_cache.as_ref().map(|c| c.batch_var())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Block {
    Plain { unit: usize, relu: bool },
    Residual { a: usize, b: usize, proj: Option<usize> },
}

#[derive(Debug, Clone)]
enum BlockCache<S> {
    Plain { out: Option<Tensor<S>> },
    Residual { hidden: Tensor<S>, out: Tensor<S> },
}

#[derive(Debug, Clone)]
pub struct Network<S> {
    spec: ModelSpec,
    units: Vec<ConvUnit<S>>,
    blocks: Vec<Block>,
    pub head: LinearParams<S>,
    block_caches: Vec<BlockCache<S>>,
    head_input: Option<Tensor<S>>,
    feature_dims: Option<[usize; 4]>,
    forward_trace: Vec<usize>,
}

fn kaiming<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| S::of(normal.sample(rng)))
}

/// Draw filter weights from the initializer used at construction time.
pub fn sample_filter<S: Scalar>(rng: &mut ChaCha8Rng, len: usize) -> Vec<S> {
    let normal = Normal::new(0.0, (2.0 / len as f64).sqrt()).expect("finite std");
    (0..len).map(|_| S::of(normal.sample(rng))).collect()
}

struct Builder<'a, S> {
    rng: &'a mut ChaCha8Rng,
    units: Vec<ConvUnit<S>>,
}

impl<S: Scalar> Builder<'_, S> {
    #[allow(clippy::too_many_arguments)]
    fn unit(
        &mut self,
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        maskable: bool,
        input_from: Option<usize>,
    ) -> Result<usize> {
        let w = kaiming(self.rng, &[cout, cin, k, k], cin * k * k);
        self.units.push(ConvUnit {
            name,
            conv: ConvParams::new(w, stride, k / 2)?,
            bn: BNParams::new(cout),
            maskable,
            input_from,
            conv_cache: None,
            bn_cache: None,
        });
        Ok(self.units.len() - 1)
    }
}

/// Construct a network with deterministic Kaiming-normal initialization.
pub fn build_model<S: Scalar>(spec: &ModelSpec) -> Result<Network<S>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, streams::INIT, 0));
    let [c_in, h, w] = spec.input_shape;
    let mut b = Builder { rng: &mut rng, units: Vec::new() };
    let mut blocks = Vec::new();

    let features = match &spec.architecture {
        Architecture::CnnSmall { layers } => {
            let mut c = c_in;
            let mut prev: Option<usize> = None;
            for (i, l) in layers.iter().enumerate() {
                let u = b.unit(format!("conv{i}"), c, l.out_channels, l.kernel, l.stride, true, prev)?;
                blocks.push(Block::Plain { unit: u, relu: l.relu });
                prev = Some(u);
                c = l.out_channels;
            }
            c
        }
        Architecture::ResnetTiny { n_blocks, base_width } => {
            let stem = b.unit("stem".into(), c_in, *base_width, 3, 1, true, None)?;
            blocks.push(Block::Plain { unit: stem, relu: true });
            let mut c = *base_width;
            // Output of the previous block is the sole input of the next conv
            // only directly after the stem.
            let mut sole_producer = Some(stem);
            for stage in 0..3 {
                let width = base_width << stage;
                for blk in 0..*n_blocks {
                    let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                    let prefix = format!("s{}.b{blk}", stage + 1);
                    let a = b.unit(format!("{prefix}.conv_a"), c, width, 3, stride, true, sole_producer)?;
                    let bb = b.unit(format!("{prefix}.conv_b"), width, width, 3, 1, true, Some(a))?;
                    let proj = if stride != 1 || c != width {
                        Some(b.unit(format!("{prefix}.proj"), c, width, 1, stride, false, None)?)
                    } else {
                        None
                    };
                    blocks.push(Block::Residual { a, b: bb, proj });
                    sole_producer = None;
                    c = width;
                }
            }
            c
        }
        Architecture::MlpProbe => c_in * h * w,
    };
    let units = b.units;

    let head_w = kaiming::<S>(&mut rng, &[spec.classes, features], features);
    let head = LinearParams::new(head_w, Tensor::zeros(&[spec.classes]))?;
    let net = Network {
        spec: spec.clone(),
        units,
        blocks,
        head,
        block_caches: Vec::new(),
        head_input: None,
        feature_dims: None,
        forward_trace: Vec::new(),
    };
    // Reject geometries that collapse to nothing before any training starts.
    net.check_geometry()?;
    Ok(net)
}

impl<S: Scalar> Network<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn units(&self) -> &[ConvUnit<S>] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [ConvUnit<S>] {
        &mut self.units
    }

    pub fn unit(&self, i: usize) -> &ConvUnit<S> {
        &self.units[i]
    }

    pub fn unit_mut(&mut self, i: usize) -> &mut ConvUnit<S> {
        &mut self.units[i]
    }

    /// Indices of maskable units in forward order.
    pub fn maskable_units(&self) -> Vec<usize> {
        (0..self.units.len()).filter(|&i| self.units[i].maskable).collect()
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u.name == name)
    }

    /// Conv layers that are not shortcut projections, plus the classifier.
    pub fn weighted_layer_count(&self) -> usize {
        self.units.iter().filter(|u| u.maskable).count() + 1
    }

    /// Unit indices in the order the last forward pass executed them.
    pub fn last_forward_order(&self) -> &[usize] {
        &self.forward_trace
    }

    /// Spatial output size of every unit for the configured input shape.
    pub fn unit_output_hw(&self) -> Result<Vec<(usize, usize)>> {
        let [_, h, w] = self.spec.input_shape;
        let mut out = vec![(0, 0); self.units.len()];
        let mut cur = (h, w);
        for block in &self.blocks {
            match *block {
                Block::Plain { unit, .. } => {
                    cur = self.units[unit].conv.output_hw(cur.0, cur.1)?;
                    out[unit] = cur;
                }
                Block::Residual { a, b, proj } => {
                    let ha = self.units[a].conv.output_hw(cur.0, cur.1)?;
                    out[a] = ha;
                    out[b] = self.units[b].conv.output_hw(ha.0, ha.1)?;
                    if let Some(p) = proj {
                        out[p] = self.units[p].conv.output_hw(cur.0, cur.1)?;
                    }
                    cur = out[b];
                }
            }
        }
        Ok(out)
    }

    fn check_geometry(&self) -> Result<()> {
        self.unit_output_hw().map(|_| ()).map_err(|e| Error::Config(format!("model geometry: {e}")))
    }

    /// Index of the first tensor of each unit in [`Network::params_mut`]
    /// order: `weights, gamma, beta` per unit, then head weight and bias.
    pub fn param_index(unit: usize) -> usize {
        unit * 3
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.units.len() * 3 + 2);
        for u in &self.units {
            names.push(format!("{}.weight", u.name));
            names.push(format!("{}.bn.gamma", u.name));
            names.push(format!("{}.bn.beta", u.name));
        }
        names.push("fc.weight".into());
        names.push("fc.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut v = Vec::with_capacity(self.units.len() * 3 + 2);
        for u in &self.units {
            v.push(&u.conv.weights);
            v.push(&u.bn.gamma);
            v.push(&u.bn.beta);
        }
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<Param<'_, S>> {
        let mut v = Vec::with_capacity(self.units.len() * 3 + 2);
        for u in &mut self.units {
            v.push(Param { name: format!("{}.weight", u.name), tensor: &mut u.conv.weights });
            v.push(Param { name: format!("{}.bn.gamma", u.name), tensor: &mut u.bn.gamma });
            v.push(Param { name: format!("{}.bn.beta", u.name), tensor: &mut u.bn.beta });
        }
        v.push(Param { name: "fc.weight".into(), tensor: &mut self.head.weight });
        v.push(Param { name: "fc.bias".into(), tensor: &mut self.head.bias });
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Logits for an NCHW batch. Training mode uses batch statistics and
    /// keeps the caches needed by [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        let dims = x.dims4()?;
        if dims[1..] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "network expects [N, {:?}] input, got {:?}",
                self.spec.input_shape,
                x.shape()
            )));
        }
        self.forward_trace.clear();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for bi in 0..self.blocks.len() {
            match self.blocks[bi] {
                Block::Plain { unit, relu } => {
                    self.forward_trace.push(unit);
                    let z = self.units[unit].forward(&cur, training)?;
                    if relu {
                        let o = relu_forward(&z);
                        caches.push(BlockCache::Plain { out: Some(o.clone()) });
                        cur = o;
                    } else {
                        caches.push(BlockCache::Plain { out: None });
                        cur = z;
                    }
                }
                Block::Residual { a, b, proj } => {
                    self.forward_trace.push(a);
                    let hidden = relu_forward(&self.units[a].forward(&cur, training)?);
                    self.forward_trace.push(b);
                    let mut sum = self.units[b].forward(&hidden, training)?;
                    let shortcut = match proj {
                        Some(p) => {
                            self.forward_trace.push(p);
                            self.units[p].forward(&cur, training)?
                        }
                        None => cur,
                    };
                    if sum.shape() != shortcut.shape() {
                        return Err(Error::Shape(format!(
                            "residual branch {:?} vs shortcut {:?}",
                            sum.shape(),
                            shortcut.shape()
                        )));
                    }
                    for (s, &v) in sum.data_mut().iter_mut().zip(shortcut.data()) {
                        *s += v;
                    }
                    let out = relu_forward(&sum);
                    caches.push(BlockCache::Residual { hidden, out: out.clone() });
                    cur = out;
                }
            }
        }
        let pooled = if self.blocks.is_empty() {
            let n = dims[0];
            let len = cur.numel() / n;
            cur.reshape(vec![n, len])?
        } else {
            self.feature_dims = Some(cur.dims4()?);
            global_avg_pool(&cur)?
        };
        let logits = linear_forward(&pooled, &self.head)?;
        if training {
            self.block_caches = caches;
            self.head_input = Some(pooled);
        } else {
            self.block_caches.clear();
            self.head_input = None;
        }
        logits.check_finite("logits")?;
        Ok(logits)
    }

    /// Back-propagate a logits gradient, accumulating into every parameter's
    /// gradient buffer.
    pub fn backward(&mut self, dlogits: &Tensor<S>) -> Result<()> {
        let head_input = self
            .head_input
            .take()
            .ok_or_else(|| Error::Contract("backward called without a training forward".into()))?;
        let dpooled = linear_backward(dlogits, &head_input, &mut self.head)?;
        if self.blocks.is_empty() {
            return Ok(());
        }
        let dims = self.feature_dims.expect("set during forward");
        let mut grad = global_avg_pool_backward(&dpooled, dims)?;
        let caches = std::mem::take(&mut self.block_caches);
        for (bi, cache) in caches.iter().enumerate().rev() {
            let first = bi == 0;
            match (self.blocks[bi], cache) {
                (Block::Plain { unit, .. }, BlockCache::Plain { out }) => {
                    let dz = match out {
                        Some(o) => relu_backward(&grad, o)?,
                        None => grad,
                    };
                    match self.units[unit].backward(&dz, !first)? {
                        Some(dx) => grad = dx,
                        None => return Ok(()),
                    }
                }
                (Block::Residual { a, b, proj }, BlockCache::Residual { hidden, out }) => {
                    let dsum = relu_backward(&grad, out)?;
                    let dhidden = self.units[b].backward(&dsum, true)?.expect("requested");
                    let dhidden = relu_backward(&dhidden, hidden)?;
                    let da = self.units[a].backward(&dhidden, !first)?;
                    let ds = match proj {
                        Some(p) => self.units[p].backward(&dsum, !first)?,
                        None => Some(dsum),
                    };
                    match (da, ds) {
                        (Some(mut da), Some(ds)) => {
                            for (g, &v) in da.data_mut().iter_mut().zip(ds.data()) {
                                *g += v;
                            }
                            grad = da;
                        }
                        _ => return Ok(()),
                    }
                }
                _ => unreachable!("cache kind follows block kind"),
            }
        }
        Ok(())
    }

    /// Zero gradients, run a training forward/backward on one batch and return
    /// the loss statistics. Parameters are not updated.
    pub fn loss_and_grad(&mut self, x: &Tensor<S>, labels: &[usize]) -> Result<CrossEntropy<S>> {
        self.zero_grad();
        let logits = self.forward(x, true)?;
        let ce = softmax_cross_entropy(&logits, labels)?;
        if !ce.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss {}", ce.loss)));
        }
        self.backward(&ce.grad)?;
        Ok(ce)
    }

    /// Total count of parameters in every tensor of the model.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Copy all trainable tensors and BN running statistics, in registry order.
    pub fn state_vectors(&self) -> Vec<Vec<S>> {
        let mut v: Vec<Vec<S>> = self.params().iter().map(|t| t.data().to_vec()).collect();
        for u in &self.units {
            v.push(u.bn.running_mean.clone());
            v.push(u.bn.running_var.clone());
        }
        v
    }

    /// Inverse of [`Network::state_vectors`].
    pub fn load_state_vectors(&mut self, state: &[Vec<S>]) -> Result<()> {
        let n_params = self.units.len() * 3 + 2;
        if state.len() != n_params + self.units.len() * 2 {
            return Err(Error::Shape(format!(
                "state has {} tensors, model needs {}",
                state.len(),
                n_params + self.units.len() * 2
            )));
        }
        {
            let mut params = self.params_mut();
            for (p, src) in params.iter_mut().zip(state) {
                if p.tensor.numel() != src.len() {
                    return Err(Error::Shape(format!(
                        "tensor `{}` has {} values, state has {}",
                        p.name,
                        p.tensor.numel(),
                        src.len()
                    )));
                }
                p.tensor.data_mut().copy_from_slice(src);
            }
        }
        for (i, u) in self.units.iter_mut().enumerate() {
            let rm = &state[n_params + 2 * i];
            let rv = &state[n_params + 2 * i + 1];
            if rm.len() != u.bn.channels() || rv.len() != u.bn.channels() {
                return Err(Error::Shape(format!("running stats of `{}` have wrong length", u.name)));
            }
            u.bn.running_mean.copy_from_slice(rm);
            u.bn.running_var.copy_from_slice(rv);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resnet(n: usize) -> ModelSpec {
        ModelSpec {
            architecture: Architecture::ResnetTiny { n_blocks: n, base_width: 4 },
            input_shape: [3, 8, 8],
            classes: 10,
            seed: 7,
        }
    }

    #[test]
    fn resnet20_shape_has_twenty_weighted_layers() {
        let mut spec = resnet(3);
        spec.input_shape = [3, 32, 32];
        let net: Network<f32> = build_model(&spec).unwrap();
        assert_eq!(net.weighted_layer_count(), 20);
        // two downsampling projections, neither maskable
        assert_eq!(net.units().iter().filter(|u| !u.maskable).count(), 2);
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Network<f64> = build_model(&resnet(1)).unwrap();
        let b: Network<f64> = build_model(&resnet(1)).unwrap();
        assert_eq!(a.state_vectors(), b.state_vectors());
        let mut other = resnet(1);
        other.seed = 8;
        let c: Network<f64> = build_model(&other).unwrap();
        assert_ne!(a.state_vectors(), c.state_vectors());
    }

    #[test]
    fn forward_order_matches_registry() {
        let mut net: Network<f64> = build_model(&resnet(2)).unwrap();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| (i as f64 * 0.1).sin());
        net.forward(&x, true).unwrap();
        let order = net.last_forward_order().to_vec();
        assert_eq!(order, (0..net.units().len()).collect::<Vec<_>>());
    }

    #[test]
    fn cnn_small_zero_image_gives_head_bias() {
        let spec = ModelSpec {
            architecture: Architecture::CnnSmall { layers: vec![ConvSpec::new(4), ConvSpec::new(6)] },
            input_shape: [3, 6, 6],
            classes: 3,
            seed: 1,
        };
        let mut net: Network<f64> = build_model(&spec).unwrap();
        net.head.bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let x = Tensor::zeros(&[2, 3, 6, 6]);
        let logits = net.forward(&x, true).unwrap();
        for row in logits.data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn unsupported_spec_is_a_config_error() {
        let mut spec = resnet(0);
        assert!(matches!(build_model::<f32>(&spec), Err(Error::Config(_))));
        spec = resnet(1);
        spec.classes = 1;
        assert!(matches!(build_model::<f32>(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn state_vectors_round_trip() {
        let mut net: Network<f64> = build_model(&resnet(1)).unwrap();
        let s = net.state_vectors();
        net.units_mut()[0].conv.weights.data_mut()[0] = 99.0;
        net.load_state_vectors(&s).unwrap();
        assert_eq!(net.state_vectors(), s);
    }
}
