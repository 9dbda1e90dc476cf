//! The trainable patch-matching network: a tied two-branch feature
//! extractor followed by a joint classification head.
//!
//! Each branch runs one valid convolution over its patch and two
//! fully-connected layers; the two embeddings are concatenated (left
//! first) and passed through four more fully-connected layers and a final
//! two-way softmax scoring good match vs bad match. Rectified linear units
//! follow every layer except the last, and the branch weights are shared
//! between the two patches.
//!
//! For dense inference the branch is applied to whole images
//! ([`forward_features`]) — the fully-connected branch layers become
//! convolutions — and the head is swept over all positions of a disparity
//! slice ([`score_pair_maps`]), so branch outputs are computed once per
//! pixel instead of once per pixel and disparity.
//!
//! All operations are generic over the scalar type: `f32` for training and
//! inference, `f64` for gradient checking.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::distributions::uniform::SampleUniform;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Label, Patch, TrainingExample};
use crate::imaging::GrayImage;
use crate::{Error, Result};

/// Scalar type the network can run in.
pub trait Real:
    Float + num_traits::NumAssign + SampleUniform + core::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn from_f32(v: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Architecture hyperparameters. The default is the production network
/// (9×9 patches, 32 conv kernels, 200-wide branch, 300-wide head); tests
/// use a reduced configuration for speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Input patch side length `n`, odd.
    pub patch_size: usize,
    /// Convolution kernel side length.
    pub conv_kernel: usize,
    /// Number of convolution kernels.
    pub conv_channels: usize,
    /// Width of the two fully-connected branch layers.
    pub embed_width: usize,
    /// Width of the hidden head layers.
    pub head_width: usize,
    /// Number of hidden head layers between the concatenation and the
    /// two-way output.
    pub head_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch_size: 9,
            conv_kernel: 5,
            conv_channels: 32,
            embed_width: 200,
            head_width: 300,
            head_layers: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "patch size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.conv_kernel == 0 || self.conv_kernel > self.patch_size {
            return Err(Error::InvalidParam(format!(
                "conv kernel {} must be in 1..={}",
                self.conv_kernel, self.patch_size
            )));
        }
        if self.conv_channels == 0
            || self.embed_width == 0
            || self.head_width == 0
            || self.head_layers == 0
        {
            return Err(Error::InvalidParam(
                "channel/width/layer counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Side length of the convolution output on one patch.
    fn conv_out(&self) -> usize {
        self.patch_size - self.conv_kernel + 1
    }

    /// Flattened branch width between the convolution and the first
    /// fully-connected layer.
    fn branch_flat(&self) -> usize {
        self.conv_channels * self.conv_out() * self.conv_out()
    }

    /// Pixels lost on each image side by dense inference.
    pub fn border(&self) -> usize {
        (self.patch_size - 1) / 2
    }

    fn head_input(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.embed_width
        } else {
            self.head_width
        }
    }
}

/// All weights and biases of the network. The branch tensors are stored
/// once and used for both patches.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    config: NetConfig,
    conv_w: Vec<T>, // [channel][ky][kx]
    conv_b: Vec<T>,
    l2_w: Vec<T>, // [embed][channel*conv_out*conv_out]
    l2_b: Vec<T>,
    l3_w: Vec<T>, // [embed][embed]
    l3_b: Vec<T>,
    head_w: Vec<Vec<T>>, // layer i: [head][head_input(i)]
    head_b: Vec<Vec<T>>,
    out_w: Vec<T>, // [2][head]
    out_b: Vec<T>, // [2]
}

impl<T: Real> NetworkParams<T> {
    /// Random initialization: every tensor uniform in `[-a, a]` with
    /// `a = sqrt(1 / fan_in)` of its layer.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::init_with_rng(config, &mut rng))
    }

    pub(crate) fn init_with_rng<R: Rng>(config: NetConfig, rng: &mut R) -> Self {
        let fill = |rng: &mut R, len: usize, fan_in: usize| -> Vec<T> {
            let a = T::from_f64(num_traits::Float::sqrt(1.0 / fan_in as f64));
            (0..len).map(|_| rng.gen_range(-a..=a)).collect()
        };
        let flat = config.branch_flat();
        let k2 = config.conv_kernel * config.conv_kernel;
        let conv_w = fill(rng, config.conv_channels * k2, k2);
        let conv_b = fill(rng, config.conv_channels, k2);
        let l2_w = fill(rng, config.embed_width * flat, flat);
        let l2_b = fill(rng, config.embed_width, flat);
        let l3_w = fill(rng, config.embed_width * config.embed_width, config.embed_width);
        let l3_b = fill(rng, config.embed_width, config.embed_width);
        let mut head_w = Vec::with_capacity(config.head_layers);
        let mut head_b = Vec::with_capacity(config.head_layers);
        for layer in 0..config.head_layers {
            let fan_in = config.head_input(layer);
            head_w.push(fill(rng, config.head_width * fan_in, fan_in));
            head_b.push(fill(rng, config.head_width, fan_in));
        }
        let out_w = fill(rng, 2 * config.head_width, config.head_width);
        let out_b = fill(rng, 2, config.head_width);
        NetworkParams {
            config,
            conv_w,
            conv_b,
            l2_w,
            l2_b,
            l3_w,
            l3_b,
            head_w,
            head_b,
            out_w,
            out_b,
        }
    }

    /// All-zero tensors of the same architecture; gradient accumulator.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let flat = config.branch_flat();
        let k2 = config.conv_kernel * config.conv_kernel;
        Ok(NetworkParams {
            config,
            conv_w: vec![T::zero(); config.conv_channels * k2],
            conv_b: vec![T::zero(); config.conv_channels],
            l2_w: vec![T::zero(); config.embed_width * flat],
            l2_b: vec![T::zero(); config.embed_width],
            l3_w: vec![T::zero(); config.embed_width * config.embed_width],
            l3_b: vec![T::zero(); config.embed_width],
            head_w: (0..config.head_layers)
                .map(|l| vec![T::zero(); config.head_width * config.head_input(l)])
                .collect(),
            head_b: (0..config.head_layers)
                .map(|_| vec![T::zero(); config.head_width])
                .collect(),
            out_w: vec![T::zero(); 2 * config.head_width],
            out_b: vec![T::zero(); 2],
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensors in serialization order.
    fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![
            &self.conv_w,
            &self.conv_b,
            &self.l2_w,
            &self.l2_b,
            &self.l3_w,
            &self.l3_b,
        ];
        for (w, b) in self.head_w.iter().zip(&self.head_b) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.l2_w,
            &mut self.l2_b,
            &mut self.l3_w,
            &mut self.l3_b,
        ];
        for (w, b) in self.head_w.iter_mut().zip(self.head_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }

    /// Concatenation of all tensors in serialization order: convolution
    /// weights and biases, the two branch layers, the head layers, then
    /// the output layer.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Rebuilds parameters from [`Self::to_flat`] output.
    pub fn from_flat(config: NetConfig, flat: &[T]) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let expected = params.parameter_count();
        if flat.len() != expected {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, architecture needs {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in params.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(params)
    }

    /// Plain gradient-descent update `w <- w - lr * g`.
    fn sgd_step(&mut self, grad: &Self, lr: T) {
        for (w, g) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (wi, gi) in w.iter_mut().zip(g.iter()) {
                *wi = *wi - lr * *gi;
            }
        }
    }

    fn check_patch(&self, patch: &Patch<T>) -> Result<()> {
        if patch.size() != self.config.patch_size {
            return Err(Error::Shape(format!(
                "patch size {} does not match network input {}",
                patch.size(),
                self.config.patch_size
            )));
        }
        Ok(())
    }
}

/// Cached branch activations (pre- and post-ReLU) for backpropagation.
struct BranchTrace<T> {
    conv_pre: Vec<T>,
    conv_post: Vec<T>,
    l2_pre: Vec<T>,
    l2_post: Vec<T>,
    l3_pre: Vec<T>,
    l3_post: Vec<T>,
}

fn branch_forward<T: Real>(p: &NetworkParams<T>, patch: &[T]) -> BranchTrace<T> {
    let cfg = &p.config;
    let n = cfg.patch_size;
    let k = cfg.conv_kernel;
    let m = cfg.conv_out();
    let flat = cfg.branch_flat();

    let mut conv_pre = Vec::with_capacity(flat);
    for ch in 0..cfg.conv_channels {
        let w = &p.conv_w[ch * k * k..(ch + 1) * k * k];
        for oy in 0..m {
            for ox in 0..m {
                let mut acc = p.conv_b[ch];
                for ky in 0..k {
                    for kx in 0..k {
                        acc += w[ky * k + kx] * patch[(oy + ky) * n + (ox + kx)];
                    }
                }
                conv_pre.push(acc);
            }
        }
    }
    let conv_post: Vec<T> = conv_pre.iter().map(|&v| relu(v)).collect();

    let mut l2_pre = Vec::with_capacity(cfg.embed_width);
    for e in 0..cfg.embed_width {
        let w = &p.l2_w[e * flat..(e + 1) * flat];
        let mut acc = p.l2_b[e];
        for i in 0..flat {
            acc += w[i] * conv_post[i];
        }
        l2_pre.push(acc);
    }
    let l2_post: Vec<T> = l2_pre.iter().map(|&v| relu(v)).collect();

    let mut l3_pre = Vec::with_capacity(cfg.embed_width);
    for e in 0..cfg.embed_width {
        let w = &p.l3_w[e * cfg.embed_width..(e + 1) * cfg.embed_width];
        let mut acc = p.l3_b[e];
        for (wi, vi) in w.iter().zip(l2_post.iter()) {
            acc += *wi * *vi;
        }
        l3_pre.push(acc);
    }
    let l3_post: Vec<T> = l3_pre.iter().map(|&v| relu(v)).collect();

    BranchTrace {
        conv_pre,
        conv_post,
        l2_pre,
        l2_post,
        l3_pre,
        l3_post,
    }
}

#[inline]
fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Cached head activations for backpropagation. `inputs[0]` is the
/// concatenated embedding pair.
struct HeadTrace<T> {
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    logits: [T; 2],
}

fn head_forward<T: Real>(p: &NetworkParams<T>, concat: Vec<T>) -> HeadTrace<T> {
    let cfg = &p.config;
    let mut inputs = vec![concat];
    let mut pre = Vec::with_capacity(cfg.head_layers);
    for layer in 0..cfg.head_layers {
        let fan_in = cfg.head_input(layer);
        let input = inputs.last().unwrap();
        let mut layer_pre = Vec::with_capacity(cfg.head_width);
        for u in 0..cfg.head_width {
            let w = &p.head_w[layer][u * fan_in..(u + 1) * fan_in];
            let mut acc = p.head_b[layer][u];
            for (wi, vi) in w.iter().zip(input.iter()) {
                acc += *wi * *vi;
            }
            layer_pre.push(acc);
        }
        let post: Vec<T> = layer_pre.iter().map(|&v| relu(v)).collect();
        pre.push(layer_pre);
        inputs.push(post);
    }
    let last = inputs.last().unwrap();
    let mut logits = [T::zero(); 2];
    for c in 0..2 {
        let w = &p.out_w[c * cfg.head_width..(c + 1) * cfg.head_width];
        let mut acc = p.out_b[c];
        for (wi, vi) in w.iter().zip(last.iter()) {
            acc += *wi * *vi;
        }
        logits[c] = acc;
    }
    HeadTrace {
        inputs,
        pre,
        logits,
    }
}

/// Two-way softmax returning `(p_good, p_bad)`. The pair sums to exactly
/// one: the bad-match probability is computed and the good-match
/// probability is its complement.
fn softmax2<T: Real>(logits: [T; 2]) -> (T, T) {
    let m = if logits[0] > logits[1] {
        logits[0]
    } else {
        logits[1]
    };
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let p_bad = e1 / (e0 + e1);
    (T::one() - p_bad, p_bad)
}

/// Runs the network on one patch pair, returning the `(good, bad)` match
/// probability distribution.
pub fn forward_pair<T: Real>(
    params: &NetworkParams<T>,
    left: &Patch<T>,
    right: &Patch<T>,
) -> Result<(T, T)> {
    params.check_patch(left)?;
    params.check_patch(right)?;
    let bl = branch_forward(params, left.values());
    let br = branch_forward(params, right.values());
    let mut concat = bl.l3_post;
    concat.extend_from_slice(&br.l3_post);
    let head = head_forward(params, concat);
    Ok(softmax2(head.logits))
}

/// Mean cross-entropy loss over a batch together with its exact analytic
/// gradient. Tied branch tensors accumulate contributions from both
/// patches of every example.
pub fn loss_and_gradient<T: Real>(
    params: &NetworkParams<T>,
    batch: &[TrainingExample<T>],
) -> Result<(T, NetworkParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let mut grads = NetworkParams::zeros(params.config)?;
    let inv_b = T::one() / T::from_f64(batch.len() as f64);
    let mut loss = T::zero();

    for example in batch {
        params.check_patch(&example.left)?;
        params.check_patch(&example.right)?;
        let bl = branch_forward(params, example.left.values());
        let br = branch_forward(params, example.right.values());
        let mut concat = bl.l3_post.clone();
        concat.extend_from_slice(&br.l3_post);
        let head = head_forward(params, concat);

        // Stable cross-entropy: loss = logsumexp(z) - z_true.
        let z = head.logits;
        let m = if z[0] > z[1] { z[0] } else { z[1] };
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        let true_class = match example.label {
            Label::Positive => 0,
            Label::Negative => 1,
        };
        loss += (lse - z[true_class]) * inv_b;

        let e0 = (z[0] - lse).exp();
        let e1 = (z[1] - lse).exp();
        let mut dlogits = [e0 * inv_b, e1 * inv_b];
        dlogits[true_class] -= inv_b;

        let d_concat = backprop_head(params, &mut grads, &head, dlogits);
        let embed = params.config.embed_width;
        backprop_branch(params, &mut grads, &bl, example.left.values(), &d_concat[..embed]);
        backprop_branch(params, &mut grads, &br, example.right.values(), &d_concat[embed..]);
    }
    Ok((loss, grads))
}

fn backprop_head<T: Real>(
    p: &NetworkParams<T>,
    g: &mut NetworkParams<T>,
    trace: &HeadTrace<T>,
    dlogits: [T; 2],
) -> Vec<T> {
    let cfg = &p.config;
    let last = trace.inputs.last().unwrap();
    let mut d_post = vec![T::zero(); cfg.head_width];
    for c in 0..2 {
        g.out_b[c] += dlogits[c];
        for j in 0..cfg.head_width {
            g.out_w[c * cfg.head_width + j] += dlogits[c] * last[j];
            d_post[j] += dlogits[c] * p.out_w[c * cfg.head_width + j];
        }
    }
    for layer in (0..cfg.head_layers).rev() {
        let fan_in = cfg.head_input(layer);
        let input = &trace.inputs[layer];
        let mut d_input = vec![T::zero(); fan_in];
        for u in 0..cfg.head_width {
            let d_pre = if trace.pre[layer][u] > T::zero() {
                d_post[u]
            } else {
                T::zero()
            };
            if d_pre == T::zero() {
                continue;
            }
            g.head_b[layer][u] += d_pre;
            let gw = &mut g.head_w[layer][u * fan_in..(u + 1) * fan_in];
            let w = &p.head_w[layer][u * fan_in..(u + 1) * fan_in];
            for i in 0..fan_in {
                gw[i] += d_pre * input[i];
                d_input[i] += d_pre * w[i];
            }
        }
        d_post = d_input;
    }
    d_post
}

fn backprop_branch<T: Real>(
    p: &NetworkParams<T>,
    g: &mut NetworkParams<T>,
    trace: &BranchTrace<T>,
    patch: &[T],
    d_embed: &[T],
) {
    let cfg = &p.config;
    let embed = cfg.embed_width;
    let flat = cfg.branch_flat();
    let n = cfg.patch_size;
    let k = cfg.conv_kernel;
    let m = cfg.conv_out();

    let mut d_l2_post = vec![T::zero(); embed];
    for e in 0..embed {
        let d_pre = if trace.l3_pre[e] > T::zero() {
            d_embed[e]
        } else {
            T::zero()
        };
        if d_pre == T::zero() {
            continue;
        }
        g.l3_b[e] += d_pre;
        let gw = &mut g.l3_w[e * embed..(e + 1) * embed];
        let w = &p.l3_w[e * embed..(e + 1) * embed];
        for j in 0..embed {
            gw[j] += d_pre * trace.l2_post[j];
            d_l2_post[j] += d_pre * w[j];
        }
    }

    let mut d_conv_post = vec![T::zero(); flat];
    for e in 0..embed {
        let d_pre = if trace.l2_pre[e] > T::zero() {
            d_l2_post[e]
        } else {
            T::zero()
        };
        if d_pre == T::zero() {
            continue;
        }
        g.l2_b[e] += d_pre;
        let gw = &mut g.l2_w[e * flat..(e + 1) * flat];
        let w = &p.l2_w[e * flat..(e + 1) * flat];
        for i in 0..flat {
            gw[i] += d_pre * trace.conv_post[i];
            d_conv_post[i] += d_pre * w[i];
        }
    }

    for ch in 0..cfg.conv_channels {
        let gw = &mut g.conv_w[ch * k * k..(ch + 1) * k * k];
        for oy in 0..m {
            for ox in 0..m {
                let idx = (ch * m + oy) * m + ox;
                let d_pre = if trace.conv_pre[idx] > T::zero() {
                    d_conv_post[idx]
                } else {
                    T::zero()
                };
                if d_pre == T::zero() {
                    continue;
                }
                g.conv_b[ch] += d_pre;
                for ky in 0..k {
                    for kx in 0..k {
                        gw[ky * k + kx] += d_pre * patch[(oy + ky) * n + (ox + kx)];
                    }
                }
            }
        }
    }
}

/// Training schedule: plain stochastic gradient descent with a step-decay
/// learning rate. From each epoch listed in `decay_epochs` (1-indexed)
/// onward the learning rate is divided by 10.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 128,
            epochs: 16,
            learning_rate: 0.01,
            decay_epochs: vec![12, 15],
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParam(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for &e in &self.decay_epochs {
            if e >= self.epochs {
                return Err(Error::InvalidParam(format!(
                    "decay epoch {e} must be below the epoch count {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during the given 1-indexed epoch.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * num_traits::Float::powi(0.1f64, decays as i32)
    }
}

/// Per-epoch training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub heldout_accuracy: Option<f64>,
}

/// Trains a freshly initialized network with plain SGD.
///
/// The examples are shuffled once before training; batches are consumed in
/// the shuffled order, with a final smaller batch when the example count is
/// not a multiple of the batch size. Everything is driven by a single
/// seeded generator, so identical seeds give bit-identical parameters.
pub fn sgd_train(
    config: NetConfig,
    examples: &[TrainingExample<f32>],
    heldout: &[TrainingExample<f32>],
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<NetworkParams<f32>> {
    schedule.validate()?;
    if examples.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut params = NetworkParams::<f32>::init_with_rng(config, &mut rng);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);

    let mut batch: Vec<TrainingExample<f32>> = Vec::with_capacity(schedule.batch_size);
    for epoch in 1..=schedule.epochs {
        let lr = schedule.rate_at(epoch);
        let mut loss_sum = 0.0f64;
        for (batch_idx, chunk) in order.chunks(schedule.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grads) = loss_and_gradient(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} in epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            params.sgd_step(&grads, lr as f32);
        }
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / examples.len() as f64,
            heldout_accuracy: if heldout.is_empty() {
                None
            } else {
                Some(classification_accuracy(&params, heldout)?)
            },
        };
        on_epoch(&stats);
    }
    Ok(params)
}

/// Fraction of examples whose most probable class matches their label.
pub fn classification_accuracy(
    params: &NetworkParams<f32>,
    examples: &[TrainingExample<f32>],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Training("no examples to score".into()));
    }
    let mut correct = 0usize;
    for example in examples {
        let (p_good, p_bad) = forward_pair(params, &example.left, &example.right)?;
        let predicted_match = p_good > p_bad;
        let is_match = example.label == Label::Positive;
        if predicted_match == is_match {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Dense per-pixel branch embeddings: `channels` values per valid patch
/// center, in position-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Embedding vector at feature-map position `(x, y)`.
    pub fn vector(&self, x: usize, y: usize) -> &[T] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Runs the branch over a whole image in one pass. The vector at feature
/// position `(x, y)` equals the branch embedding of the patch centered at
/// image position `(x + border, y + border)`; the map is smaller than the
/// image by `patch_size - 1` in each axis (valid positions only).
pub fn forward_features<T: Real>(
    params: &NetworkParams<T>,
    img: &GrayImage,
) -> Result<FeatureMap<T>> {
    let cfg = &params.config;
    let n = cfg.patch_size;
    if img.width() < n || img.height() < n {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than the {n}x{n} network input",
            img.width(),
            img.height()
        )));
    }
    let k = cfg.conv_kernel;
    let m = cfg.conv_out();
    let (w1, h1) = (img.width() - k + 1, img.height() - k + 1);
    let (w2, h2) = (img.width() - n + 1, img.height() - n + 1);
    let embed = cfg.embed_width;

    // Convolution layer, channel-major so the branch-flat ordering below
    // matches the per-patch pipeline exactly.
    let mut l1 = vec![T::zero(); cfg.conv_channels * h1 * w1];
    for ch in 0..cfg.conv_channels {
        let w = &params.conv_w[ch * k * k..(ch + 1) * k * k];
        for y in 0..h1 {
            for x in 0..w1 {
                let mut acc = params.conv_b[ch];
                for ky in 0..k {
                    for kx in 0..k {
                        acc += w[ky * k + kx] * T::from_f32(img.get(x + kx, y + ky));
                    }
                }
                l1[(ch * h1 + y) * w1 + x] = relu(acc);
            }
        }
    }

    // First fully-connected branch layer applied convolutionally.
    let mut l2 = vec![T::zero(); h2 * w2 * embed];
    for y in 0..h2 {
        for x in 0..w2 {
            let out = &mut l2[(y * w2 + x) * embed..(y * w2 + x + 1) * embed];
            for (e, slot) in out.iter_mut().enumerate() {
                let wrow = &params.l2_w[e * cfg.branch_flat()..(e + 1) * cfg.branch_flat()];
                let mut acc = params.l2_b[e];
                let mut i = 0;
                for ch in 0..cfg.conv_channels {
                    for fy in 0..m {
                        let row = &l1[(ch * h1 + y + fy) * w1 + x..];
                        for fx in 0..m {
                            acc += wrow[i] * row[fx];
                            i += 1;
                        }
                    }
                }
                *slot = relu(acc);
            }
        }
    }

    // Second fully-connected branch layer, a per-position transform.
    let mut data = vec![T::zero(); h2 * w2 * embed];
    for pos in 0..h2 * w2 {
        let input = &l2[pos * embed..(pos + 1) * embed];
        let out = &mut data[pos * embed..(pos + 1) * embed];
        for (e, slot) in out.iter_mut().enumerate() {
            let wrow = &params.l3_w[e * embed..(e + 1) * embed];
            let mut acc = params.l3_b[e];
            for (wi, vi) in wrow.iter().zip(input.iter()) {
                acc += *wi * *vi;
            }
            *slot = relu(acc);
        }
    }

    Ok(FeatureMap {
        width: w2,
        height: h2,
        channels: embed,
        data,
    })
}

/// Bad-match scores for one disparity slice, with positions whose
/// right-image counterpart leaves the map marked invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T = f32> {
    width: usize,
    height: usize,
    scores: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Real> ScoreMap<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Option<T> {
        let i = y * self.width + x;
        if self.valid[i] {
            Some(self.scores[i])
        } else {
            None
        }
    }
}

/// Sweeps the head over every position of one disparity: the score at `p`
/// is the bad-match probability of the pair `(p, pd)`, computed from the
/// precomputed branch embeddings.
pub fn score_pair_maps<T: Real>(
    params: &NetworkParams<T>,
    left: &FeatureMap<T>,
    right: &FeatureMap<T>,
    d: usize,
) -> Result<ScoreMap<T>> {
    let cfg = &params.config;
    if left.width != right.width || left.height != right.height {
        return Err(Error::Shape(format!(
            "feature maps {}x{} and {}x{} differ in size",
            left.width, left.height, right.width, right.height
        )));
    }
    if left.channels != cfg.embed_width || right.channels != cfg.embed_width {
        return Err(Error::Shape(format!(
            "feature maps carry {} channels, network embeds {} values",
            left.channels, cfg.embed_width
        )));
    }
    let (w, h) = (left.width, left.height);
    let mut scores = vec![T::zero(); w * h];
    let mut valid = vec![false; w * h];
    let mut concat = vec![T::zero(); 2 * cfg.embed_width];
    for y in 0..h {
        for x in 0..w {
            if x < d {
                continue;
            }
            concat[..cfg.embed_width].copy_from_slice(left.vector(x, y));
            concat[cfg.embed_width..].copy_from_slice(right.vector(x - d, y));
            let head = head_forward(params, concat.clone());
            let (_, p_bad) = softmax2(head.logits);
            scores[y * w + x] = p_bad;
            valid[y * w + x] = true;
        }
    }
    Ok(ScoreMap {
        width: w,
        height: h,
        scores,
        valid,
    })
}
