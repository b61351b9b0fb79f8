//! A 1D convolutional, densely connected speedup regressor.
//!
//! Activations are row-major `[len][channels]`; convolution kernels are
//! `[out][k][in]`. The network is: initial convolution, a chain of dense
//! blocks (conv, relu, conv, relu, concatenated with the block input), global
//! average pooling over the sequence, concatenation with the transformation
//! vector, one hidden fully connected layer and a scalar output.
//!
//! Gradients are computed by hand; the finite-difference checks in the test
//! suite cover every layer.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rank::is_accurate;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("parameter became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    /// Length of the transformation vector joined after pooling.
    pub tvec_len: usize,
    pub init_channels: usize,
    pub blocks: usize,
    pub growth: usize,
    pub kernel: usize,
    pub hidden: usize,
}

impl Architecture {
    pub fn new(in_channels: usize, tvec_len: usize) -> Self {
        Architecture { in_channels, tvec_len, init_channels: 64, blocks: 4, growth: 32, kernel: 3, hidden: 128 }
    }

    /// Channels after the last dense block.
    pub fn feature_len(&self) -> usize {
        self.init_channels + self.blocks * self.growth
    }

    fn block_in(&self, b: usize) -> usize {
        self.init_channels + b * self.growth
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let k = self.kernel;
        let mut s = vec![vec![self.init_channels, k, self.in_channels], vec![self.init_channels]];
        for b in 0..self.blocks {
            s.push(vec![self.growth, k, self.block_in(b)]);
            s.push(vec![self.growth]);
            s.push(vec![self.growth, k, self.growth]);
            s.push(vec![self.growth]);
        }
        let head_in = self.feature_len() + self.tvec_len;
        s.push(vec![self.hidden, head_in]);
        s.push(vec![self.hidden]);
        s.push(vec![1, self.hidden]);
        s.push(vec![1]);
        s
    }

    fn fc1(&self) -> usize {
        2 + 4 * self.blocks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_drop_epochs: Vec<usize>,
    /// The learning rate is divided by this at every drop epoch.
    pub lr_drop_divisor: f64,
    pub momentum: f64,
    pub clip_abs: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            batch_size: 256,
            epochs: 300,
            lr0: 0.001,
            lr_drop_epochs: vec![100, 200],
            lr_drop_divisor: 3.0,
            momentum: 0.9,
            clip_abs: 10.0,
            seed: 1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Hyper(m.to_string()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr_drop_divisor > 0.0 && self.clip_abs > 0.0) {
            return bad("learning rate, drop divisor and clip bound must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.lr_drop_epochs.iter().any(|&e| e >= self.epochs) {
            return bad("drop epochs must precede the last epoch");
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn learning_rate(h: &Hyperparams, epoch: usize) -> f64 {
    let drops = h.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    h.lr0 / h.lr_drop_divisor.powi(drops as i32)
}

pub fn clip(g: f64, bound: f64) -> f64 {
    g.clamp(-bound, bound)
}

/// Valid (`pad = 0`) or padded cross-correlation along the sequence.
///
/// `input` is `[len][in_ch]`, `w` is `[out_ch][k][in_ch]`. Output length is
/// `len + 2 * pad - k + 1`.
pub fn conv1d_forward(
    input: &[f64],
    len: usize,
    in_ch: usize,
    w: &[f64],
    b: &[f64],
    k: usize,
    pad: usize,
) -> Result<Vec<f64>, NeuralError> {
    let out_ch = b.len();
    if input.len() != len * in_ch || w.len() != out_ch * k * in_ch {
        return Err(NeuralError::ShapeMismatch(format!(
            "input {} for {len}x{in_ch}, kernel {} for {out_ch}x{k}x{in_ch}",
            input.len(),
            w.len()
        )));
    }
    if k == 0 || k > len + 2 * pad {
        return Err(NeuralError::ShapeMismatch(format!("kernel width {k} exceeds padded length {}", len + 2 * pad)));
    }
    let out_len = len + 2 * pad - k + 1;
    let mut out = vec![0.0; out_len * out_ch];
    for t in 0..out_len {
        let row = &mut out[t * out_ch..(t + 1) * out_ch];
        row.copy_from_slice(b);
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else { continue };
            let x = &input[src * in_ch..(src + 1) * in_ch];
            for (o, r) in row.iter_mut().enumerate() {
                let wk = &w[(o * k + j) * in_ch..(o * k + j + 1) * in_ch];
                *r += dot(wk, x);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution given the output gradient: `(d_input, d_w, d_b)`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    input: &[f64],
    len: usize,
    in_ch: usize,
    w: &[f64],
    out_ch: usize,
    k: usize,
    pad: usize,
    grad_out: &[f64],
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_len = len + 2 * pad - k + 1;
    let mut dx = if need_input_grad { vec![0.0; len * in_ch] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_ch];
    for t in 0..out_len {
        let g = &grad_out[t * out_ch..(t + 1) * out_ch];
        for (o, &go) in g.iter().enumerate() {
            db[o] += go;
        }
        for j in 0..k {
            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < len) else { continue };
            let x = &input[src * in_ch..(src + 1) * in_ch];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let base = (o * k + j) * in_ch;
                for (dwv, xv) in dw[base..base + in_ch].iter_mut().zip(x) {
                    *dwv += go * xv;
                }
                if need_input_grad {
                    for (dxv, wv) in dx[src * in_ch..(src + 1) * in_ch].iter_mut().zip(&w[base..base + in_ch]) {
                        *dxv += go * wv;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Zero the gradient where the pre-activation was not positive.
fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Mean over the sequence dimension.
pub fn global_avg_pool(input: &[f64], len: usize, ch: usize) -> Vec<f64> {
    let mut out = vec![0.0; ch];
    for t in 0..len {
        for (o, x) in out.iter_mut().zip(&input[t * ch..(t + 1) * ch]) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= len as f64);
    out
}

pub fn global_avg_pool_backward(grad: &[f64], len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * grad.len());
    for _ in 0..len {
        out.extend(grad.iter().map(|g| g / len as f64));
    }
    out
}

/// Concatenate two `[len][*]` matrices along channels.
fn concat_channels(a: &[f64], ca: usize, b: &[f64], cb: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * (ca + cb));
    for t in 0..len {
        out.extend_from_slice(&a[t * ca..(t + 1) * ca]);
        out.extend_from_slice(&b[t * cb..(t + 1) * cb]);
    }
    out
}

/// Weights of one dense block.
#[derive(Debug, Clone, Copy)]
pub struct DenseBlockRef<'a> {
    pub in_ch: usize,
    pub growth: usize,
    pub kernel: usize,
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

/// Intermediate values of a dense block kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DenseBlockCache {
    input: Vec<f64>,
    z1: Vec<f64>,
    r1: Vec<f64>,
    z2: Vec<f64>,
}

/// `concat(input, relu(conv2(relu(conv1(input)))))`, with same-length padding.
pub fn dense_block_forward(block: &DenseBlockRef<'_>, input: &[f64], len: usize) -> Result<(Vec<f64>, DenseBlockCache), NeuralError> {
    let pad = block.kernel / 2;
    let z1 = conv1d_forward(input, len, block.in_ch, block.w1, block.b1, block.kernel, pad)?;
    let r1 = relu(&z1);
    let z2 = conv1d_forward(&r1, len, block.growth, block.w2, block.b2, block.kernel, pad)?;
    let r2 = relu(&z2);
    let out = concat_channels(input, block.in_ch, &r2, block.growth, len);
    Ok((out, DenseBlockCache { input: input.to_vec(), z1, r1, z2 }))
}

/// Returns `(d_input, [d_w1, d_b1, d_w2, d_b2])`.
pub fn dense_block_backward(
    block: &DenseBlockRef<'_>,
    cache: &DenseBlockCache,
    grad_out: &[f64],
    len: usize,
) -> (Vec<f64>, [Vec<f64>; 4]) {
    let (ci, g) = (block.in_ch, block.growth);
    let pad = block.kernel / 2;
    let mut d_in = Vec::with_capacity(len * ci);
    let mut dz2 = Vec::with_capacity(len * g);
    for t in 0..len {
        d_in.extend_from_slice(&grad_out[t * (ci + g)..t * (ci + g) + ci]);
        dz2.extend_from_slice(&grad_out[t * (ci + g) + ci..(t + 1) * (ci + g)]);
    }
    relu_backward(&cache.z2, &mut dz2);
    let (mut dz1, dw2, db2) = conv1d_backward(&cache.r1, len, g, block.w2, g, block.kernel, pad, &dz2, true);
    relu_backward(&cache.z1, &mut dz1);
    let (dx, dw1, db1) = conv1d_backward(&cache.input, len, ci, block.w1, g, block.kernel, pad, &dz1, true);
    d_in.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
    (d_in, [dw1, db1, dw2, db2])
}

/// Cached activations of the convolutional feature extractor.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    input: Vec<f64>,
    len: usize,
    a0: Vec<f64>,
    blocks: Vec<DenseBlockCache>,
}

/// Cached activations of the fully connected head.
#[derive(Debug, Clone)]
pub struct HeadCache {
    u: Vec<f64>,
    z3: Vec<f64>,
    r3: Vec<f64>,
}

/// Network weights plus the hyperparameters they were trained with.
#[derive(Debug)]
pub struct ModelParams {
    pub arch: Architecture,
    pub hyper: Hyperparams,
    /// Parameter tensors in [`Architecture::shapes`] order.
    pub tensors: Vec<Vec<f64>>,
    feature_calls: AtomicUsize,
}

impl Clone for ModelParams {
    fn clone(&self) -> Self {
        ModelParams {
            arch: self.arch,
            hyper: self.hyper.clone(),
            tensors: self.tensors.clone(),
            feature_calls: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.hyper == other.hyper && self.tensors == other.tensors
    }
}

/// Gradients in the same layout as [`ModelParams::tensors`].
pub type Grads = Vec<Vec<f64>>;

impl ModelParams {
    /// Fan-in scaled uniform weights, zero biases, output bias 1.
    pub fn init(arch: Architecture, hyper: Hyperparams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let shapes = arch.shapes();
        let mut tensors = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            if i % 2 == 1 {
                tensors.push(vec![0.0; n]);
            } else {
                let fan_in: usize = s[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                tensors.push((0..n).map(|_| rng.gen_range(-bound..bound)).collect());
            }
        }
        // Speedups cluster around 1.
        *tensors.last_mut().expect("output bias")[..].first_mut().expect("one entry") = 1.0;
        ModelParams { arch, hyper, tensors, feature_calls: AtomicUsize::new(0) }
    }

    pub fn zero_grads(&self) -> Grads {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// How many times the feature extractor has run.
    pub fn feature_calls(&self) -> usize {
        self.feature_calls.load(Ordering::Relaxed)
    }

    pub fn reset_feature_calls(&self) {
        self.feature_calls.store(0, Ordering::Relaxed);
    }

    pub fn block(&self, b: usize) -> DenseBlockRef<'_> {
        let i = 2 + 4 * b;
        DenseBlockRef {
            in_ch: self.arch.block_in(b),
            growth: self.arch.growth,
            kernel: self.arch.kernel,
            w1: &self.tensors[i],
            b1: &self.tensors[i + 1],
            w2: &self.tensors[i + 2],
            b2: &self.tensors[i + 3],
        }
    }

    fn check_input(&self, input: &[f64], len: usize) -> Result<(), NeuralError> {
        if len == 0 || input.len() != len * self.arch.in_channels {
            return Err(NeuralError::ShapeMismatch(format!(
                "input of {} values is not {len} rows of {} channels",
                input.len(),
                self.arch.in_channels
            )));
        }
        Ok(())
    }

    /// Pooled features of one loop matrix (`[len][in_channels]`).
    pub fn features(&self, input: &[f64], len: usize) -> Result<Vec<f64>, NeuralError> {
        Ok(self.features_forward(input, len)?.0)
    }

    pub fn features_forward(&self, input: &[f64], len: usize) -> Result<(Vec<f64>, FeatureCache), NeuralError> {
        self.check_input(input, len)?;
        self.feature_calls.fetch_add(1, Ordering::Relaxed);
        let a = &self.arch;
        let a0 = conv1d_forward(input, len, a.in_channels, &self.tensors[0], &self.tensors[1], a.kernel, a.kernel / 2)?;
        let mut cur = relu(&a0);
        let mut blocks = Vec::with_capacity(a.blocks);
        for b in 0..a.blocks {
            let (out, cache) = dense_block_forward(&self.block(b), &cur, len)?;
            blocks.push(cache);
            cur = out;
        }
        let pooled = global_avg_pool(&cur, len, a.feature_len());
        Ok((pooled, FeatureCache { input: input.to_vec(), len, a0, blocks }))
    }

    /// Prediction from pooled features and a transformation vector.
    pub fn head(&self, pooled: &[f64], tvec: &[f64]) -> Result<f64, NeuralError> {
        Ok(self.head_forward(pooled, tvec)?.0)
    }

    pub fn head_forward(&self, pooled: &[f64], tvec: &[f64]) -> Result<(f64, HeadCache), NeuralError> {
        let a = &self.arch;
        if pooled.len() != a.feature_len() || tvec.len() != a.tvec_len {
            return Err(NeuralError::ShapeMismatch(format!(
                "head expects {} features and {} transformation entries, got {} and {}",
                a.feature_len(),
                a.tvec_len,
                pooled.len(),
                tvec.len()
            )));
        }
        let f = a.fc1();
        let u: Vec<f64> = pooled.iter().chain(tvec).copied().collect();
        let (w1, b1, w2, b2) = (&self.tensors[f], &self.tensors[f + 1], &self.tensors[f + 2], &self.tensors[f + 3]);
        let n = u.len();
        let z3: Vec<f64> = (0..a.hidden).map(|h| b1[h] + dot(&w1[h * n..(h + 1) * n], &u)).collect();
        let r3 = relu(&z3);
        let p = b2[0] + dot(w2, &r3);
        Ok((p, HeadCache { u, z3, r3 }))
    }

    /// Full forward pass for one (loop, transformation) pair.
    pub fn forward(&self, input: &[f64], len: usize, tvec: &[f64]) -> Result<f64, NeuralError> {
        let pooled = self.features(input, len)?;
        self.head(&pooled, tvec)
    }

    /// Score many transformation vectors against one loop with a single
    /// feature-extractor pass.
    pub fn score_batch(&self, input: &[f64], len: usize, tvecs: &[Vec<f64>]) -> Result<Vec<f64>, NeuralError> {
        let pooled = self.features(input, len)?;
        tvecs.iter().map(|t| self.head(&pooled, t)).collect()
    }

    /// Accumulate head gradients for output gradient `dp`; returns d_pooled.
    pub fn head_backward(&self, cache: &HeadCache, dp: f64, grads: &mut Grads) -> Vec<f64> {
        let a = &self.arch;
        let f = a.fc1();
        let n = cache.u.len();
        grads[f + 3][0] += dp;
        let w2 = &self.tensors[f + 2];
        let mut dz3: Vec<f64> = w2.iter().map(|w| w * dp).collect();
        for (h, r) in cache.r3.iter().enumerate() {
            grads[f + 2][h] += dp * r;
        }
        relu_backward(&cache.z3, &mut dz3);
        let w1 = &self.tensors[f];
        let mut du = vec![0.0; n];
        for (h, &g) in dz3.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads[f + 1][h] += g;
            let row = &mut grads[f][h * n..(h + 1) * n];
            for (d, u) in row.iter_mut().zip(&cache.u) {
                *d += g * u;
            }
            for (d, w) in du.iter_mut().zip(&w1[h * n..(h + 1) * n]) {
                *d += g * w;
            }
        }
        du.truncate(a.feature_len());
        du
    }

    /// Accumulate feature-extractor gradients for `d_pooled`; returns the input gradient.
    pub fn features_backward(&self, cache: &FeatureCache, d_pooled: &[f64], grads: &mut Grads) -> Vec<f64> {
        let a = &self.arch;
        let len = cache.len;
        let mut d = global_avg_pool_backward(d_pooled, len);
        for b in (0..a.blocks).rev() {
            let (d_in, g) = dense_block_backward(&self.block(b), &cache.blocks[b], &d, len);
            for (j, gj) in g.into_iter().enumerate() {
                grads[2 + 4 * b + j].iter_mut().zip(gj).for_each(|(x, y)| *x += y);
            }
            d = d_in;
        }
        relu_backward(&cache.a0, &mut d);
        let (dx, dw, db) = conv1d_backward(&cache.input, len, a.in_channels, &self.tensors[0], a.init_channels, a.kernel, a.kernel / 2, &d, true);
        grads[0].iter_mut().zip(dw).for_each(|(x, y)| *x += y);
        grads[1].iter_mut().zip(db).for_each(|(x, y)| *x += y);
        dx
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// FNV-1a over the parameter bytes, for determinism checks.
    pub fn fingerprint(&self) -> u64 {
        let bytes: Vec<u8> = self.tensors.iter().flatten().flat_map(|x| x.to_le_bytes()).collect();
        crate::encode::fnv1a(&bytes)
    }
}

pub fn mse_loss(preds: &[f64], targets: &[f64]) -> Result<f64, NeuralError> {
    if preds.len() != targets.len() {
        return Err(NeuralError::ShapeMismatch(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    Ok(preds.iter().zip(targets).map(|(p, s)| (p - s) * (p - s)).sum::<f64>() / preds.len() as f64)
}

/// SGD with momentum and element-wise gradient clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &ModelParams) -> Self {
        Sgd { velocity: model.zero_grads() }
    }

    pub fn step(&mut self, model: &mut ModelParams, grads: &Grads, epoch: usize) -> Result<(), NeuralError> {
        if grads.len() != model.tensors.len() || grads.iter().zip(&model.tensors).any(|(g, t)| g.len() != t.len()) {
            return Err(NeuralError::ShapeMismatch("gradient layout differs from the model".into()));
        }
        let h = &model.hyper;
        let lr = learning_rate(h, epoch);
        let (mu, c) = (h.momentum, h.clip_abs);
        for ((param, vel), grad) in model.tensors.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((p, v), &g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v + clip(g, c);
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// One training or validation example: loop index, transformation vector, target speedup.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub loop_index: usize,
    pub tvec: Vec<f64>,
    pub target: f64,
}

/// Encoded loops plus the examples that refer to them.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    /// `(matrix, len)` per loop; every matrix has `len * in_channels` values.
    pub loops: Vec<(Vec<f64>, usize)>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Percentage of validation examples with an accurate prediction.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Predictions for `examples`, one feature pass per distinct loop.
pub fn predict_examples(model: &ModelParams, set: &TrainingSet, examples: &[Example]) -> Result<Vec<f64>, NeuralError> {
    let mut feats: Vec<Option<Vec<f64>>> = vec![None; set.loops.len()];
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        if feats[e.loop_index].is_none() {
            let (m, len) = &set.loops[e.loop_index];
            feats[e.loop_index] = Some(model.features(m, *len)?);
        }
        out.push(model.head(feats[e.loop_index].as_ref().expect("just filled"), &e.tvec)?);
    }
    Ok(out)
}

/// Mean-squared-error gradient of a batch, sharing feature passes between
/// examples of the same loop. Returns the gradients and the batch loss.
pub fn batch_gradients(model: &ModelParams, set: &TrainingSet, batch: &[&Example]) -> Result<(Grads, f64), NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    let mut grads = model.zero_grads();
    let mut order: Vec<&Example> = batch.to_vec();
    order.sort_by_key(|e| e.loop_index);
    let n = batch.len() as f64;
    let mut loss = 0.0;
    for group in order.chunk_by(|a, b| a.loop_index == b.loop_index) {
        let (m, len) = &set.loops[group[0].loop_index];
        let (pooled, fcache) = model.features_forward(m, *len)?;
        let mut d_pooled = vec![0.0; pooled.len()];
        for e in group {
            let (p, hcache) = model.head_forward(&pooled, &e.tvec)?;
            loss += (p - e.target) * (p - e.target) / n;
            let dp = 2.0 * (p - e.target) / n;
            let d = model.head_backward(&hcache, dp, &mut grads);
            d_pooled.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        model.features_backward(&fcache, &d_pooled, &mut grads);
    }
    Ok((grads, loss))
}

fn evaluate(model: &ModelParams, set: &TrainingSet, examples: &[Example]) -> Result<(f64, f64), NeuralError> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let preds = predict_examples(model, set, examples)?;
    let targets: Vec<f64> = examples.iter().map(|e| e.target).collect();
    let mse = mse_loss(&preds, &targets)?;
    let acc = preds.iter().zip(&targets).filter(|(p, a)| is_accurate(**p, **a)).count() as f64;
    Ok((mse, 100.0 * acc / examples.len() as f64))
}

/// Train from a fresh initialization and return the best epoch's parameters.
///
/// The best epoch has the highest validation accuracy, then the lowest
/// validation MSE, then comes first. Without validation examples the lowest
/// training MSE decides.
pub fn train(set: &TrainingSet, arch: Architecture, hyper: &Hyperparams) -> Result<TrainOutcome, NeuralError> {
    hyper.validate()?;
    if set.train.is_empty() {
        return Err(NeuralError::EmptyDataset);
    }
    for (m, len) in &set.loops {
        if m.len() != len * arch.in_channels {
            return Err(NeuralError::ShapeMismatch("loop matrix does not match the input channels".into()));
        }
    }
    let mut model = ModelParams::init(arch, hyper.clone());
    let mut sgd = Sgd::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..set.train.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(ModelParams, EpochStats)> = None;
    let batch_size = hyper.batch_size.min(set.train.len());
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &set.train[i]).collect();
            let (grads, _) = batch_gradients(&model, set, &batch)?;
            sgd.step(&mut model, &grads, epoch)?;
            if !model.all_finite() {
                return Err(NeuralError::NonFinite { epoch });
            }
        }
        let (train_mse, _) = evaluate(&model, set, &set.train)?;
        let (val_mse, val_accuracy) = evaluate(&model, set, &set.validation)?;
        let stats = EpochStats { epoch, train_mse, val_mse, val_accuracy };
        log::debug!("epoch {epoch}: train mse {train_mse:.6}, val mse {val_mse:.6}, val acc {val_accuracy:.2}%");
        history.push(stats);
        let better = match &best {
            None => true,
            Some((_, b)) if set.validation.is_empty() => stats.train_mse < b.train_mse,
            Some((_, b)) => {
                stats.val_accuracy > b.val_accuracy || (stats.val_accuracy == b.val_accuracy && stats.val_mse < b.val_mse)
            }
        };
        if better {
            best = Some((model.clone(), stats));
        }
    }
    let (model, stats) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, best_epoch: stats.epoch, history })
}

const CKPT_MAGIC: &[u8; 8] = b"LTMODEL\0";
const CKPT_VERSION: u32 = 1;

impl ModelParams {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NeuralError> {
        let a = &self.arch;
        let h = &self.hyper;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        for v in [a.in_channels, a.tvec_len, a.init_channels, a.blocks, a.growth, a.kernel, a.hidden] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&h.seed.to_le_bytes())?;
        for v in [h.batch_size, h.epochs] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in [h.lr0, h.lr_drop_divisor, h.momentum, h.clip_abs] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(h.lr_drop_epochs.len() as u32).to_le_bytes())?;
        for &e in &h.lr_drop_epochs {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let shapes = a.shapes();
        w.write_all(&(shapes.len() as u32).to_le_bytes())?;
        for (shape, t) in shapes.iter().zip(&self.tensors) {
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for x in t {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NeuralError> {
        let bad = |m: String| NeuralError::Checkpoint(m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let arch = Architecture {
            in_channels: dims[0],
            tvec_len: dims[1],
            init_channels: dims[2],
            blocks: dims[3],
            growth: dims[4],
            kernel: dims[5],
            hidden: dims[6],
        };
        let seed = read_u64(r)?;
        let batch_size = read_u32(r)? as usize;
        let epochs = read_u32(r)? as usize;
        let lr0 = read_f64(r)?;
        let lr_drop_divisor = read_f64(r)?;
        let momentum = read_f64(r)?;
        let clip_abs = read_f64(r)?;
        let nd = read_u32(r)? as usize;
        if nd > 1024 {
            return Err(bad("implausible number of drop epochs".into()));
        }
        let lr_drop_epochs = (0..nd).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<_, _>>()?;
        let hyper = Hyperparams { batch_size, epochs, lr0, lr_drop_epochs, lr_drop_divisor, momentum, clip_abs, seed };
        let shapes = arch.shapes();
        let count = read_u32(r)? as usize;
        if count != shapes.len() {
            return Err(bad(format!("{count} tensors, architecture needs {}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (i, expected) in shapes.iter().enumerate() {
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(bad(format!("tensor {i} has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if &shape != expected {
                return Err(bad(format!("tensor {i} has shape {shape:?}, expected {expected:?}")));
            }
            let n: usize = shape.iter().product();
            let t = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>, _>>()?;
            tensors.push(t);
        }
        Ok(ModelParams { arch, hyper, tensors, feature_calls: AtomicUsize::new(0) })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, NeuralError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, NeuralError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, NeuralError> {
    Ok(f64::from_bits(read_u64(r)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_examples() {
        let out = conv1d_forward(&[1.0, 2.0, 3.0, 4.0], 4, 1, &[1.0, 0.0, -1.0], &[0.0], 3, 0).unwrap();
        assert_eq!(out, vec![-2.0, -2.0]);
        let x = [0.5, -1.0, 2.0];
        assert_eq!(conv1d_forward(&x, 3, 1, &[1.0], &[0.0], 1, 0).unwrap(), x.to_vec());
        assert!(conv1d_forward(&x, 3, 1, &[1.0; 4], &[0.0], 4, 0).is_err());
    }

    #[test]
    fn schedule_and_clip() {
        let h = Hyperparams::default();
        assert_eq!(learning_rate(&h, 0), 0.001);
        assert_eq!(learning_rate(&h, 99), 0.001);
        assert_eq!(learning_rate(&h, 100), 0.001 / 3.0);
        assert_eq!(learning_rate(&h, 200), 0.001 / 9.0);
        assert_eq!(clip(15.0, 10.0), 10.0);
        assert_eq!(clip(-15.0, 10.0), -10.0);
        assert_eq!(clip(5.0, 10.0), 5.0);
    }

    #[test]
    fn dense_block_grows_channels() {
        let arch = Architecture::new(3, 56);
        let m = ModelParams::init(arch, Hyperparams::default());
        let x = vec![0.1; 5 * 64];
        let (out, _) = dense_block_forward(&m.block(0), &x, 5).unwrap();
        assert_eq!(out.len(), 5 * 96);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[2.0], &[0.0]).unwrap(), 4.0);
        assert!(matches!(mse_loss(&[], &[]), Err(NeuralError::EmptyBatch)));
    }

    #[test]
    fn momentum_free_step() {
        let arch = Architecture { in_channels: 1, tvec_len: 1, init_channels: 1, blocks: 0, growth: 1, kernel: 1, hidden: 1 };
        let hyper = Hyperparams { lr0: 0.1, momentum: 0.0, ..Hyperparams::default() };
        let mut m = ModelParams::init(arch, hyper);
        m.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|x| *x = 0.0));
        let mut g = m.zero_grads();
        g[0][0] = 1.0;
        Sgd::new(&m).step(&mut m, &g, 0).unwrap();
        assert!((m.tensors[0][0] + 0.1).abs() < 1e-15);
    }
}
