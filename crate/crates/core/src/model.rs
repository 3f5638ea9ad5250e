//! Small convolutional multi-label classifier with hand-written forward and
//! backward passes.
//!
//! Architecture: a stack of 3x3 convolutions with ReLU, global average
//! pooling, one dense layer to per-class logits, and a per-class sigmoid.
//! Every activation of every conv layer is cached by [`Model::forward`] so
//! the backward pass and Grad-CAM can tap them. Training is plain SGD with
//! momentum, deterministic in the config seed; one parameter snapshot is
//! taken per epoch.
//!
//! Parameters live in a single flat buffer in declaration order (per conv
//! layer: weights `[out][in][ky][kx]` then biases; then the dense weights
//! `[class][channel]` and biases). Checkpoints serialize that buffer as
//! little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, LabelVector};
use crate::error::{Error, Result};
use crate::metrics::PredictionRecord;
use crate::rng::standard_normal;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the loss so the
/// logs stay finite; the gradient is zero where the clamp is active.
const CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub conv_layers: Vec<ConvSpec>,
    pub num_classes: usize,
    /// Conv layer index whose activations count as "middle" for saliency.
    pub middle_tap: usize,
    /// Conv layer index whose activations count as "final" for saliency.
    pub final_tap: usize,
}

impl ArchConfig {
    /// Default stack: 3 conv layers (8, 16, 16 channels, 3x3, stride 1,
    /// padding 1) so all feature maps share the input's spatial dims, with
    /// the middle tap on layer 2 and the final tap on layer 3.
    pub fn small_cnn(num_classes: usize) -> Self {
        let conv = |out_channels| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        ArchConfig {
            conv_layers: vec![conv(8), conv(16), conv(16)],
            num_classes,
            middle_tap: 1,
            final_tap: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::InvalidConfig("need at least one conv layer".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("need at least one class".into()));
        }
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.out_channels == 0 || c.kernel == 0 || c.stride == 0 {
                return Err(Error::InvalidConfig(format!(
                    "conv layer {i}: channels, kernel and stride must be positive"
                )));
            }
        }
        if self.final_tap >= self.conv_layers.len() || self.middle_tap >= self.final_tap {
            return Err(Error::InvalidConfig(format!(
                "taps (middle {}, final {}) must satisfy middle < final < {}",
                self.middle_tap,
                self.final_tap,
                self.conv_layers.len()
            )));
        }
        Ok(())
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.conv_layers[layer - 1].out_channels
        }
    }

    fn last_channels(&self) -> usize {
        self.conv_layers.last().expect("non-empty").out_channels
    }

    /// Feature-map dims after each conv layer for a given input size.
    pub fn layer_dims(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::with_capacity(self.conv_layers.len());
        let (mut h, mut w) = (height, width);
        for (i, c) in self.conv_layers.iter().enumerate() {
            let out = |d: usize| -> Result<usize> {
                let padded = d + 2 * c.padding;
                if padded < c.kernel {
                    return Err(Error::ShapeMismatch(format!(
                        "conv layer {i}: kernel {} larger than padded input {padded}",
                        c.kernel
                    )));
                }
                Ok((padded - c.kernel) / c.stride + 1)
            };
            h = out(h)?;
            w = out(w)?;
            dims.push((h, w));
        }
        Ok(dims)
    }
}

/// Offsets of each parameter block inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ParamLayout {
    conv_w: Vec<(usize, usize)>,
    conv_b: Vec<(usize, usize)>,
    dense_w: (usize, usize),
    dense_b: (usize, usize),
    total: usize,
}

impl ParamLayout {
    fn of(arch: &ArchConfig) -> Self {
        let mut off = 0;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for (l, c) in arch.conv_layers.iter().enumerate() {
            let w_len = c.out_channels * arch.in_channels(l) * c.kernel * c.kernel;
            conv_w.push((off, w_len));
            off += w_len;
            conv_b.push((off, c.out_channels));
            off += c.out_channels;
        }
        let dense_w = (off, arch.num_classes * arch.last_channels());
        off += dense_w.1;
        let dense_b = (off, arch.num_classes);
        off += dense_b.1;
        ParamLayout {
            conv_w,
            conv_b,
            dense_w,
            dense_b,
            total: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub arch: ArchConfig,
    params: Vec<F>,
    /// Seed the parameters were initialized from.
    pub init_seed: u64,
}

/// He-style initialization: weights from N(0, 2 / fan_in), biases zero;
/// deterministic in `seed`.
pub fn init_model<F: Scalar>(arch: &ArchConfig, seed: u64) -> Result<Model<F>> {
    arch.validate()?;
    let layout = ParamLayout::of(arch);
    let mut params = vec![F::zero(); layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (l, c) in arch.conv_layers.iter().enumerate() {
        let fan_in = arch.in_channels(l) * c.kernel * c.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let (off, len) = layout.conv_w[l];
        for p in params[off..off + len].iter_mut() {
            *p = F::of(std * standard_normal(&mut rng));
        }
    }
    let std = (2.0 / arch.last_channels() as f64).sqrt();
    let (off, len) = layout.dense_w;
    for p in params[off..off + len].iter_mut() {
        *p = F::of(std * standard_normal(&mut rng));
    }
    Ok(Model {
        arch: arch.clone(),
        params,
        init_seed: seed,
    })
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<F> {
    /// `[N, 1, H, W]` input batch.
    pub input: Tensor<F>,
    /// Pre-activation maps per conv layer, `[N, C, h, w]`.
    pub pre_acts: Vec<Tensor<F>>,
    /// Post-ReLU maps per conv layer; these are the Grad-CAM taps.
    pub post_acts: Vec<Tensor<F>>,
    /// Global-average-pooled features, `[N, C_last]`.
    pub pooled: Tensor<F>,
    /// Pre-sigmoid class scores, `[N, L]`.
    pub logits: Tensor<F>,
    /// Sigmoid probabilities, `[N, L]`, strictly inside (0, 1).
    pub probs: Tensor<F>,
}

/// Valid output-x range `[lo, hi)` such that `ox*s + kx - p` stays inside
/// `[0, iw)`.
#[inline]
fn x_range(iw: usize, ow: usize, kx: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if kx >= p { 0 } else { (p - kx + s - 1) / s };
    let hi = if iw + p <= kx {
        0
    } else {
        ((iw - 1 + p - kx) / s + 1).min(ow)
    };
    (lo, hi.max(lo))
}

/// One-sample convolution; `out` gets bias + correlation.
#[allow(clippy::too_many_arguments)]
fn conv_forward_single<F: Scalar>(
    input: &[F],
    cin: usize,
    ih: usize,
    iw: usize,
    weights: &[F],
    bias: &[F],
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    out: &mut [F],
    oh: usize,
    ow: usize,
) {
    for co in 0..cout {
        let b = bias[co];
        for v in out[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
            *v = b;
        }
    }
    for co in 0..cout {
        for ci in 0..cin {
            let in_c = &input[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weights[((co * cin + ci) * k + ky) * k + kx];
                    let (lo, hi) = x_range(iw, ow, kx, s, p);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= ih {
                            continue;
                        }
                        let in_row = &in_c[(iy - p) * iw..(iy - p) * iw + iw];
                        let out_row = &mut out[(co * oh + oy) * ow..(co * oh + oy) * ow + ow];
                        if s == 1 {
                            // Contiguous slices so the loop vectorizes.
                            let i0 = lo + kx - p;
                            let i1 = hi + kx - p;
                            for (o, x) in out_row[lo..hi].iter_mut().zip(&in_row[i0..i1]) {
                                *o += w * *x;
                            }
                        } else {
                            for ox in lo..hi {
                                out_row[ox] += w * in_row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four independent lanes (fixed combine order).
#[inline]
fn dot4<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let av = &a[c * 4..c * 4 + 4];
        let bv = &b[c * 4..c * 4 + 4];
        lanes[0] += av[0] * bv[0];
        lanes[1] += av[1] * bv[1];
        lanes[2] += av[2] * bv[2];
        lanes[3] += av[3] * bv[3];
    }
    for i in chunks * 4..a.len() {
        lanes[0] += a[i] * b[i];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

/// One-sample convolution backward: accumulates weight/bias gradients and,
/// when `g_in` is given, the gradient with respect to the layer input.
#[allow(clippy::too_many_arguments)]
fn conv_backward_single<F: Scalar>(
    input: &[F],
    cin: usize,
    ih: usize,
    iw: usize,
    weights: &[F],
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    g_out: &[F],
    oh: usize,
    ow: usize,
    g_w: &mut [F],
    g_b: &mut [F],
    mut g_in: Option<&mut [F]>,
) {
    for co in 0..cout {
        let mut acc = F::zero();
        for v in &g_out[co * oh * ow..(co + 1) * oh * ow] {
            acc += *v;
        }
        g_b[co] += acc;
    }
    for co in 0..cout {
        for ci in 0..cin {
            let in_c = &input[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let w = weights[widx];
                    let (lo, hi) = x_range(iw, ow, kx, s, p);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = F::zero();
                    for oy in 0..oh {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= ih {
                            continue;
                        }
                        let in_row = &in_c[(iy - p) * iw..(iy - p) * iw + iw];
                        let g_row = &g_out[(co * oh + oy) * ow..(co * oh + oy) * ow + ow];
                        if s == 1 {
                            let i0 = lo + kx - p;
                            let i1 = hi + kx - p;
                            acc += dot4(&g_row[lo..hi], &in_row[i0..i1]);
                            if let Some(g_in) = g_in.as_deref_mut() {
                                let gin_row = &mut g_in
                                    [(ci * ih + iy - p) * iw..(ci * ih + iy - p) * iw + iw];
                                for (gi, go) in
                                    gin_row[i0..i1].iter_mut().zip(&g_row[lo..hi])
                                {
                                    *gi += *go * w;
                                }
                            }
                        } else {
                            for ox in lo..hi {
                                acc += g_row[ox] * in_row[ox * s + kx - p];
                            }
                            if let Some(g_in) = g_in.as_deref_mut() {
                                let gin_row = &mut g_in
                                    [(ci * ih + iy - p) * iw..(ci * ih + iy - p) * iw + iw];
                                for ox in lo..hi {
                                    gin_row[ox * s + kx - p] += g_row[ox] * w;
                                }
                            }
                        }
                    }
                    g_w[widx] += acc;
                }
            }
        }
    }
}

impl<F: Scalar> Model<F> {
    fn layout(&self) -> ParamLayout {
        ParamLayout::of(&self.arch)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn param(&self, index: usize) -> F {
        self.params[index]
    }

    pub fn set_param(&mut self, index: usize, value: F) {
        self.params[index] = value;
    }

    fn batch_dims(&self, batch: &Tensor<F>) -> Result<(usize, usize, usize)> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected batch shape [N, 1, H, W], got {shape:?}"
            )));
        }
        Ok((shape[0], shape[2], shape[3]))
    }

    /// Full forward pass with cached per-layer activations.
    pub fn forward(&self, batch: &Tensor<F>) -> Result<ForwardPass<F>> {
        let (n, h, w) = self.batch_dims(batch)?;
        let dims = self.arch.layer_dims(h, w)?;
        let layout = self.layout();
        let n_layers = self.arch.conv_layers.len();
        let l_classes = self.arch.num_classes;

        let mut pre_acts = Vec::with_capacity(n_layers);
        let mut post_acts: Vec<Tensor<F>> = Vec::with_capacity(n_layers);
        let (mut ih, mut iw) = (h, w);
        for l in 0..n_layers {
            let c = self.arch.conv_layers[l];
            let cin = self.arch.in_channels(l);
            let (oh, ow) = dims[l];
            let mut z = Tensor::zeros(&[n, c.out_channels, oh, ow]);
            {
                let (w_off, w_len) = layout.conv_w[l];
                let (b_off, b_len) = layout.conv_b[l];
                let weights = &self.params[w_off..w_off + w_len];
                let bias = &self.params[b_off..b_off + b_len];
                let in_stride = cin * ih * iw;
                let out_stride = c.out_channels * oh * ow;
                for s_idx in 0..n {
                    let input = if l == 0 {
                        &batch.data()[s_idx * in_stride..(s_idx + 1) * in_stride]
                    } else {
                        &post_acts[l - 1].data()[s_idx * in_stride..(s_idx + 1) * in_stride]
                    };
                    conv_forward_single(
                        input,
                        cin,
                        ih,
                        iw,
                        weights,
                        bias,
                        c.out_channels,
                        c.kernel,
                        c.stride,
                        c.padding,
                        &mut z.data_mut()[s_idx * out_stride..(s_idx + 1) * out_stride],
                        oh,
                        ow,
                    );
                }
            }
            let mut a = z.clone();
            for v in a.data_mut().iter_mut() {
                if *v < F::zero() {
                    *v = F::zero();
                }
            }
            pre_acts.push(z);
            post_acts.push(a);
            ih = dims[l].0;
            iw = dims[l].1;
        }

        let c_last = self.arch.last_channels();
        let (fh, fw) = *dims.last().expect("at least one conv layer");
        let spatial = F::of((fh * fw) as f64);
        let mut pooled = Tensor::zeros(&[n, c_last]);
        {
            let a = post_acts.last().expect("non-empty").data();
            let pooled_data = pooled.data_mut();
            for s_idx in 0..n {
                for c in 0..c_last {
                    let base = (s_idx * c_last + c) * fh * fw;
                    let mut acc = F::zero();
                    for v in &a[base..base + fh * fw] {
                        acc += *v;
                    }
                    pooled_data[s_idx * c_last + c] = acc / spatial;
                }
            }
        }

        let mut logits = Tensor::zeros(&[n, l_classes]);
        {
            let (w_off, w_len) = layout.dense_w;
            let (b_off, b_len) = layout.dense_b;
            let dw = &self.params[w_off..w_off + w_len];
            let db = &self.params[b_off..b_off + b_len];
            let logit_data = logits.data_mut();
            let pooled_data = pooled.data();
            for s_idx in 0..n {
                for l in 0..l_classes {
                    let mut acc = db[l];
                    for c in 0..c_last {
                        acc += dw[l * c_last + c] * pooled_data[s_idx * c_last + c];
                    }
                    logit_data[s_idx * l_classes + l] = acc;
                }
            }
        }

        let mut probs = logits.clone();
        for v in probs.data_mut().iter_mut() {
            *v = F::one() / (F::one() + (-*v).exp());
        }

        Ok(ForwardPass {
            input: batch.clone(),
            pre_acts,
            post_acts,
            pooled,
            logits,
            probs,
        })
    }

    /// Runs the network from the post-activation of conv layer `tap` to the
    /// logits. `acts` must have shape `[N, C_tap, h_tap, w_tap]`.
    pub fn forward_from_tap(&self, tap: usize, acts: &Tensor<F>) -> Result<Tensor<F>> {
        let n_layers = self.arch.conv_layers.len();
        if tap >= n_layers {
            return Err(Error::OutOfBounds(format!(
                "tap {tap} out of range for {n_layers} conv layers"
            )));
        }
        let shape = acts.shape();
        if shape.len() != 4 || shape[1] != self.arch.conv_layers[tap].out_channels {
            return Err(Error::ShapeMismatch(format!(
                "expected tap activations [N, {}, h, w], got {shape:?}",
                self.arch.conv_layers[tap].out_channels
            )));
        }
        let n = shape[0];
        let layout = self.layout();
        let mut cur = acts.clone();
        let (mut ih, mut iw) = (shape[2], shape[3]);
        for l in tap + 1..n_layers {
            let c = self.arch.conv_layers[l];
            let cin = self.arch.in_channels(l);
            let padded_h = ih + 2 * c.padding;
            let padded_w = iw + 2 * c.padding;
            if padded_h < c.kernel || padded_w < c.kernel {
                return Err(Error::ShapeMismatch(format!(
                    "conv layer {l}: kernel larger than padded input"
                )));
            }
            let oh = (padded_h - c.kernel) / c.stride + 1;
            let ow = (padded_w - c.kernel) / c.stride + 1;
            let mut z = Tensor::zeros(&[n, c.out_channels, oh, ow]);
            let (w_off, w_len) = layout.conv_w[l];
            let (b_off, b_len) = layout.conv_b[l];
            let in_stride = cin * ih * iw;
            let out_stride = c.out_channels * oh * ow;
            for s_idx in 0..n {
                conv_forward_single(
                    &cur.data()[s_idx * in_stride..(s_idx + 1) * in_stride],
                    cin,
                    ih,
                    iw,
                    &self.params[w_off..w_off + w_len],
                    &self.params[b_off..b_off + b_len],
                    c.out_channels,
                    c.kernel,
                    c.stride,
                    c.padding,
                    &mut z.data_mut()[s_idx * out_stride..(s_idx + 1) * out_stride],
                    oh,
                    ow,
                );
            }
            for v in z.data_mut().iter_mut() {
                if *v < F::zero() {
                    *v = F::zero();
                }
            }
            cur = z;
            ih = oh;
            iw = ow;
        }
        let c_last = self.arch.last_channels();
        let l_classes = self.arch.num_classes;
        let spatial = F::of((ih * iw) as f64);
        let (w_off, w_len) = layout.dense_w;
        let (b_off, b_len) = layout.dense_b;
        let dw = &self.params[w_off..w_off + w_len];
        let db = &self.params[b_off..b_off + b_len];
        let mut logits = Tensor::zeros(&[n, l_classes]);
        for s_idx in 0..n {
            for l in 0..l_classes {
                let mut acc = db[l];
                for c in 0..c_last {
                    let base = (s_idx * c_last + c) * ih * iw;
                    let mut pool = F::zero();
                    for v in &cur.data()[base..base + ih * iw] {
                        pool += *v;
                    }
                    acc += dw[l * c_last + c] * (pool / spatial);
                }
                logits.data_mut()[s_idx * l_classes + l] = acc;
            }
        }
        Ok(logits)
    }

    /// Gradient of the class-`t` logit with respect to the post-activation
    /// of conv layer `tap`, per sample. Shape matches `pass.post_acts[tap]`.
    pub fn logit_gradient_wrt_tap(
        &self,
        pass: &ForwardPass<F>,
        t: usize,
        tap: usize,
    ) -> Result<Tensor<F>> {
        let n_layers = self.arch.conv_layers.len();
        if t >= self.arch.num_classes {
            return Err(Error::OutOfBounds(format!(
                "class {t} out of range for {} classes",
                self.arch.num_classes
            )));
        }
        if tap >= n_layers {
            return Err(Error::OutOfBounds(format!(
                "tap {tap} out of range for {n_layers} conv layers"
            )));
        }
        let n = pass.input.shape()[0];
        let layout = self.layout();
        let c_last = self.arch.last_channels();
        let last_shape = pass.post_acts[n_layers - 1].shape();
        let (fh, fw) = (last_shape[2], last_shape[3]);
        let spatial = F::of((fh * fw) as f64);
        let dw = {
            let (off, len) = layout.dense_w;
            &self.params[off..off + len]
        };

        // d logit_t / d a_last[c, y, x] = dense_w[t, c] / (fh * fw).
        let mut grad = Tensor::zeros(&[n, c_last, fh, fw]);
        for s_idx in 0..n {
            for c in 0..c_last {
                let g = dw[t * c_last + c] / spatial;
                let base = (s_idx * c_last + c) * fh * fw;
                for v in grad.data_mut()[base..base + fh * fw].iter_mut() {
                    *v = g;
                }
            }
        }

        for l in (tap + 1..n_layers).rev() {
            // Through the ReLU of layer l, then through its convolution.
            {
                let z = pass.pre_acts[l].data();
                for (g, z) in grad.data_mut().iter_mut().zip(z) {
                    if *z <= F::zero() {
                        *g = F::zero();
                    }
                }
            }
            let c = self.arch.conv_layers[l];
            let cin = self.arch.in_channels(l);
            let in_shape = pass.post_acts[l - 1].shape();
            let (ih, iw) = (in_shape[2], in_shape[3]);
            let out_shape = pass.pre_acts[l].shape();
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let (w_off, w_len) = layout.conv_w[l];
            let weights = &self.params[w_off..w_off + w_len];
            let mut prev = Tensor::zeros(&[n, cin, ih, iw]);
            let mut g_w_scratch = vec![F::zero(); w_len];
            let mut g_b_scratch = vec![F::zero(); c.out_channels];
            let in_stride = cin * ih * iw;
            let out_stride = c.out_channels * oh * ow;
            for s_idx in 0..n {
                conv_backward_single(
                    &pass.post_acts[l - 1].data()[s_idx * in_stride..(s_idx + 1) * in_stride],
                    cin,
                    ih,
                    iw,
                    weights,
                    c.out_channels,
                    c.kernel,
                    c.stride,
                    c.padding,
                    &grad.data()[s_idx * out_stride..(s_idx + 1) * out_stride],
                    oh,
                    ow,
                    &mut g_w_scratch,
                    &mut g_b_scratch,
                    Some(&mut prev.data_mut()[s_idx * in_stride..(s_idx + 1) * in_stride]),
                );
            }
            grad = prev;
        }
        Ok(grad)
    }
}

/// Mean binary cross-entropy over the `N x L` probability matrix, with the
/// probabilities clamped away from 0 and 1.
pub fn bce_loss<F: Scalar>(probs: &Tensor<F>, targets: &[LabelVector]) -> Result<F> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "probs shape {shape:?} vs {} targets",
            targets.len()
        )));
    }
    let l = shape[1];
    if targets.iter().any(|t| t.len() != l) {
        return Err(Error::ShapeMismatch("target length mismatch".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidConfig("loss of an empty batch".into()));
    }
    let lo = F::of(CLAMP);
    let hi = F::one() - lo;
    let mut acc = F::zero();
    for (i, target) in targets.iter().enumerate() {
        for (j, &bit) in target.bits().iter().enumerate() {
            let p = probs.at2(i, j).max(lo).min(hi);
            acc -= if bit { p.ln() } else { (F::one() - p).ln() };
        }
    }
    Ok(acc / F::of((targets.len() * l) as f64))
}

/// Analytic gradient of [`bce_loss`] with respect to every parameter, in
/// flat-buffer order.
pub fn backward<F: Scalar>(
    model: &Model<F>,
    pass: &ForwardPass<F>,
    targets: &[LabelVector],
) -> Result<Vec<F>> {
    let n = pass.input.shape()[0];
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    let l_classes = model.arch.num_classes;
    if targets.iter().any(|t| t.len() != l_classes) {
        return Err(Error::ShapeMismatch("target length mismatch".into()));
    }
    let layout = model.layout();
    let mut grads = vec![F::zero(); layout.total];
    let c_last = model.arch.last_channels();
    let n_layers = model.arch.conv_layers.len();
    let last_shape = pass.post_acts[n_layers - 1].shape();
    let (fh, fw) = (last_shape[2], last_shape[3]);
    let spatial = F::of((fh * fw) as f64);
    let lo = F::of(CLAMP);
    let hi = F::one() - lo;
    let inv_l = F::one() / F::of(l_classes as f64);
    let dense_w = {
        let (off, len) = layout.dense_w;
        &model.params[off..off + len]
    };

    // Dense layer: d loss_sample / d logit = (p - y) / L inside the clamp,
    // 0 outside; accumulate dense grads and seed the last conv activation
    // gradient through global average pooling.
    let mut d_act = Tensor::zeros(&[n, c_last, fh, fw]);
    {
        let mut d_logit = vec![F::zero(); l_classes];
        let (wo, _) = layout.dense_w;
        let (bo, _) = layout.dense_b;
        for s_idx in 0..n {
            for j in 0..l_classes {
                let p = pass.probs.at2(s_idx, j);
                d_logit[j] = if p <= lo || p >= hi {
                    F::zero()
                } else {
                    let y = if targets[s_idx].get(j) { F::one() } else { F::zero() };
                    (p - y) * inv_l
                };
            }
            for c in 0..c_last {
                let mut d_pool = F::zero();
                for j in 0..l_classes {
                    d_pool += d_logit[j] * dense_w[j * c_last + c];
                }
                let g = d_pool / spatial;
                let base = (s_idx * c_last + c) * fh * fw;
                for v in d_act.data_mut()[base..base + fh * fw].iter_mut() {
                    *v = g;
                }
            }
            for j in 0..l_classes {
                let dj = d_logit[j];
                grads[bo + j] += dj;
                for c in 0..c_last {
                    grads[wo + j * c_last + c] += dj * pass.pooled.at2(s_idx, c);
                }
            }
        }
    }

    // Down the conv stack, whole batch per layer.
    for l in (0..n_layers).rev() {
        let c = model.arch.conv_layers[l];
        let cin = model.arch.in_channels(l);
        let out_shape = pass.pre_acts[l].shape();
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let out_stride = c.out_channels * oh * ow;
        {
            let z = pass.pre_acts[l].data();
            for (g, z) in d_act.data_mut().iter_mut().zip(z) {
                if *z <= F::zero() {
                    *g = F::zero();
                }
            }
        }
        let (ih, iw) = if l == 0 {
            let s = pass.input.shape();
            (s[2], s[3])
        } else {
            let s = pass.post_acts[l - 1].shape();
            (s[2], s[3])
        };
        let in_stride = cin * ih * iw;
        let (w_off, w_len) = layout.conv_w[l];
        let (b_off, b_len) = layout.conv_b[l];
        let weights = &model.params[w_off..w_off + w_len];
        let mut d_prev = if l > 0 {
            Some(Tensor::zeros(&[n, cin, ih, iw]))
        } else {
            None
        };
        // The weight block immediately precedes the bias block.
        let (g_head, g_tail) = grads.split_at_mut(b_off);
        let g_w = &mut g_head[w_off..w_off + w_len];
        let g_b = &mut g_tail[..b_len];
        for s_idx in 0..n {
            let input = if l == 0 {
                &pass.input.data()[s_idx * in_stride..(s_idx + 1) * in_stride]
            } else {
                &pass.post_acts[l - 1].data()[s_idx * in_stride..(s_idx + 1) * in_stride]
            };
            conv_backward_single(
                input,
                cin,
                ih,
                iw,
                weights,
                c.out_channels,
                c.kernel,
                c.stride,
                c.padding,
                &d_act.data()[s_idx * out_stride..(s_idx + 1) * out_stride],
                oh,
                ow,
                g_w,
                g_b,
                d_prev
                    .as_mut()
                    .map(|t| &mut t.data_mut()[s_idx * in_stride..(s_idx + 1) * in_stride]),
            );
        }
        if let Some(prev) = d_prev {
            d_act = prev;
        }
    }

    let inv_n = F::one() / F::of(n as f64);
    for g in grads.iter_mut() {
        *g *= inv_n;
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Snapshot after every epoch (default); otherwise only the final epoch.
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            checkpoint_every_epoch: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be >= 1".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Parameter snapshot after a training epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub epoch: usize,
    pub model: Model<F>,
}

fn batch_tensor<F: Scalar>(ds: &Dataset<F>, indices: &[usize]) -> (Tensor<F>, Vec<LabelVector>) {
    let (h, w) = (ds.height, ds.width);
    let mut data = Vec::with_capacity(indices.len() * h * w);
    let mut targets = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(ds.samples[i].image.pixels());
        targets.push(ds.samples[i].training_label().clone());
    }
    (
        Tensor::from_vec(&[indices.len(), 1, h, w], data).expect("consistent dims"),
        targets,
    )
}

/// SGD with momentum over shuffled mini-batches; deterministic in the seed.
/// Infected samples are learned with their attacker-supplied labels.
pub fn train<F: Scalar>(
    model: &Model<F>,
    data: &Dataset<F>,
    cfg: &TrainConfig,
) -> Result<Vec<Checkpoint<F>>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot train on an empty dataset".into()));
    }
    if data.num_classes != model.arch.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, model {}",
            data.num_classes, model.arch.num_classes
        )));
    }
    model.arch.layer_dims(data.height, data.width)?;

    let mut current = model.clone();
    let mut velocity = vec![F::zero(); current.param_count()];
    let lr = F::of(cfg.learning_rate);
    let momentum = F::of(cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut checkpoints = Vec::new();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch, targets) = batch_tensor(data, chunk);
            let pass = current.forward(&batch)?;
            let loss = bce_loss(&pass.probs, &targets)?;
            loss_sum += loss.to64() * chunk.len() as f64;
            let grads = backward(&current, &pass, &targets)?;
            for ((p, v), g) in current.params.iter_mut().zip(&mut velocity).zip(&grads) {
                *v = momentum * *v + *g;
                *p = *p - lr * *v;
            }
        }
        let epoch_loss = loss_sum / data.len() as f64;
        if !epoch_loss.is_finite() || !current.params.iter().all(|p| p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
        if cfg.checkpoint_every_epoch || epoch == cfg.epochs {
            checkpoints.push(Checkpoint {
                epoch,
                model: current.clone(),
            });
        }
    }
    Ok(checkpoints)
}

/// Scores every sample of `ds`, preserving order.
pub fn predict<F: Scalar>(model: &Model<F>, ds: &Dataset<F>) -> Result<Vec<PredictionRecord<F>>> {
    const EVAL_BATCH: usize = 64;
    let mut records = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (batch, _) = batch_tensor(ds, chunk);
        let pass = model.forward(&batch)?;
        let l = model.arch.num_classes;
        for (row, &i) in chunk.iter().enumerate() {
            let s = &ds.samples[i];
            records.push(PredictionRecord {
                sample_id: s.id.clone(),
                probs: pass.probs.data()[row * l..(row + 1) * l].to_vec(),
                true_label: s.true_label.clone(),
                infected_label: s.infected_label.clone(),
                is_infected: s.is_infected,
            });
        }
    }
    Ok(records)
}

const CKPT_MAGIC: &[u8; 8] = b"BKDRCKPT";
const CKPT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, architecture descriptor (including the
/// init seed), then the flat parameter buffer as little-endian f64.
pub fn save_checkpoint<F: Scalar>(model: &Model<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&model.init_seed.to_le_bytes())?;
    w.write_all(&(model.arch.num_classes as u32).to_le_bytes())?;
    w.write_all(&(model.arch.conv_layers.len() as u32).to_le_bytes())?;
    for c in &model.arch.conv_layers {
        for v in [c.out_channels, c.kernel, c.stride, c.padding] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    w.write_all(&(model.arch.middle_tap as u32).to_le_bytes())?;
    w.write_all(&(model.arch.final_tap as u32).to_le_bytes())?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for p in &model.params {
        w.write_all(&p.to64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::MalformedData("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::MalformedData("checkpoint truncated".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Model<F>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::MalformedData("checkpoint truncated".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::MalformedData("bad checkpoint magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::MalformedData(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let init_seed = read_u64(&mut r)?;
    let num_classes = read_u32(&mut r)? as usize;
    let n_conv = read_u32(&mut r)? as usize;
    let mut conv_layers = Vec::with_capacity(n_conv);
    for _ in 0..n_conv {
        conv_layers.push(ConvSpec {
            out_channels: read_u32(&mut r)? as usize,
            kernel: read_u32(&mut r)? as usize,
            stride: read_u32(&mut r)? as usize,
            padding: read_u32(&mut r)? as usize,
        });
    }
    let arch = ArchConfig {
        conv_layers,
        num_classes,
        middle_tap: read_u32(&mut r)? as usize,
        final_tap: read_u32(&mut r)? as usize,
    };
    arch.validate()
        .map_err(|e| Error::MalformedData(format!("checkpoint architecture invalid: {e}")))?;
    let count = read_u64(&mut r)? as usize;
    let expected = ParamLayout::of(&arch).total;
    if count != expected {
        return Err(Error::MalformedData(format!(
            "checkpoint declares {count} parameters, architecture needs {expected}"
        )));
    }
    let mut params = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::MalformedData("checkpoint truncated".into()))?;
        params.push(F::of(f64::from_le_bytes(buf)));
    }
    // Anything left over means the file does not match its own header.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::MalformedData("trailing bytes after parameters".into()));
    }
    Ok(Model {
        arch,
        params,
        init_seed,
    })
}

/// Loads a checkpoint and insists on a specific architecture.
pub fn load_checkpoint_expecting<F: Scalar>(path: &Path, arch: &ArchConfig) -> Result<Model<F>> {
    let model = load_checkpoint(path)?;
    if &model.arch != arch {
        return Err(Error::ArchMismatch(format!(
            "checkpoint architecture {:?} differs from expected {:?}",
            model.arch, arch
        )));
    }
    Ok(model)
}
