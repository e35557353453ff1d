//! Dense-connectivity 1-D convolutional embedding network.
//!
//! Eight dilated conv layers whose activated outputs are concatenated onto a
//! running feature stack, global average pooling over time, and a fully
//! connected map to a 128-d embedding. Forward and reverse passes are written
//! against a small `Real` trait so training runs at 32-bit while gradient
//! verification runs at 64-bit.

use crate::error::{Error, Result};
use crate::preprocess::{Axis, NormStats, WindowTensor};
use std::io::{BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

/// Scalar type the network computes in.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Smooth elementwise nonlinearity applied after every conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Silu),
            other => Err(Error::validation(format!("unknown activation code {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::validation(format!("unknown activation {other:?}"))),
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (T::one() + (-x).exp()),
        }
    }

    /// Derivative given the pre-activation `x` and activated value `y`.
    fn grad<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

pub const CONV_LAYERS: usize = 8;
pub const EMBEDDING_DIM: usize = 128;
pub const DEFAULT_DILATIONS: [usize; CONV_LAYERS] = [1, 2, 4, 8, 16, 32, 64, 1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedderConfig {
    pub input_channels: usize,
    pub conv_layers: usize,
    /// Feature maps added to the stack by each conv layer.
    pub growth: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl EmbedderConfig {
    pub fn with_channels(input_channels: usize) -> Self {
        EmbedderConfig {
            input_channels,
            conv_layers: CONV_LAYERS,
            growth: 32,
            kernel_size: 3,
            dilations: DEFAULT_DILATIONS.to_vec(),
            embedding_dim: EMBEDDING_DIM,
            activation: Activation::Silu,
        }
    }

    /// Layer count and embedding width are architecture-fixed; growth, kernel
    /// and dilations are tunable. Input width below 1 is rejected here while
    /// the 4-vs-8 choice is owned by the channel assembly stage.
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers != CONV_LAYERS {
            return Err(Error::validation(format!(
                "conv_layers must be {CONV_LAYERS}, got {}",
                self.conv_layers
            )));
        }
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(Error::validation(format!(
                "embedding_dim must be {EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::validation("input_channels must be at least 1"));
        }
        if self.growth == 0 {
            return Err(Error::validation("growth must be at least 1"));
        }
        if self.kernel_size == 0 {
            return Err(Error::validation("kernel_size must be at least 1"));
        }
        if self.dilations.len() != self.conv_layers {
            return Err(Error::validation(format!(
                "expected {} dilation entries, got {}",
                self.conv_layers,
                self.dilations.len()
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::validation("dilations must be at least 1"));
        }
        Ok(())
    }

    /// Input channel count of conv layer `l` (0-based): C + l * growth.
    pub fn layer_input_channels(&self, l: usize) -> usize {
        self.input_channels + l * self.growth
    }

    /// Channels of the final concatenated stack fed to pooling.
    pub fn stack_channels(&self) -> usize {
        self.input_channels + self.conv_layers * self.growth
    }
}

/// Parameter (or parameter-gradient) tensors for one embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams<T: Real> {
    /// Per layer, flattened [growth][layer_input_channels][kernel_size].
    pub conv_weights: Vec<Vec<T>>,
    /// Per layer, [growth].
    pub conv_biases: Vec<Vec<T>>,
    /// Flattened [embedding_dim][stack_channels].
    pub fc_weight: Vec<T>,
    /// [embedding_dim].
    pub fc_bias: Vec<T>,
}

impl<T: Real> EmbedderParams<T> {
    pub fn zeros(cfg: &EmbedderConfig) -> Self {
        let conv_weights = (0..cfg.conv_layers)
            .map(|l| vec![T::zero(); cfg.growth * cfg.layer_input_channels(l) * cfg.kernel_size])
            .collect();
        let conv_biases = (0..cfg.conv_layers).map(|_| vec![T::zero(); cfg.growth]).collect();
        EmbedderParams {
            conv_weights,
            conv_biases,
            fc_weight: vec![T::zero(); cfg.embedding_dim * cfg.stack_channels()],
            fc_bias: vec![T::zero(); cfg.embedding_dim],
        }
    }

    pub fn validate(&self, cfg: &EmbedderConfig) -> Result<()> {
        if self.conv_weights.len() != cfg.conv_layers || self.conv_biases.len() != cfg.conv_layers {
            return Err(Error::validation("parameter layer count mismatch"));
        }
        for l in 0..cfg.conv_layers {
            let want = cfg.growth * cfg.layer_input_channels(l) * cfg.kernel_size;
            if self.conv_weights[l].len() != want || self.conv_biases[l].len() != cfg.growth {
                return Err(Error::validation(format!("conv layer {} shape mismatch", l + 1)));
            }
        }
        if self.fc_weight.len() != cfg.embedding_dim * cfg.stack_channels()
            || self.fc_bias.len() != cfg.embedding_dim
        {
            return Err(Error::validation("fully-connected shape mismatch"));
        }
        Ok(())
    }

    /// All parameter tensors as slices in a fixed order.
    pub fn flat(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for (w, b) in self.conv_weights.iter().zip(&self.conv_biases) {
            out.push(w);
            out.push(b);
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for (w, b) in self.conv_weights.iter_mut().zip(self.conv_biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.flat().iter().map(|s| s.len()).sum()
    }
}

/// Kernels and fully-connected weights draw from N(0, 2/fan_in); biases start
/// at zero. Draws happen in f64 in a fixed tensor order, so parameters agree
/// across scalar types up to rounding.
pub fn init_params<T: Real>(cfg: &EmbedderConfig, seed: u64) -> EmbedderParams<T> {
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = EmbedderParams::zeros(cfg);
    for l in 0..cfg.conv_layers {
        let fan_in = cfg.layer_input_channels(l) * cfg.kernel_size;
        let dist = rand_distr::Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
        for w in params.conv_weights[l].iter_mut() {
            *w = T::from_f64(dist.sample(&mut rng));
        }
    }
    let dist = rand_distr::Normal::new(0.0f64, (2.0 / cfg.stack_channels() as f64).sqrt()).unwrap();
    for w in params.fc_weight.iter_mut() {
        *w = T::from_f64(dist.sample(&mut rng));
    }
    params
}

/// A batch of input windows, row-major [batch][time][channel].
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub batch: usize,
    pub time: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(batch: usize, time: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * time * channels {
            return Err(Error::validation("batch data length disagrees with its dimensions"));
        }
        Ok(Batch { batch, time, channels, data })
    }
}

/// Pack standardized windows into a batch in the given order.
pub fn batch_from_windows<T: Real>(windows: &[&WindowTensor]) -> Result<Batch<T>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::validation("cannot build a batch from zero windows"))?;
    let channels = first.channels;
    let time = first.values.len() / channels;
    let mut data = Vec::with_capacity(windows.len() * time * channels);
    for w in windows {
        if w.channels != channels || w.values.len() != time * channels {
            return Err(Error::validation("windows in a batch disagree on shape"));
        }
        data.extend(w.values.iter().map(|&v| T::from_f64(v)));
    }
    Ok(Batch { batch: windows.len(), time, channels, data })
}

/// Intermediate activations retained for the reverse pass.
pub struct ForwardCache<T> {
    /// Per sample: channel-major [stack_channels][time], activated values.
    stacks: Vec<Vec<T>>,
    /// Per sample, per layer: pre-activation [growth][time].
    pres: Vec<Vec<Vec<T>>>,
    /// Per sample: pooled means [stack_channels].
    gaps: Vec<Vec<T>>,
    time: usize,
}

fn check_shapes<T: Real>(
    cfg: &EmbedderConfig,
    params: &EmbedderParams<T>,
    batch: &Batch<T>,
) -> Result<()> {
    cfg.validate()?;
    params.validate(cfg)?;
    if batch.channels != cfg.input_channels {
        return Err(Error::validation(format!(
            "batch has {} channels but the embedder expects {}",
            batch.channels, cfg.input_channels
        )));
    }
    if batch.time == 0 || batch.batch == 0 {
        return Err(Error::validation("batch must be non-empty with at least one time step"));
    }
    if batch.data.len() != batch.batch * batch.time * batch.channels {
        return Err(Error::validation("batch data length disagrees with its dimensions"));
    }
    Ok(())
}

/// Same-length dilated convolution of the first `in_ch` stack rows into
/// `pre`, channel-major, zero padding split evenly.
fn conv_layer<T: Real>(
    stack: &[T],
    in_ch: usize,
    t_len: usize,
    weight: &[T],
    bias: &[T],
    kernel: usize,
    dilation: usize,
    pre: &mut [T],
) {
    let g = bias.len();
    let pad_left = dilation * (kernel - 1) / 2;
    for o in 0..g {
        let out_row = &mut pre[o * t_len..(o + 1) * t_len];
        for v in out_row.iter_mut() {
            *v = bias[o];
        }
        for ic in 0..in_ch {
            let in_row = &stack[ic * t_len..(ic + 1) * t_len];
            let w_base = (o * in_ch + ic) * kernel;
            for kk in 0..kernel {
                let w = weight[w_base + kk];
                let shift = (dilation * kk) as isize - pad_left as isize;
                let t_lo = (-shift).max(0) as usize;
                let t_hi = ((t_len as isize - shift).min(t_len as isize)).max(0) as usize;
                if t_lo >= t_hi {
                    continue;
                }
                let src = &in_row[(t_lo as isize + shift) as usize..(t_hi as isize + shift) as usize];
                let dst = &mut out_row[t_lo..t_hi];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + w * *s;
                }
            }
        }
    }
}

/// Forward pass retaining every intermediate needed by `backward_cached`.
pub fn forward_cached<T: Real>(
    cfg: &EmbedderConfig,
    params: &EmbedderParams<T>,
    batch: &Batch<T>,
) -> Result<(Vec<T>, ForwardCache<T>)> {
    check_shapes(cfg, params, batch)?;
    let t_len = batch.time;
    let stack_ch = cfg.stack_channels();
    let mut embeddings = vec![T::zero(); batch.batch * cfg.embedding_dim];
    let mut cache = ForwardCache {
        stacks: Vec::with_capacity(batch.batch),
        pres: Vec::with_capacity(batch.batch),
        gaps: Vec::with_capacity(batch.batch),
        time: t_len,
    };
    let inv_t = T::from_f64(1.0 / t_len as f64);
    for b in 0..batch.batch {
        let sample = &batch.data[b * t_len * batch.channels..(b + 1) * t_len * batch.channels];
        let mut stack = vec![T::zero(); stack_ch * t_len];
        for t in 0..t_len {
            for c in 0..batch.channels {
                stack[c * t_len + t] = sample[t * batch.channels + c];
            }
        }
        let mut pres = Vec::with_capacity(cfg.conv_layers);
        for l in 0..cfg.conv_layers {
            let in_ch = cfg.layer_input_channels(l);
            let mut pre = vec![T::zero(); cfg.growth * t_len];
            conv_layer(
                &stack,
                in_ch,
                t_len,
                &params.conv_weights[l],
                &params.conv_biases[l],
                cfg.kernel_size,
                cfg.dilations[l],
                &mut pre,
            );
            let out_base = in_ch * t_len;
            for (i, &p) in pre.iter().enumerate() {
                stack[out_base + i] = cfg.activation.apply(p);
            }
            pres.push(pre);
        }
        let mut gap = vec![T::zero(); stack_ch];
        for (c, g) in gap.iter_mut().enumerate() {
            let row = &stack[c * t_len..(c + 1) * t_len];
            let mut acc = T::zero();
            for &v in row {
                acc += v;
            }
            *g = acc * inv_t;
        }
        let emb = &mut embeddings[b * cfg.embedding_dim..(b + 1) * cfg.embedding_dim];
        for (e, out) in emb.iter_mut().enumerate() {
            let w_row = &params.fc_weight[e * stack_ch..(e + 1) * stack_ch];
            let mut acc = params.fc_bias[e];
            for (w, g) in w_row.iter().zip(&gap) {
                acc += *w * *g;
            }
            *out = acc;
        }
        cache.stacks.push(stack);
        cache.pres.push(pres);
        cache.gaps.push(gap);
    }
    Ok((embeddings, cache))
}

/// Embeddings for a batch, row-major [batch][embedding_dim]. Raw outputs;
/// length normalization is the scorer's business.
pub fn forward<T: Real>(
    cfg: &EmbedderConfig,
    params: &EmbedderParams<T>,
    batch: &Batch<T>,
) -> Result<Vec<T>> {
    forward_cached(cfg, params, batch).map(|(emb, _)| emb)
}

/// Reverse pass from a retained forward cache. `upstream` is d(loss)/d(embedding),
/// row-major [batch][embedding_dim]; returns parameter-shaped gradients
/// accumulated over the batch in sample order.
pub fn backward_cached<T: Real>(
    cfg: &EmbedderConfig,
    params: &EmbedderParams<T>,
    cache: &ForwardCache<T>,
    upstream: &[T],
) -> Result<EmbedderParams<T>> {
    let n_samples = cache.stacks.len();
    if upstream.len() != n_samples * cfg.embedding_dim {
        return Err(Error::validation("upstream gradient shape disagrees with the batch"));
    }
    let t_len = cache.time;
    let stack_ch = cfg.stack_channels();
    let inv_t = T::from_f64(1.0 / t_len as f64);
    let mut grads = EmbedderParams::zeros(cfg);
    for b in 0..n_samples {
        let stack = &cache.stacks[b];
        let gap = &cache.gaps[b];
        let u = &upstream[b * cfg.embedding_dim..(b + 1) * cfg.embedding_dim];
        // Fully-connected layer.
        let mut d_gap = vec![T::zero(); stack_ch];
        for e in 0..cfg.embedding_dim {
            let ue = u[e];
            grads.fc_bias[e] += ue;
            let w_row = &params.fc_weight[e * stack_ch..(e + 1) * stack_ch];
            let gw_row = &mut grads.fc_weight[e * stack_ch..(e + 1) * stack_ch];
            for c in 0..stack_ch {
                gw_row[c] += ue * gap[c];
                d_gap[c] += ue * w_row[c];
            }
        }
        // Pooling spreads each channel's gradient uniformly over time.
        let mut d_stack = vec![T::zero(); stack_ch * t_len];
        for c in 0..stack_ch {
            let dv = d_gap[c] * inv_t;
            for t in 0..t_len {
                d_stack[c * t_len + t] = dv;
            }
        }
        // Conv layers in reverse; a layer's output rows are upstream-complete
        // once every later layer has pushed its input gradient.
        for l in (0..cfg.conv_layers).rev() {
            let in_ch = cfg.layer_input_channels(l);
            let out_base = in_ch * t_len;
            let pre = &cache.pres[b][l];
            let mut d_pre = vec![T::zero(); cfg.growth * t_len];
            for i in 0..cfg.growth * t_len {
                let act_grad = cfg.activation.grad(pre[i], stack[out_base + i]);
                d_pre[i] = d_stack[out_base + i] * act_grad;
            }
            let kernel = cfg.kernel_size;
            let dilation = cfg.dilations[l];
            let pad_left = dilation * (kernel - 1) / 2;
            let g_w = &mut grads.conv_weights[l];
            let g_b = &mut grads.conv_biases[l];
            for o in 0..cfg.growth {
                let dp_row = &d_pre[o * t_len..(o + 1) * t_len];
                let mut acc = T::zero();
                for &v in dp_row {
                    acc += v;
                }
                g_b[o] += acc;
                for ic in 0..in_ch {
                    let in_row = &stack[ic * t_len..(ic + 1) * t_len];
                    let w_base = (o * in_ch + ic) * kernel;
                    for kk in 0..kernel {
                        let shift = (dilation * kk) as isize - pad_left as isize;
                        let t_lo = (-shift).max(0) as usize;
                        let t_hi = ((t_len as isize - shift).min(t_len as isize)).max(0) as usize;
                        if t_lo >= t_hi {
                            continue;
                        }
                        let src = &in_row[(t_lo as isize + shift) as usize
                            ..(t_hi as isize + shift) as usize];
                        // Four-lane partial sums keep the reduction vector-friendly
                        // with a fixed, deterministic order.
                        let dp = &dp_row[t_lo..t_hi];
                        let mut lanes = [T::zero(); 4];
                        let chunks = dp.len() / 4;
                        for i in 0..chunks {
                            for lane in 0..4 {
                                let idx = i * 4 + lane;
                                lanes[lane] += dp[idx] * src[idx];
                            }
                        }
                        let mut w_acc = lanes[0] + lanes[1] + lanes[2] + lanes[3];
                        for idx in chunks * 4..dp.len() {
                            w_acc += dp[idx] * src[idx];
                        }
                        g_w[w_base + kk] += w_acc;
                        let w = params.conv_weights[l][w_base + kk];
                        let d_in = &mut d_stack[ic * t_len..(ic + 1) * t_len];
                        let dst = &mut d_in[(t_lo as isize + shift) as usize
                            ..(t_hi as isize + shift) as usize];
                        for (d, &s) in dst.iter_mut().zip(dp) {
                            *d = *d + w * s;
                        }
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Contract entry point: recomputes the forward pass, then runs the reverse
/// pass against it.
pub fn backward<T: Real>(
    cfg: &EmbedderConfig,
    params: &EmbedderParams<T>,
    batch: &Batch<T>,
    upstream: &[T],
) -> Result<EmbedderParams<T>> {
    let (_, cache) = forward_cached(cfg, params, batch)?;
    backward_cached(cfg, params, &cache, upstream)
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"EKYB1";

/// A trained embedder with everything evaluation needs to reproduce its
/// input pipeline: architecture, axis mode, filter flag, and the training
/// normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EmbedderConfig,
    pub axis: Axis,
    pub filter_on: bool,
    pub params: EmbedderParams<f32>,
    pub norm: NormStats,
}

fn axis_code(axis: Axis) -> u32 {
    match axis {
        Axis::Optical => 0,
        Axis::Visual => 1,
        Axis::Both => 2,
    }
}

fn axis_from_code(code: u32) -> Result<Axis> {
    match code {
        0 => Ok(Axis::Optical),
        1 => Ok(Axis::Visual),
        2 => Ok(Axis::Both),
        other => Err(Error::validation(format!("unknown axis code {other}"))),
    }
}

fn write_u32<W: IoWrite>(w: &mut W, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn write_tensor<W: IoWrite>(w: &mut W, name: &str, dims: &[usize], data: &[f32], path: &Path) -> Result<()> {
    write_u32(w, name.len() as u32, path)?;
    w.write_all(name.as_bytes()).map_err(|e| Error::io(path, e))?;
    write_u32(w, dims.len() as u32, path)?;
    for &d in dims {
        write_u32(w, d as u32, path)?;
    }
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    for &v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Little-endian binary checkpoint: magic, config words, dilations, then
/// named tensor records (conv/fc parameters plus norm.mean and norm.std).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let cfg = &ckpt.config;
    cfg.validate()?;
    ckpt.params.validate(cfg)?;
    if ckpt.norm.channels() != cfg.input_channels {
        return Err(Error::validation("normalization statistics disagree with input channels"));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
    for v in [
        cfg.input_channels as u32,
        cfg.conv_layers as u32,
        cfg.growth as u32,
        cfg.kernel_size as u32,
        cfg.embedding_dim as u32,
        cfg.activation.code(),
        axis_code(ckpt.axis),
        u32::from(ckpt.filter_on),
    ] {
        write_u32(&mut w, v, path)?;
    }
    for &d in &cfg.dilations {
        write_u32(&mut w, d as u32, path)?;
    }
    let n_tensors = 2 * cfg.conv_layers + 4;
    write_u32(&mut w, n_tensors as u32, path)?;
    for l in 0..cfg.conv_layers {
        let in_ch = cfg.layer_input_channels(l);
        write_tensor(
            &mut w,
            &format!("conv{}.weight", l + 1),
            &[cfg.growth, in_ch, cfg.kernel_size],
            &ckpt.params.conv_weights[l],
            path,
        )?;
        write_tensor(&mut w, &format!("conv{}.bias", l + 1), &[cfg.growth], &ckpt.params.conv_biases[l], path)?;
    }
    write_tensor(
        &mut w,
        "fc.weight",
        &[cfg.embedding_dim, cfg.stack_channels()],
        &ckpt.params.fc_weight,
        path,
    )?;
    write_tensor(&mut w, "fc.bias", &[cfg.embedding_dim], &ckpt.params.fc_bias, path)?;
    let mean: Vec<f32> = ckpt.norm.mean.iter().map(|&v| v as f32).collect();
    let std: Vec<f32> = ckpt.norm.std.iter().map(|&v| v as f32).collect();
    write_tensor(&mut w, "norm.mean", &[mean.len()], &mean, path)?;
    write_tensor(&mut w, "norm.std", &[std.len()], &std, path)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct CheckpointReader<'a> {
    r: BufReader<std::fs::File>,
    path: &'a Path,
}

impl<'a> CheckpointReader<'a> {
    fn bad(&self, message: impl Into<String>) -> Error {
        Error::malformed(self.path.display().to_string(), 0, message)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| self.bad("truncated checkpoint"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u32()? as usize;
        if name_len > 256 {
            return Err(self.bad("tensor name too long"));
        }
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| self.bad("tensor name is not UTF-8"))?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.bad(format!("tensor {name} has too many dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(self.bad(format!("tensor {name} is implausibly large")));
        }
        let raw = self.bytes(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, dims, data))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = CheckpointReader { r: BufReader::new(file), path };
    let magic = r.bytes(CHECKPOINT_MAGIC.len())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.bad("bad checkpoint magic"));
    }
    let input_channels = r.u32()? as usize;
    let conv_layers = r.u32()? as usize;
    if conv_layers != CONV_LAYERS {
        return Err(r.bad(format!("checkpoint declares {conv_layers} conv layers")));
    }
    let growth = r.u32()? as usize;
    let kernel_size = r.u32()? as usize;
    let embedding_dim = r.u32()? as usize;
    let activation = Activation::from_code(r.u32()?).map_err(|e| r.bad(e.to_string()))?;
    let axis = axis_from_code(r.u32()?).map_err(|e| r.bad(e.to_string()))?;
    let filter_word = r.u32()?;
    if filter_word > 1 {
        return Err(r.bad("filter flag must be 0 or 1"));
    }
    let mut dilations = Vec::with_capacity(conv_layers);
    for _ in 0..conv_layers {
        dilations.push(r.u32()? as usize);
    }
    let cfg = EmbedderConfig {
        input_channels,
        conv_layers,
        growth,
        kernel_size,
        dilations,
        embedding_dim,
        activation,
    };
    cfg.validate().map_err(|e| r.bad(e.to_string()))?;
    let n_tensors = r.u32()? as usize;
    if n_tensors != 2 * conv_layers + 4 {
        return Err(r.bad(format!("expected {} tensors, found {n_tensors}", 2 * conv_layers + 4)));
    }
    let mut params = EmbedderParams::<f32>::zeros(&cfg);
    let mut norm_mean: Option<Vec<f32>> = None;
    let mut norm_std: Option<Vec<f32>> = None;
    for _ in 0..n_tensors {
        let (name, dims, data) = r.tensor()?;
        let expect = |want_dims: &[usize]| -> Result<()> {
            if dims != want_dims {
                Err(r.bad(format!("tensor {name} has unexpected shape {dims:?}")))
            } else {
                Ok(())
            }
        };
        if let Some(layer) = name.strip_prefix("conv").and_then(|s| s.strip_suffix(".weight")) {
            let l: usize = layer.parse().map_err(|_| r.bad(format!("bad tensor name {name}")))?;
            if l == 0 || l > conv_layers {
                return Err(r.bad(format!("bad tensor name {name}")));
            }
            expect(&[cfg.growth, cfg.layer_input_channels(l - 1), cfg.kernel_size])?;
            params.conv_weights[l - 1] = data;
        } else if let Some(layer) = name.strip_prefix("conv").and_then(|s| s.strip_suffix(".bias")) {
            let l: usize = layer.parse().map_err(|_| r.bad(format!("bad tensor name {name}")))?;
            if l == 0 || l > conv_layers {
                return Err(r.bad(format!("bad tensor name {name}")));
            }
            expect(&[cfg.growth])?;
            params.conv_biases[l - 1] = data;
        } else if name == "fc.weight" {
            expect(&[cfg.embedding_dim, cfg.stack_channels()])?;
            params.fc_weight = data;
        } else if name == "fc.bias" {
            expect(&[cfg.embedding_dim])?;
            params.fc_bias = data;
        } else if name == "norm.mean" {
            expect(&[cfg.input_channels])?;
            norm_mean = Some(data);
        } else if name == "norm.std" {
            expect(&[cfg.input_channels])?;
            norm_std = Some(data);
        } else {
            return Err(r.bad(format!("unknown tensor {name}")));
        }
    }
    let mean = norm_mean.ok_or_else(|| r.bad("checkpoint is missing norm.mean"))?;
    let std = norm_std.ok_or_else(|| r.bad("checkpoint is missing norm.std"))?;
    let norm = NormStats {
        mean: mean.iter().map(|&v| v as f64).collect(),
        std: std.iter().map(|&v| v as f64).collect(),
    };
    Ok(Checkpoint { config: cfg, axis, filter_on: filter_word == 1, params, norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> EmbedderConfig {
        EmbedderConfig {
            input_channels: 2,
            growth: 2,
            ..EmbedderConfig::with_channels(2)
        }
    }

    fn random_batch(cfg: &EmbedderConfig, batch: usize, time: usize, seed: u64) -> Batch<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * time * cfg.input_channels)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        Batch::new(batch, time, cfg.input_channels, data).unwrap()
    }

    #[test]
    fn config_validation_rejects_fixed_field_changes() {
        let mut cfg = EmbedderConfig::with_channels(4);
        assert!(cfg.validate().is_ok());
        cfg.conv_layers = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = EmbedderConfig::with_channels(4);
        cfg.embedding_dim = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = EmbedderConfig::with_channels(4);
        cfg.growth = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = EmbedderConfig::with_channels(4);
        cfg.dilations.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_dense_shapes_and_zero_biases() {
        let cfg = EmbedderConfig::with_channels(8);
        let a: EmbedderParams<f32> = init_params(&cfg, 99);
        let b: EmbedderParams<f32> = init_params(&cfg, 99);
        assert_eq!(a, b);
        let c: EmbedderParams<f32> = init_params(&cfg, 100);
        assert_ne!(a, c);

        // Layer 3 reads C + 2*growth input channels.
        assert_eq!(a.conv_weights[2].len(), cfg.growth * (8 + 2 * cfg.growth) * cfg.kernel_size);
        assert!(a.conv_biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(a.fc_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shape_and_zeroed_head() {
        let mut cfg = EmbedderConfig::with_channels(8);
        cfg.growth = 4;
        let params: EmbedderParams<f64> = init_params(&cfg, 5);
        let batch = random_batch(&cfg, 5, 40, 1);
        let emb = forward(&cfg, &params, &batch).unwrap();
        assert_eq!(emb.len(), 5 * EMBEDDING_DIM);

        let mut headless = params.clone();
        headless.fc_weight.iter_mut().for_each(|w| *w = 0.0);
        headless.fc_bias.iter_mut().for_each(|b| *b = 0.0);
        let emb = forward(&cfg, &headless, &batch).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rows_are_batch_independent() {
        let cfg = tiny_cfg();
        let params: EmbedderParams<f64> = init_params(&cfg, 3);
        let batch = random_batch(&cfg, 4, 16, 2);
        let all = forward(&cfg, &params, &batch).unwrap();
        for b in 0..4 {
            let row = batch.data[b * 16 * 2..(b + 1) * 16 * 2].to_vec();
            let single = Batch::new(1, 16, 2, row).unwrap();
            let one = forward(&cfg, &params, &single).unwrap();
            assert_eq!(one, all[b * EMBEDDING_DIM..(b + 1) * EMBEDDING_DIM].to_vec());
        }
    }

    #[test]
    fn forward_rejects_mismatched_channels() {
        let cfg = tiny_cfg();
        let params: EmbedderParams<f64> = init_params(&cfg, 3);
        let bad = Batch::new(1, 16, 3, vec![0.0; 48]).unwrap();
        assert!(forward(&cfg, &params, &bad).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients_and_duplication_doubles() {
        let cfg = tiny_cfg();
        let params: EmbedderParams<f64> = init_params(&cfg, 4);
        let batch = random_batch(&cfg, 2, 16, 7);
        let zeros = vec![0.0; 2 * EMBEDDING_DIM];
        let grads = backward(&cfg, &params, &batch, &zeros).unwrap();
        assert!(grads.flat().iter().all(|s| s.iter().all(|&v| v == 0.0)));

        let single_data = batch.data[..16 * 2].to_vec();
        let single = Batch::new(1, 16, 2, single_data.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let upstream: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g1 = backward(&cfg, &params, &single, &upstream).unwrap();
        let doubled = Batch::new(2, 16, 2, [single_data.clone(), single_data].concat()).unwrap();
        let u2 = [upstream.clone(), upstream].concat();
        let g2 = backward(&cfg, &params, &doubled, &u2).unwrap();
        for (a, b) in g1.flat().iter().zip(g2.flat().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        for activation in [Activation::Tanh, Activation::Silu] {
            let mut cfg = tiny_cfg();
            cfg.activation = activation;
            let mut params: EmbedderParams<f64> = init_params(&cfg, 11);
            let batch = random_batch(&cfg, 2, 16, 12);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
            let upstream: Vec<f64> =
                (0..2 * EMBEDDING_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = backward(&cfg, &params, &batch, &upstream).unwrap();
            let objective = |cfg: &EmbedderConfig, p: &EmbedderParams<f64>, b: &Batch<f64>| {
                let emb = forward(cfg, p, b).unwrap();
                emb.iter().zip(&upstream).map(|(e, u)| e * u).sum::<f64>()
            };
            let h = 1e-6;
            let n = params.n_params();
            let mut checked = 0;
            for idx in (0..n).step_by(17) {
                let probe = |delta: f64, params: &mut EmbedderParams<f64>| {
                    let mut remaining = idx;
                    for slice in params.flat_mut() {
                        if remaining < slice.len() {
                            slice[remaining] += delta;
                            return;
                        }
                        remaining -= slice.len();
                    }
                    unreachable!();
                };
                probe(h, &mut params);
                let up = objective(&cfg, &params, &batch);
                probe(-2.0 * h, &mut params);
                let down = objective(&cfg, &params, &batch);
                probe(h, &mut params);
                let fd = (up - down) / (2.0 * h);
                let an = {
                    let mut remaining = idx;
                    let mut found = 0.0;
                    for slice in analytic.flat() {
                        if remaining < slice.len() {
                            found = slice[remaining];
                            break;
                        }
                        remaining -= slice.len();
                    }
                    found
                };
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{activation:?} param {idx}: fd={fd} analytic={an}"
                );
                checked += 1;
            }
            assert!(checked > 100);
        }
    }

    #[test]
    fn every_layer_feeds_the_final_stack() {
        // Perturbing any layer's bias must reach an embedding that reads only
        // the last layer's rows, so each layer feeds every later layer.
        let cfg = tiny_cfg();
        let params: EmbedderParams<f64> = init_params(&cfg, 21);
        let batch = random_batch(&cfg, 1, 16, 22);
        let stack_ch = cfg.stack_channels();
        let last_rows = cfg.layer_input_channels(cfg.conv_layers - 1)..stack_ch;
        let mut head_only = params.clone();
        for e in 0..cfg.embedding_dim {
            for c in 0..stack_ch {
                if !last_rows.contains(&c) {
                    head_only.fc_weight[e * stack_ch + c] = 0.0;
                }
            }
        }
        let base = forward(&cfg, &head_only, &batch).unwrap();
        for l in 0..cfg.conv_layers - 1 {
            let mut poked = head_only.clone();
            poked.conv_biases[l][0] += 0.5;
            let out = forward(&cfg, &poked, &batch).unwrap();
            let diff: f64 = base.iter().zip(&out).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 1e-9, "layer {} does not reach the final stack", l + 1);
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = EmbedderConfig::with_channels(4);
        cfg.growth = 3;
        let params: EmbedderParams<f32> = init_params(&cfg, 31);
        let ckpt = Checkpoint {
            config: cfg,
            axis: Axis::Visual,
            filter_on: true,
            params,
            norm: NormStats {
                mean: vec![0.125, -3.5, 0.0, 2.25],
                std: vec![1.5, 2.0, 1.0, 0.75],
            },
        };
        let path_a = dir.path().join("model_a.ekyb");
        let path_b = dir.path().join("model_b.ekyb");
        save_checkpoint(&path_a, &ckpt).unwrap();
        let loaded = load_checkpoint(&path_a).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&path_b, &loaded).unwrap();
        let bytes_a = std::fs::read(&path_a).unwrap();
        let bytes_b = std::fs::read(&path_b).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let truncated = dir.path().join("model_c.ekyb");
        std::fs::write(&truncated, &bytes_a[..20]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());
        let corrupt = dir.path().join("model_d.ekyb");
        let mut bad = bytes_a.clone();
        bad[0] = b'X';
        std::fs::write(&corrupt, &bad).unwrap();
        match load_checkpoint(&corrupt) {
            Err(Error::Malformed { .. }) => {}
            other => panic!("expected a malformed-file error, got {other:?}"),
        }
    }
}
