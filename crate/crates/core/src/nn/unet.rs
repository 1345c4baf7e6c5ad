//! Valid-padding U-Net.
//!
//! Level `l` has `base_width·2^l` channels. Each encoder level applies two
//! 3×3 valid convolutions (each followed by batch renormalization and ReLU)
//! and, except at the bottom level, 2×2 max-pooling. Each decoder level
//! upsamples by nearest neighbour, applies a 3×3 valid convolution, concatenates
//! the center-cropped encoder output of the same level, and applies two more
//! valid convolutions. A final 3×3 same-padded convolution maps to one
//! channel without normalization.
//!
//! `depth` counts levels, so a depth-1 network has no pooling at all.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

use super::batch_renorm::{
    batch_renorm_backward, batch_renorm_forward, BrnCache, BrnParams, NormMode, RunningUpdate,
};
use super::conv::{conv2d_backward, conv2d_forward, Padding};
use super::ops::{
    center_crop, center_crop_backward, concat_channels, max_pool_backward, max_pool_forward,
    relu, relu_backward, split_channels, upsample_backward, upsample_forward,
};
use super::{ModelParams, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_width: usize,
    pub in_channels: usize,
}

impl UNetConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(invalid!(
                "U-Net depth, width and input channels must be positive: {self:?}"
            ));
        }
        Ok(())
    }
}

/// Output side for a given input side, or `None` when the input is too
/// small or a pooling stage would see an odd size.
pub fn output_size(depth: usize, input: usize) -> Option<usize> {
    let mut s = input as isize;
    for _ in 0..depth.saturating_sub(1) {
        s -= 4;
        if s <= 0 || s % 2 != 0 {
            return None;
        }
        s /= 2;
    }
    s -= 4;
    if s <= 0 {
        return None;
    }
    for _ in 0..depth.saturating_sub(1) {
        s = 2 * s - 6;
        if s <= 0 {
            return None;
        }
    }
    Some(s as usize)
}

/// Pixels lost per side. Independent of the input size.
pub fn output_margin(depth: usize) -> usize {
    // 14·2^(depth-1) - 10 pixels are lost in total.
    ((14usize << depth.saturating_sub(1)) - 10) / 2
}

/// Smallest input side accepted at this depth.
pub fn min_input_size(depth: usize) -> usize {
    (1..).find(|&s| output_size(depth, s).is_some()).unwrap_or(0)
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    brn: Option<BrnCache<T>>,
    output: Tensor<T>,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct UNetCache<T> {
    enc: Vec<[BlockCache<T>; 2]>,
    pool: Vec<(Vec<usize>, Vec<usize>)>,
    up: Vec<(Vec<usize>, BlockCache<T>)>,
    skip_shapes: Vec<Vec<usize>>,
    dec: Vec<[BlockCache<T>; 2]>,
    out_input: Tensor<T>,
    pub running_updates: Vec<(String, RunningUpdate<T>)>,
}

fn brn_params<'a, T: Real>(params: &'a ModelParams<T>, prefix: &str) -> Result<BrnParams<'a, T>> {
    Ok(BrnParams {
        gamma: params.get(&format!("{prefix}.gamma"))?,
        beta: params.get(&format!("{prefix}.beta"))?,
        running_mean: params.get(&format!("{prefix}.running_mean"))?,
        running_std: params.get(&format!("{prefix}.running_std"))?,
    })
}

/// Valid conv → batch renorm → ReLU.
fn block_forward<T: Real>(
    params: &ModelParams<T>,
    conv: &str,
    bn: &str,
    x: Tensor<T>,
    mode: NormMode,
    updates: &mut Vec<(String, RunningUpdate<T>)>,
) -> Result<BlockCache<T>> {
    let y = conv2d_forward(
        &x,
        params.get(&format!("{conv}.kernel"))?,
        params.get(&format!("{conv}.bias"))?,
        Padding::Valid,
    )?;
    let (z, state) = batch_renorm_forward(&y, &brn_params(params, bn)?, mode)?;
    let brn = state.map(|(cache, update)| {
        updates.push((bn.to_string(), update));
        cache
    });
    Ok(BlockCache {
        input: x,
        brn,
        output: relu(&z),
    })
}

fn block_backward<T: Real>(
    params: &ModelParams<T>,
    conv: &str,
    bn: &str,
    cache: &BlockCache<T>,
    dout: &Tensor<T>,
    grads: &mut ModelParams<T>,
) -> Result<Tensor<T>> {
    let brn = cache.brn.as_ref().ok_or_else(|| {
        Error::InvalidState("backward needs a training-mode forward pass".into())
    })?;
    let dz = relu_backward(&cache.output, dout);
    let gamma = params.get(&format!("{bn}.gamma"))?;
    let b = batch_renorm_backward(brn, gamma, &dz)?;
    grads.accumulate(&format!("{bn}.gamma"), b.dgamma);
    grads.accumulate(&format!("{bn}.beta"), b.dbeta);
    let c = conv2d_backward(
        &cache.input,
        params.get(&format!("{conv}.kernel"))?,
        Padding::Valid,
        &b.dx,
    )?;
    grads.accumulate(&format!("{conv}.kernel"), c.dkernel);
    grads.accumulate(&format!("{conv}.bias"), c.dbias);
    Ok(c.dx)
}

fn names(prefix: &str, stage: &str, idx: Option<usize>) -> (String, String) {
    match idx {
        Some(a) => (
            format!("{prefix}.{stage}.conv{a}"),
            format!("{prefix}.{stage}.bn{a}"),
        ),
        None => (format!("{prefix}.{stage}.conv"), format!("{prefix}.{stage}.bn")),
    }
}

/// Runs the U-Net on `x` `(B, H, W, C0)`; output `(B, H−2m, W−2m, 1)`.
pub fn unet_forward<T: Real>(
    cfg: &UNetConfig,
    prefix: &str,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, UNetCache<T>)> {
    cfg.validate()?;
    let [b, h, w, c] = x.dims4()?;
    if c != cfg.in_channels {
        return Err(invalid!(
            "U-Net expects {} input channels, got {c}",
            cfg.in_channels
        ));
    }
    if h != w || output_size(cfg.depth, h).is_none() {
        return Err(invalid!(
            "U-Net of depth {} cannot process a {h}x{w} input; inputs must be square, at least {} \
             pixels, and give even sizes at every pooling stage",
            cfg.depth,
            min_input_size(cfg.depth)
        ));
    }
    let mut updates = Vec::new();
    let mut cur = x.clone().reshape(vec![b, h, w, c])?;
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut pool = Vec::new();
    for level in 0..cfg.depth {
        let stage = format!("enc{level}");
        let (c0, b0) = names(prefix, &stage, Some(0));
        let first = block_forward(params, &c0, &b0, cur, mode, &mut updates)?;
        let (c1, b1) = names(prefix, &stage, Some(1));
        let second = block_forward(params, &c1, &b1, first.output.clone(), mode, &mut updates)?;
        cur = second.output.clone();
        enc.push([first, second]);
        if level + 1 < cfg.depth {
            let (pooled, argmax) = max_pool_forward(&cur)?;
            pool.push((cur.shape().to_vec(), argmax));
            cur = pooled;
        }
    }
    let mut up = Vec::new();
    let mut dec = Vec::new();
    let mut skip_shapes = Vec::new();
    for level in (0..cfg.depth.saturating_sub(1)).rev() {
        let upsampled = upsample_forward(&cur)?;
        let up_shape = upsampled.shape().to_vec();
        let (cu, bu) = names(prefix, &format!("up{level}"), None);
        let up_block = block_forward(params, &cu, &bu, upsampled, mode, &mut updates)?;
        let size = up_block.output.shape()[1];
        let skip = &enc[level][1].output;
        skip_shapes.push(skip.shape().to_vec());
        let merged = concat_channels(&center_crop(skip, size, size)?, &up_block.output)?;
        up.push((up_shape, up_block));
        let stage = format!("dec{level}");
        let (c0, b0) = names(prefix, &stage, Some(0));
        let first = block_forward(params, &c0, &b0, merged, mode, &mut updates)?;
        let (c1, b1) = names(prefix, &stage, Some(1));
        let second = block_forward(params, &c1, &b1, first.output.clone(), mode, &mut updates)?;
        cur = second.output.clone();
        dec.push([first, second]);
    }
    let out = conv2d_forward(
        &cur,
        params.get(&format!("{prefix}.out.kernel"))?,
        params.get(&format!("{prefix}.out.bias"))?,
        Padding::Same,
    )?;
    Ok((
        out,
        UNetCache {
            enc,
            pool,
            up,
            skip_shapes,
            dec,
            out_input: cur,
            running_updates: updates,
        },
    ))
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to the U-Net input.
pub fn unet_backward<T: Real>(
    cfg: &UNetConfig,
    prefix: &str,
    params: &ModelParams<T>,
    cache: &UNetCache<T>,
    dy: &Tensor<T>,
    grads: &mut ModelParams<T>,
) -> Result<Tensor<T>> {
    let kernel = params.get(&format!("{prefix}.out.kernel"))?;
    let out = conv2d_backward(&cache.out_input, kernel, Padding::Same, dy)?;
    grads.accumulate(&format!("{prefix}.out.kernel"), out.dkernel);
    grads.accumulate(&format!("{prefix}.out.bias"), out.dbias);
    let mut d = out.dx;

    // Gradients reaching each encoder level's output through its skip.
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; cfg.depth];
    for (i, level) in (0..cfg.depth.saturating_sub(1)).rev().enumerate() {
        let stage = format!("dec{level}");
        let (c1, b1) = names(prefix, &stage, Some(1));
        d = block_backward(params, &c1, &b1, &cache.dec[i][1], &d, grads)?;
        let (c0, b0) = names(prefix, &stage, Some(0));
        d = block_backward(params, &c0, &b0, &cache.dec[i][0], &d, grads)?;
        let (d_skip, d_up) = split_channels(&d, cfg.width(level))?;
        skip_grads[level] = Some(center_crop_backward(&cache.skip_shapes[i], &d_skip)?);
        let (up_shape, up_block) = &cache.up[i];
        let (cu, bu) = names(prefix, &format!("up{level}"), None);
        let d_upsampled = block_backward(params, &cu, &bu, up_block, &d_up, grads)?;
        debug_assert_eq!(d_upsampled.shape(), up_shape.as_slice());
        d = upsample_backward(&d_upsampled)?;
    }
    for level in (0..cfg.depth).rev() {
        if level + 1 < cfg.depth {
            let (shape, argmax) = &cache.pool[level];
            d = max_pool_backward(shape, argmax, &d);
            if let Some(s) = skip_grads[level].take() {
                d.add_assign(&s);
            }
        }
        let stage = format!("enc{level}");
        let (c1, b1) = names(prefix, &stage, Some(1));
        d = block_backward(params, &c1, &b1, &cache.enc[level][1], &d, grads)?;
        let (c0, b0) = names(prefix, &stage, Some(0));
        d = block_backward(params, &c0, &b0, &cache.enc[level][0], &d, grads)?;
    }
    Ok(d)
}

pub(crate) fn uniform_tensor<T: Real>(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect(),
    )
}

fn init_block<T: Real>(
    params: &mut ModelParams<T>,
    conv: &str,
    bn: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) {
    let bound = (6.0 / (9 * cin) as f64).sqrt();
    params.insert(format!("{conv}.kernel"), uniform_tensor(vec![3, 3, cin, cout], bound, rng));
    params.insert(format!("{conv}.bias"), Tensor::zeros(vec![cout]));
    params.insert(format!("{bn}.gamma"), Tensor::full(vec![cout], T::one()));
    params.insert(format!("{bn}.beta"), Tensor::zeros(vec![cout]));
    params.insert(format!("{bn}.running_mean"), Tensor::zeros(vec![cout]));
    params.insert(format!("{bn}.running_std"), Tensor::full(vec![cout], T::one()));
}

/// Inserts freshly initialized U-Net parameters under `prefix`. Kernels are
/// He-uniform, biases zero, normalization the identity.
pub fn init_unet_params<T: Real>(
    cfg: &UNetConfig,
    prefix: &str,
    params: &mut ModelParams<T>,
    rng: &mut impl Rng,
) {
    let mut cin = cfg.in_channels;
    for level in 0..cfg.depth {
        let stage = format!("enc{level}");
        let w = cfg.width(level);
        let (c0, b0) = names(prefix, &stage, Some(0));
        init_block(params, &c0, &b0, cin, w, rng);
        let (c1, b1) = names(prefix, &stage, Some(1));
        init_block(params, &c1, &b1, w, w, rng);
        cin = w;
    }
    for level in (0..cfg.depth.saturating_sub(1)).rev() {
        let w = cfg.width(level);
        let (cu, bu) = names(prefix, &format!("up{level}"), None);
        init_block(params, &cu, &bu, cfg.width(level + 1), w, rng);
        let stage = format!("dec{level}");
        let (c0, b0) = names(prefix, &stage, Some(0));
        init_block(params, &c0, &b0, 2 * w, w, rng);
        let (c1, b1) = names(prefix, &stage, Some(1));
        init_block(params, &c1, &b1, w, w, rng);
    }
    let w0 = cfg.width(0);
    let bound = (3.0 / (9 * w0) as f64).sqrt();
    params.insert(format!("{prefix}.out.kernel"), uniform_tensor(vec![3, 3, w0, 1], bound, rng));
    params.insert(format!("{prefix}.out.bias"), Tensor::zeros(vec![1]));
}
