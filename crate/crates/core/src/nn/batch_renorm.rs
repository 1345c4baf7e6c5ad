//! Batch renormalization over `(B, H, W, C)` tensors, statistics per channel.
//!
//! In training mode the batch-normalized activations are corrected toward
//! the running statistics by `r = clip(σ_B/σ, 1/r_max, r_max)` and
//! `d = clip((μ_B − μ)/σ, −d_max, d_max)`; both are treated as constants by
//! the backward pass. Inference uses the running statistics only.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::{Real, Tensor};

/// Variance floor added before the square root.
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenormClip {
    pub r_max: f64,
    pub d_max: f64,
}

impl RenormClip {
    /// `r_max = 1, d_max = 0`: plain batch normalization.
    pub const PLAIN: RenormClip = RenormClip {
        r_max: 1.0,
        d_max: 0.0,
    };

    /// Linear warm-up from plain batch norm to `(3, 5)` over `warmup_steps`.
    pub fn warmup(step: usize, warmup_steps: usize) -> Self {
        let t = if warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / warmup_steps as f64).min(1.0)
        };
        RenormClip {
            r_max: 1.0 + 2.0 * t,
            d_max: 5.0 * t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    Train { clip: RenormClip, momentum: f64 },
    Infer,
}

impl NormMode {
    pub fn is_train(&self) -> bool {
        matches!(self, NormMode::Train { .. })
    }
}

/// Per-channel parameters and running statistics.
#[derive(Debug, Clone, Copy)]
pub struct BrnParams<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_std: &'a Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BrnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    r: Vec<T>,
    d: Vec<T>,
    shape: Vec<usize>,
}

/// Running statistics after one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningUpdate<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Batch mean and `sqrt(var + ε)` per channel.
fn batch_stats<T: Real>(x: &Tensor<T>, c: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_f64((x.len() / c) as f64);
    let mut mean = vec![T::zero(); c];
    for px in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += *v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); c];
    for px in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            let d = *v - *m;
            *s += d * d;
        }
    }
    let eps = T::from_f64(BN_EPSILON);
    let std = var.iter().map(|s| (*s / count + eps).sqrt()).collect();
    (mean, std)
}

fn check<T: Real>(x: &Tensor<T>, p: &BrnParams<'_, T>) -> Result<usize> {
    let [b, _, _, c] = x.dims4()?;
    if b == 0 || x.is_empty() {
        return Err(invalid!("batch renormalization needs a non-empty batch"));
    }
    for (name, t) in [
        ("gamma", p.gamma),
        ("beta", p.beta),
        ("running mean", p.running_mean),
        ("running std", p.running_std),
    ] {
        if t.len() != c {
            return Err(invalid!("{name} has {} channels, input has {c}", t.len()));
        }
    }
    Ok(c)
}

/// Clipped correction factors `(r, d)` for this batch.
pub fn renorm_correction<T: Real>(
    x: &Tensor<T>,
    p: &BrnParams<'_, T>,
    clip: RenormClip,
) -> Result<(Vec<T>, Vec<T>)> {
    let c = check(x, p)?;
    let (mean, std) = batch_stats(x, c);
    let r_max = T::from_f64(clip.r_max);
    let d_max = T::from_f64(clip.d_max);
    let mut r = Vec::with_capacity(c);
    let mut d = Vec::with_capacity(c);
    for ch in 0..c {
        let rs = p.running_std.data()[ch];
        let rm = p.running_mean.data()[ch];
        r.push((std[ch] / rs).max(T::one() / r_max).min(r_max));
        d.push(((mean[ch] - rm) / rs).max(-d_max).min(d_max));
    }
    Ok((r, d))
}

/// Training-mode forward with explicitly supplied corrections.
pub fn batch_renorm_forward_with_correction<T: Real>(
    x: &Tensor<T>,
    p: &BrnParams<'_, T>,
    r: &[T],
    d: &[T],
) -> Result<(Tensor<T>, BrnCache<T>)> {
    let c = check(x, p)?;
    if r.len() != c || d.len() != c {
        return Err(invalid!("correction factors must have {c} channels"));
    }
    let (mean, std) = batch_stats(x, c);
    let inv_std: Vec<T> = std.iter().map(|s| T::one() / *s).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    let (g, b) = (p.gamma.data(), p.beta.data());
    for px in x.data().chunks(c) {
        for ch in 0..c {
            let xh = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * (xh * r[ch] + d[ch]) + b[ch]);
        }
    }
    let y = Tensor::from_vec(x.shape().to_vec(), out);
    y.check_finite("batch_renorm")?;
    Ok((
        y,
        BrnCache {
            xhat,
            inv_std,
            r: r.to_vec(),
            d: d.to_vec(),
            shape: x.shape().to_vec(),
        },
    ))
}

/// Forward pass. Training mode returns the cache for the backward pass and
/// the updated running statistics (not applied to `p`).
#[allow(clippy::type_complexity)]
pub fn batch_renorm_forward<T: Real>(
    x: &Tensor<T>,
    p: &BrnParams<'_, T>,
    mode: NormMode,
) -> Result<(Tensor<T>, Option<(BrnCache<T>, RunningUpdate<T>)>)> {
    match mode {
        NormMode::Infer => {
            let c = check(x, p)?;
            let (g, b) = (p.gamma.data(), p.beta.data());
            let (m, s) = (p.running_mean.data(), p.running_std.data());
            let mut out = Vec::with_capacity(x.len());
            for px in x.data().chunks(c) {
                for ch in 0..c {
                    out.push(g[ch] * ((px[ch] - m[ch]) / s[ch]) + b[ch]);
                }
            }
            let y = Tensor::from_vec(x.shape().to_vec(), out);
            y.check_finite("batch_renorm")?;
            Ok((y, None))
        }
        NormMode::Train { clip, momentum } => {
            let (r, d) = renorm_correction(x, p, clip)?;
            let (y, cache) = batch_renorm_forward_with_correction(x, p, &r, &d)?;
            let c = r.len();
            let (mean, std) = batch_stats(x, c);
            let mom = T::from_f64(momentum);
            let keep = T::one() - mom;
            let update = RunningUpdate {
                mean: (0..c)
                    .map(|ch| mom * p.running_mean.data()[ch] + keep * mean[ch])
                    .collect(),
                std: (0..c)
                    .map(|ch| mom * p.running_std.data()[ch] + keep * std[ch])
                    .collect(),
            };
            Ok((y, Some((cache, update))))
        }
    }
}

#[derive(Debug, Clone)]
pub struct BrnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn batch_renorm_backward<T: Real>(
    cache: &BrnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<BrnGrads<T>> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(invalid!(
            "upstream gradient {:?} does not match batch renorm input {:?}",
            dy.shape(),
            cache.shape
        ));
    }
    let c = cache.inv_std.len();
    let count = T::from_f64((dy.len() / c) as f64);
    let g = gamma.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut mean_dxh = vec![T::zero(); c];
    let mut mean_dxh_xh = vec![T::zero(); c];
    for (gp, xp) in dy.data().chunks(c).zip(cache.xhat.chunks(c)) {
        for ch in 0..c {
            dgamma[ch] += gp[ch] * (xp[ch] * cache.r[ch] + cache.d[ch]);
            dbeta[ch] += gp[ch];
            let dxh = gp[ch] * g[ch] * cache.r[ch];
            mean_dxh[ch] += dxh;
            mean_dxh_xh[ch] += dxh * xp[ch];
        }
    }
    for ch in 0..c {
        mean_dxh[ch] = mean_dxh[ch] / count;
        mean_dxh_xh[ch] = mean_dxh_xh[ch] / count;
    }
    let mut dx = Vec::with_capacity(dy.len());
    for (gp, xp) in dy.data().chunks(c).zip(cache.xhat.chunks(c)) {
        for ch in 0..c {
            let dxh = gp[ch] * g[ch] * cache.r[ch];
            dx.push(cache.inv_std[ch] * (dxh - mean_dxh[ch] - xp[ch] * mean_dxh_xh[ch]));
        }
    }
    Ok(BrnGrads {
        dx: Tensor::from_vec(cache.shape.clone(), dx),
        dgamma: Tensor::from_vec(vec![c], dgamma),
        dbeta: Tensor::from_vec(vec![c], dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_grad_close, finite_difference, random_tensor};

    struct Owned {
        gamma: Tensor<f64>,
        beta: Tensor<f64>,
        mean: Tensor<f64>,
        std: Tensor<f64>,
    }

    impl Owned {
        fn params(&self) -> BrnParams<'_, f64> {
            BrnParams {
                gamma: &self.gamma,
                beta: &self.beta,
                running_mean: &self.mean,
                running_std: &self.std,
            }
        }
    }

    fn identity(c: usize) -> Owned {
        Owned {
            gamma: Tensor::full(vec![c], 1.0),
            beta: Tensor::zeros(vec![c]),
            mean: Tensor::zeros(vec![c]),
            std: Tensor::full(vec![c], 1.0),
        }
    }

    #[test]
    fn plain_clip_is_batch_norm() {
        let x = random_tensor(&[3, 4, 4, 2], 1);
        let p = identity(2);
        let mode = NormMode::Train {
            clip: RenormClip::PLAIN,
            momentum: 0.99,
        };
        let (y, _) = batch_renorm_forward(&x, &p.params(), mode).unwrap();
        let (mean, std) = batch_stats(&x, 2);
        for (i, v) in y.data().iter().enumerate() {
            let ch = i % 2;
            let expected = (x.data()[i] - mean[ch]) / std[ch];
            assert!((v - expected).abs() <= 4.0 * f64::EPSILON * expected.abs().max(1.0));
        }
    }

    #[test]
    fn infer_with_unit_stats_is_identity() {
        let x = random_tensor(&[2, 3, 3, 4], 2);
        let p = identity(4);
        let (y, cache) = batch_renorm_forward(&x, &p.params(), NormMode::Infer).unwrap();
        assert!(cache.is_none());
        assert_eq!(y, x);
    }

    #[test]
    fn running_update_uses_momentum() {
        let x = random_tensor(&[2, 3, 3, 1], 3);
        let p = identity(1);
        let mode = NormMode::Train {
            clip: RenormClip::warmup(10, 10),
            momentum: 0.9,
        };
        let (_, state) = batch_renorm_forward(&x, &p.params(), mode).unwrap();
        let (_, update) = state.unwrap();
        let (mean, std) = batch_stats(&x, 1);
        assert!((update.mean[0] - 0.1 * mean[0]).abs() < 1e-15);
        assert!((update.std[0] - (0.9 + 0.1 * std[0])).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let x = Tensor::<f64>::zeros(vec![0, 2, 2, 1]);
        let p = identity(1);
        assert!(batch_renorm_forward(&x, &p.params(), NormMode::Infer).is_err());
    }

    #[test]
    fn warmup_schedule_endpoints() {
        assert_eq!(RenormClip::warmup(0, 30), RenormClip::PLAIN);
        assert_eq!(
            RenormClip::warmup(30, 30),
            RenormClip {
                r_max: 3.0,
                d_max: 5.0
            }
        );
        assert_eq!(RenormClip::warmup(90, 30).r_max, 3.0);
    }

    #[test]
    fn gradients_with_frozen_correction() {
        let x = random_tensor(&[2, 3, 4, 3], 4);
        let mut p = identity(3);
        p.gamma = random_tensor(&[3], 5).map(|v| v + 1.5);
        p.beta = random_tensor(&[3], 6);
        p.mean = random_tensor(&[3], 7).map(|v| 0.3 * v);
        p.std = random_tensor(&[3], 8).map(|v| 0.8 + 0.3 * v);
        let clip = RenormClip {
            r_max: 3.0,
            d_max: 5.0,
        };
        let (r, d) = renorm_correction(&x, &p.params(), clip).unwrap();
        // The correction must actually be active for this check to mean much.
        assert!(r.iter().any(|v| (v - 1.0).abs() > 0.05));
        assert!(d.iter().any(|v| v.abs() > 0.05));
        let (y, cache) = batch_renorm_forward_with_correction(&x, &p.params(), &r, &d).unwrap();
        let w = random_tensor(y.shape(), 9);
        let g = batch_renorm_backward(&cache, &p.gamma, &w).unwrap();
        let loss = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let params = BrnParams {
                gamma,
                beta,
                running_mean: &p.mean,
                running_std: &p.std,
            };
            let (y, _) = batch_renorm_forward_with_correction(x, &params, &r, &d).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        assert_grad_close(&g.dx, &finite_difference(&x, |t| loss(t, &p.gamma, &p.beta)), 1e-5);
        assert_grad_close(
            &g.dgamma,
            &finite_difference(&p.gamma, |t| loss(&x, t, &p.beta)),
            1e-5,
        );
        assert_grad_close(
            &g.dbeta,
            &finite_difference(&p.beta, |t| loss(&x, &p.gamma, t)),
            1e-5,
        );
    }
}
