//! Convolutional LSTM cell with 3×3 same-padded input and recurrent
//! transformations.
//!
//! The input and recurrent kernels are stored as one `(3, 3, Cin + Ch, 4·Ch)`
//! kernel applied to the channel concatenation `[x, h]`; output channels are
//! grouped `[i | f | g | o]`. With peepholes enabled, per-channel weights
//! `(3, Ch)` add `w_ci⊙c` and `w_cf⊙c` to the input and forget gates and
//! `w_co⊙c'` to the output gate.

use crate::error::{invalid, Result};

use super::conv::{conv2d_backward, conv2d_forward, Padding};
use super::ops::{concat_channels, sigmoid, split_channels};
use super::{Real, Tensor};

/// Hidden and cell tensors, both `(B, H, W, Ch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> ConvLstmState<T> {
    pub fn zeros(batch: usize, height: usize, width: usize, hidden: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(vec![batch, height, width, hidden]),
            c: Tensor::zeros(vec![batch, height, width, hidden]),
        }
    }
}

/// Borrowed cell weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights<'a, T> {
    pub kernel: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
    pub peephole: Option<&'a Tensor<T>>,
}

impl<T: Real> LstmWeights<'_, T> {
    fn hidden(&self) -> usize {
        self.bias.len() / 4
    }
}

/// Activations kept for the backward pass of one step.
#[derive(Debug, Clone)]
pub struct LstmStepCache<T> {
    xh: Tensor<T>,
    /// Post-activation gates, `[i | f | g | o]` per pixel.
    gates: Vec<T>,
    c_prev: Vec<T>,
    c_new: Vec<T>,
    tanh_c: Vec<T>,
    in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct LstmStepGrads<T> {
    pub dx: Tensor<T>,
    pub dh_prev: Tensor<T>,
    pub dc_prev: Tensor<T>,
    pub dkernel: Tensor<T>,
    pub dbias: Tensor<T>,
    pub dpeephole: Option<Tensor<T>>,
}

fn check_weights<T: Real>(w: &LstmWeights<'_, T>, cin: usize, ch: usize) -> Result<()> {
    if w.bias.len() != 4 * ch {
        return Err(invalid!(
            "LSTM bias has {} entries, expected {}",
            w.bias.len(),
            4 * ch
        ));
    }
    if w.kernel.shape() != [3, 3, cin + ch, 4 * ch] {
        return Err(invalid!(
            "LSTM kernel shape {:?}, expected [3, 3, {}, {}]",
            w.kernel.shape(),
            cin + ch,
            4 * ch
        ));
    }
    if let Some(p) = w.peephole {
        if p.shape() != [3, ch] {
            return Err(invalid!("peephole shape {:?}, expected [3, {ch}]", p.shape()));
        }
    }
    Ok(())
}

/// One recurrent step. Returns `y_t = h'`, the new state and the cache.
pub fn conv_lstm_step<T: Real>(
    x: &Tensor<T>,
    state: &ConvLstmState<T>,
    w: &LstmWeights<'_, T>,
) -> Result<(Tensor<T>, ConvLstmState<T>, LstmStepCache<T>)> {
    let [b, h, wd, cin] = x.dims4()?;
    let ch = w.hidden();
    if state.h.shape() != [b, h, wd, ch] || state.c.shape() != [b, h, wd, ch] {
        return Err(invalid!(
            "LSTM state {:?} does not match input {:?} with {ch} hidden channels",
            state.h.shape(),
            x.shape()
        ));
    }
    check_weights(w, cin, ch)?;
    let x4 = x.clone().reshape(vec![b, h, wd, cin])?;
    let xh = concat_channels(&x4, &state.h)?;
    let pre = conv2d_forward(&xh, w.kernel, w.bias, Padding::Same)?;

    let n_px = b * h * wd;
    let mut gates = pre.into_data();
    let mut c_new = vec![T::zero(); n_px * ch];
    let mut tanh_c = vec![T::zero(); n_px * ch];
    let mut h_new = vec![T::zero(); n_px * ch];
    let c_prev = state.c.data();
    let peep = w.peephole.map(|p| p.data());
    for px in 0..n_px {
        let g = &mut gates[px * 4 * ch..(px + 1) * 4 * ch];
        for k in 0..ch {
            let cp = c_prev[px * ch + k];
            let (mut ai, mut af) = (g[k], g[ch + k]);
            if let Some(p) = peep {
                ai += p[k] * cp;
                af += p[ch + k] * cp;
            }
            let i = sigmoid(ai);
            let f = sigmoid(af);
            let gg = g[2 * ch + k].tanh();
            let cn = f * cp + i * gg;
            let mut ao = g[3 * ch + k];
            if let Some(p) = peep {
                ao += p[2 * ch + k] * cn;
            }
            let o = sigmoid(ao);
            let tc = cn.tanh();
            g[k] = i;
            g[ch + k] = f;
            g[2 * ch + k] = gg;
            g[3 * ch + k] = o;
            c_new[px * ch + k] = cn;
            tanh_c[px * ch + k] = tc;
            h_new[px * ch + k] = o * tc;
        }
    }
    let shape = vec![b, h, wd, ch];
    let h_t = Tensor::from_vec(shape.clone(), h_new);
    let c_t = Tensor::from_vec(shape, c_new.clone());
    h_t.check_finite("conv_lstm_step")?;
    c_t.check_finite("conv_lstm_step")?;
    let cache = LstmStepCache {
        xh,
        gates,
        c_prev: c_prev.to_vec(),
        c_new,
        tanh_c,
        in_channels: cin,
    };
    Ok((
        h_t.clone(),
        ConvLstmState { h: h_t, c: c_t },
        cache,
    ))
}

/// Backward through one step given the total gradients reaching `h'` and
/// `c'`.
pub fn conv_lstm_step_backward<T: Real>(
    cache: &LstmStepCache<T>,
    w: &LstmWeights<'_, T>,
    dh: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<LstmStepGrads<T>> {
    let ch = w.hidden();
    let n = cache.c_new.len();
    if dh.len() != n || dc.len() != n {
        return Err(invalid!("LSTM upstream gradients do not match the cached state"));
    }
    let n_px = n / ch;
    let peep = w.peephole.map(|p| p.data());
    let mut dpre = vec![T::zero(); n_px * 4 * ch];
    let mut dc_prev = vec![T::zero(); n];
    let mut dpeep = vec![T::zero(); 3 * ch];
    let one = T::one();
    for px in 0..n_px {
        let g = &cache.gates[px * 4 * ch..(px + 1) * 4 * ch];
        let d = &mut dpre[px * 4 * ch..(px + 1) * 4 * ch];
        for k in 0..ch {
            let idx = px * ch + k;
            let (i, f, gg, o) = (g[k], g[ch + k], g[2 * ch + k], g[3 * ch + k]);
            let tc = cache.tanh_c[idx];
            let cp = cache.c_prev[idx];
            let dhv = dh.data()[idx];
            let dao = dhv * tc * o * (one - o);
            let mut dcv = dc.data()[idx] + dhv * o * (one - tc * tc);
            if let Some(p) = peep {
                dcv += dao * p[2 * ch + k];
                dpeep[2 * ch + k] += dao * cache.c_new[idx];
            }
            let dai = dcv * gg * i * (one - i);
            let daf = dcv * cp * f * (one - f);
            let dag = dcv * i * (one - gg * gg);
            let mut dcp = dcv * f;
            if let Some(p) = peep {
                dcp += dai * p[k] + daf * p[ch + k];
                dpeep[k] += dai * cp;
                dpeep[ch + k] += daf * cp;
            }
            d[k] = dai;
            d[ch + k] = daf;
            d[2 * ch + k] = dag;
            d[3 * ch + k] = dao;
            dc_prev[idx] = dcp;
        }
    }
    let mut pre_shape = cache.xh.shape().to_vec();
    pre_shape[3] = 4 * ch;
    let dpre = Tensor::from_vec(pre_shape, dpre);
    let conv = conv2d_backward(&cache.xh, w.kernel, Padding::Same, &dpre)?;
    let (dx, dh_prev) = split_channels(&conv.dx, cache.in_channels)?;
    Ok(LstmStepGrads {
        dx,
        dh_prev,
        dc_prev: Tensor::from_vec(dh.shape().to_vec(), dc_prev),
        dkernel: conv.dkernel,
        dbias: conv.dbias,
        dpeephole: w.peephole.map(|_| Tensor::from_vec(vec![3, ch], dpeep)),
    })
}
