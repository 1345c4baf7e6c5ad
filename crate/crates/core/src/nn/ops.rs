//! Shape-changing and pointwise layers of the U-Net, with their backward
//! passes. All tensors are `(B, H, W, C)`.

use crate::error::{invalid, Result};

use super::{Real, Tensor};

/// 2×2 max-pooling with stride 2. Returns the output and the flat input
/// index selected for each output entry (first maximum in scan order).
pub fn max_pool_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, h, w, c] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid!("max-pool needs even spatial size, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * ho * wo * c);
    let mut argmax = Vec::with_capacity(b * ho * wo * c);
    let xd = x.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if best == usize::MAX || xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_vec(vec![b, ho, wo, c], out), argmax))
}

pub fn max_pool_backward<T: Real>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, h, w, c] = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * ho * wo * c];
    let xd = x.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((bi * h + oy / 2) * w + ox / 2) * c;
                let dst = ((bi * ho + oy) * wo + ox) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![b, ho, wo, c], out))
}

pub fn upsample_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, ho, wo, c] = dy.dims4()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = vec![T::zero(); b * h * w * c];
    let dd = dy.data();
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((bi * ho + oy) * wo + ox) * c;
                let dst = ((bi * h + oy / 2) * w + ox / 2) * c;
                for ch in 0..c {
                    dx[dst + ch] += dd[src + ch];
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![b, h, w, c], dx))
}

/// Center crop to `(size_h, size_w)`. The crop offset is
/// `(H - size_h) / 2`, so odd differences favour the top/left border.
pub fn center_crop<T: Real>(x: &Tensor<T>, size_h: usize, size_w: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = x.dims4()?;
    if size_h > h || size_w > w {
        return Err(invalid!("cannot crop {h}x{w} to {size_h}x{size_w}"));
    }
    let (top, left) = ((h - size_h) / 2, (w - size_w) / 2);
    let mut out = Vec::with_capacity(b * size_h * size_w * c);
    let xd = x.data();
    for bi in 0..b {
        for y in 0..size_h {
            let src = ((bi * h + top + y) * w + left) * c;
            out.extend_from_slice(&xd[src..src + size_w * c]);
        }
    }
    Ok(Tensor::from_vec(vec![b, size_h, size_w, c], out))
}

pub fn center_crop_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, h, w, c] = match *input_shape {
        [b, h, w, c] => [b, h, w, c],
        _ => return Err(invalid!("crop backward expects a rank-4 input shape")),
    };
    let [_, size_h, size_w, _] = dy.dims4()?;
    let (top, left) = ((h - size_h) / 2, (w - size_w) / 2);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for bi in 0..b {
        for y in 0..size_h {
            let dst = ((bi * h + top + y) * w + left) * c;
            let src = ((bi * size_h + y) * size_w) * c;
            d[dst..dst + size_w * c].copy_from_slice(&dy.data()[src..src + size_w * c]);
        }
    }
    Ok(dx)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [ba, ha, wa, ca] = a.dims4()?;
    let [bb, hb, wb, cb] = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(invalid!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = Vec::with_capacity(ba * ha * wa * (ca + cb));
    for (pa, pb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Ok(Tensor::from_vec(vec![ba, ha, wa, ca + cb], out))
}

pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, h, w, c] = x.dims4()?;
    if first > c {
        return Err(invalid!("cannot split {c} channels at {first}"));
    }
    let mut a = Vec::with_capacity(b * h * w * first);
    let mut rest = Vec::with_capacity(b * h * w * (c - first));
    for px in x.data().chunks(c) {
        a.extend_from_slice(&px[..first]);
        rest.extend_from_slice(&px[first..]);
    }
    Ok((
        Tensor::from_vec(vec![b, h, w, first], a),
        Tensor::from_vec(vec![b, h, w, c - first], rest),
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape().to_vec(), data)
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_grad_close, finite_difference, random_tensor};

    fn weighted(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn pool_picks_maxima() {
        let x = Tensor::from_vec(vec![1, 2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]);
        let (y, arg) = max_pool_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
        assert!(max_pool_forward(&Tensor::<f64>::zeros(vec![1, 3, 2, 1])).is_err());
    }

    #[test]
    fn pool_gradient() {
        let x = random_tensor(&[2, 4, 6, 3], 1);
        let (y, arg) = max_pool_forward(&x).unwrap();
        let w = random_tensor(y.shape(), 2);
        let dx = max_pool_backward(x.shape(), &arg, &w);
        let fd = finite_difference(&x, |t| weighted(&max_pool_forward(t).unwrap().0, &w));
        assert_grad_close(&dx, &fd, 1e-6);
    }

    #[test]
    fn upsample_and_gradient() {
        let x = random_tensor(&[1, 3, 2, 2], 3);
        let y = upsample_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 6, 4, 2]);
        assert_eq!(y.data()[((5 * 4) + 3) * 2 + 1], x.data()[((2 * 2) + 1) * 2 + 1]);
        let w = random_tensor(y.shape(), 4);
        let dx = upsample_backward(&w).unwrap();
        let fd = finite_difference(&x, |t| weighted(&upsample_forward(t).unwrap(), &w));
        assert_grad_close(&dx, &fd, 1e-6);
    }

    #[test]
    fn crop_and_gradient() {
        let x = random_tensor(&[2, 7, 8, 2], 5);
        let y = center_crop(&x, 3, 4).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 2]);
        assert_eq!(y.data()[0], x.data()[((2 * 8) + 2) * 2]);
        let w = random_tensor(y.shape(), 6);
        let dx = center_crop_backward(x.shape(), &w).unwrap();
        let fd = finite_difference(&x, |t| weighted(&center_crop(t, 3, 4).unwrap(), &w));
        assert_grad_close(&dx, &fd, 1e-6);
    }

    #[test]
    fn concat_split_inverse() {
        let a = random_tensor(&[2, 3, 3, 2], 7);
        let b = random_tensor(&[2, 3, 3, 5], 8);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 7]);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn relu_gradient() {
        let x = random_tensor(&[1, 4, 4, 2], 9);
        let y = relu(&x);
        let w = random_tensor(y.shape(), 10);
        let dx = relu_backward(&y, &w);
        let fd = finite_difference(&x, |t| weighted(&relu(t), &w));
        assert_grad_close(&dx, &fd, 1e-6);
    }
}
