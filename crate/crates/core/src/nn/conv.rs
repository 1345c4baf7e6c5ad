//! 3×3 cross-correlation over NHWC tensors via im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No border padding; output shrinks by 2 per axis.
    Valid,
    /// Zero padding of 1; output keeps the input size.
    Same,
}

pub const KSIZE: usize = 3;

impl Padding {
    fn offset(self) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => 1,
        }
    }

    pub fn output_size(self, input: usize) -> Option<usize> {
        match self {
            Padding::Same => Some(input),
            Padding::Valid => input.checked_sub(KSIZE - 1).filter(|&s| s > 0),
        }
    }
}

struct ConvDims {
    b: usize,
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    rank3: bool,
}

fn dims<T: Real>(x: &Tensor<T>, k: &Tensor<T>, pad: Padding) -> Result<ConvDims> {
    let [b, h, w, cin] = x.dims4()?;
    let (kcin, cout) = match *k.shape() {
        [KSIZE, KSIZE, kcin, cout] => (kcin, cout),
        _ => return Err(invalid!("conv kernel must be (3,3,Cin,Cout), got {:?}", k.shape())),
    };
    if kcin != cin {
        return Err(invalid!(
            "conv kernel expects {kcin} input channels, input has {cin}"
        ));
    }
    let (ho, wo) = match (pad.output_size(h), pad.output_size(w)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(invalid!("input {h}x{w} too small for a valid 3x3 convolution")),
    };
    Ok(ConvDims {
        b,
        h,
        w,
        cin,
        ho,
        wo,
        cout,
        rank3: x.rank() == 3,
    })
}

/// Row `(b, oy, ox)`, column `(ky, kx, ci)`.
fn im2col<T: Real>(x: &[T], d: &ConvDims, pad: Padding) -> Vec<T> {
    let cols = KSIZE * KSIZE * d.cin;
    let mut out = vec![T::zero(); d.b * d.ho * d.wo * cols];
    let off = pad.offset() as isize;
    for bi in 0..d.b {
        let xb = &x[bi * d.h * d.w * d.cin..(bi + 1) * d.h * d.w * d.cin];
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let row = ((bi * d.ho + oy) * d.wo + ox) * cols;
                for ky in 0..KSIZE {
                    let iy = oy as isize + ky as isize - off;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..KSIZE {
                        let ix = ox as isize + kx as isize - off;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let src = (iy as usize * d.w + ix as usize) * d.cin;
                        let dst = row + (ky * KSIZE + kx) * d.cin;
                        out[dst..dst + d.cin].copy_from_slice(&xb[src..src + d.cin]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(col: &[T], d: &ConvDims, pad: Padding) -> Vec<T> {
    let cols = KSIZE * KSIZE * d.cin;
    let mut out = vec![T::zero(); d.b * d.h * d.w * d.cin];
    let off = pad.offset() as isize;
    for bi in 0..d.b {
        let xb = &mut out[bi * d.h * d.w * d.cin..(bi + 1) * d.h * d.w * d.cin];
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let row = ((bi * d.ho + oy) * d.wo + ox) * cols;
                for ky in 0..KSIZE {
                    let iy = oy as isize + ky as isize - off;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..KSIZE {
                        let ix = ox as isize + kx as isize - off;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * d.w + ix as usize) * d.cin;
                        let src = row + (ky * KSIZE + kx) * d.cin;
                        for c in 0..d.cin {
                            xb[dst + c] += col[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

fn out_shape(d: &ConvDims, c: usize) -> Vec<usize> {
    if d.rank3 {
        vec![d.ho, d.wo, c]
    } else {
        vec![d.b, d.ho, d.wo, c]
    }
}

/// Cross-correlation of `x` `(B,H,W,Cin)` or `(H,W,Cin)` with kernel
/// `(3,3,Cin,Cout)`, plus bias `(Cout)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    pad: Padding,
) -> Result<Tensor<T>> {
    let d = dims(x, kernel, pad)?;
    if bias.len() != d.cout {
        return Err(invalid!(
            "conv bias has {} entries, expected {}",
            bias.len(),
            d.cout
        ));
    }
    let rows = d.b * d.ho * d.wo;
    let mut out = Vec::with_capacity(rows * d.cout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    let col = im2col(x.data(), &d, pad);
    T::gemm(
        false,
        false,
        rows,
        KSIZE * KSIZE * d.cin,
        d.cout,
        &col,
        kernel.data(),
        &mut out,
        true,
    );
    let y = Tensor::from_vec(out_shape(&d, d.cout), out);
    y.check_finite("conv2d")?;
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dkernel: Tensor<T>,
    pub dbias: Tensor<T>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: Padding,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let d = dims(x, kernel, pad)?;
    let rows = d.b * d.ho * d.wo;
    if dy.len() != rows * d.cout {
        return Err(invalid!(
            "upstream gradient shape {:?} does not match conv output",
            dy.shape()
        ));
    }
    let kdim = KSIZE * KSIZE * d.cin;
    let col = im2col(x.data(), &d, pad);

    let mut dk = vec![T::zero(); kdim * d.cout];
    T::gemm(true, false, kdim, rows, d.cout, &col, dy.data(), &mut dk, false);

    let mut dcol = col;
    T::gemm(false, true, rows, d.cout, kdim, dy.data(), kernel.data(), &mut dcol, false);
    let dx = col2im(&dcol, &d, pad);

    let mut db = vec![T::zero(); d.cout];
    for row in dy.data().chunks(d.cout) {
        for (a, v) in db.iter_mut().zip(row) {
            *a += *v;
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape().to_vec(), dx),
        dkernel: Tensor::from_vec(kernel.shape().to_vec(), dk),
        dbias: Tensor::from_vec(vec![d.cout], db),
    })
}
