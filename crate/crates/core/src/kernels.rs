//! Hand-written forward and backward kernels.
//!
//! Summation order is fixed (row-major, accumulator starts at zero, bias added
//! last) so results are reproducible and a 5x5 conv over a 5x5 input matches
//! the equivalent fully-connected layer bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{flops, LayerParams, Real, Tensor};

/// Which gradients a backward kernel should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub weight: bool,
    pub bias: bool,
    pub input: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        weight: true,
        bias: true,
        input: true,
    };
    pub const INPUT_ONLY: GradRequest = GradRequest {
        weight: false,
        bias: false,
        input: true,
    };
}

#[derive(Clone, Debug)]
pub struct LayerGrads<T = f32> {
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
    pub dx: Option<Tensor<T>>,
}

fn finite<T: Real>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    t.check_finite(op)?;
    Ok(t)
}

fn fc_dims<T: Real>(op: &'static str, p: &LayerParams<T>) -> Result<(usize, usize)> {
    match *p.weight.shape() {
        [o, i] if p.bias.shape() == [o] => Ok((o, i)),
        _ => Err(Error::shape(op, &[p.bias.len(), 0], p.weight.shape())),
    }
}

/// `out[o] = sum_j W[o, j] * x[j] + b[o]`. `x` is read flattened.
pub fn fc_forward<T: Real>(x: &Tensor<T>, p: &LayerParams<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = fc_dims("fc_forward", p)?;
    if x.len() != d_in {
        return Err(Error::shape("fc_forward", &[d_in], x.shape()));
    }
    let w = p.weight.data();
    let xs = x.data();
    let out: Vec<T> = (0..d_out)
        .map(|o| {
            let row = &w[o * d_in..(o + 1) * d_in];
            let mut acc = T::zero();
            for (wv, xv) in row.iter().zip(xs) {
                acc += *wv * *xv;
            }
            acc + p.bias.data()[o]
        })
        .collect();
    flops::add((2 * d_out * d_in + d_out) as u64);
    finite(Tensor::vector(out), "fc_forward")
}

/// Gradients of [`fc_forward`]: `dW = dy x^T`, `db = dy`, `dx = W^T dy`.
pub fn fc_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    p: &LayerParams<T>,
) -> Result<LayerGrads<T>> {
    fc_backward_with(dy, x, p, GradRequest::ALL)
}

pub fn fc_backward_with<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    p: &LayerParams<T>,
    req: GradRequest,
) -> Result<LayerGrads<T>> {
    let (d_out, d_in) = fc_dims("fc_backward", p)?;
    if dy.len() != d_out {
        return Err(Error::shape("fc_backward", &[d_out], dy.shape()));
    }
    if x.len() != d_in {
        return Err(Error::shape("fc_backward", &[d_in], x.shape()));
    }
    let dys = dy.data();
    let xs = x.data();
    let dw = if req.weight {
        let mut dw = Vec::with_capacity(d_out * d_in);
        for &g in dys {
            dw.extend(xs.iter().map(|&xv| g * xv));
        }
        flops::add((2 * d_out * d_in) as u64);
        Some(finite(Tensor::new(&[d_out, d_in], dw)?, "fc_backward")?)
    } else {
        None
    };
    let db = if req.bias {
        flops::add(d_out as u64);
        Some(Tensor::vector(dys.to_vec()))
    } else {
        None
    };
    let dx = if req.input {
        let w = p.weight.data();
        let mut dx = vec![T::zero(); d_in];
        for (o, &g) in dys.iter().enumerate() {
            let row = &w[o * d_in..(o + 1) * d_in];
            for (acc, wv) in dx.iter_mut().zip(row) {
                *acc += *wv * g;
            }
        }
        flops::add((2 * d_out * d_in) as u64);
        Some(finite(Tensor::new(x.shape(), dx)?, "fc_backward")?)
    } else {
        None
    };
    Ok(LayerGrads { dw, db, dx })
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(op: &'static str, x: &[usize], weight: &[usize], pad: usize) -> Result<Self> {
        let (c_in, h, w) = match *x {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(op, &[0, 0, 0], x)),
        };
        let (c_out, k) = match *weight {
            [co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            _ => return Err(Error::shape(op, &[0, c_in, 5, 5], weight)),
        };
        let ho = (h + 2 * pad) as isize - k as isize + 1;
        let wo = (w + 2 * pad) as isize - k as isize + 1;
        if ho <= 0 || wo <= 0 {
            return Err(Error::InvalidArgument(format!(
                "{op}: output dimension {ho}x{wo} is not positive"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            pad,
            ho: ho as usize,
            wo: wo as usize,
        })
    }

    /// Output rows `oy` for which input row `oy + ky - pad` is in bounds.
    fn valid_out(&self, kidx: usize, in_len: usize, out_len: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kidx);
        let hi = (in_len + self.pad).saturating_sub(kidx).min(out_len);
        lo..hi.max(lo)
    }

    fn nominal_macs(&self) -> u64 {
        (self.c_out * self.ho * self.wo * self.c_in * self.k * self.k) as u64
    }
}

/// Stride-1 cross-correlation with zero padding, plus bias.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new("conv2d_forward", x.shape(), p.weight.shape(), padding)?;
    if p.bias.len() != g.c_out {
        return Err(Error::shape("conv2d_forward", &[g.c_out], p.bias.shape()));
    }
    let xs = x.data();
    let ws = p.weight.data();
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.c_out * plane];
    for co in 0..g.c_out {
        let dst = &mut out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let src = &xs[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let rows = g.valid_out(ky, g.h, g.ho);
                for kx in 0..g.k {
                    let wv = ws[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let cols = g.valid_out(kx, g.w, g.wo);
                    for oy in rows.clone() {
                        let iy = oy + ky - g.pad;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for ox in cols.clone() {
                            drow[ox] += wv * srow[ox + kx - g.pad];
                        }
                    }
                }
            }
        }
        let b = p.bias.data()[co];
        dst.iter_mut().for_each(|v| *v += b);
    }
    flops::add(2 * g.nominal_macs() + (g.c_out * plane) as u64);
    finite(Tensor::new(&[g.c_out, g.ho, g.wo], out)?, "conv2d_forward")
}

pub fn conv2d_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    p: &LayerParams<T>,
    padding: usize,
) -> Result<LayerGrads<T>> {
    conv2d_backward_with(dy, x, p, padding, GradRequest::ALL)
}

/// Gradients of [`conv2d_forward`]. The input gradient is skipped when
/// `req.input` is false (frozen upstream with nothing consuming it).
pub fn conv2d_backward_with<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    p: &LayerParams<T>,
    padding: usize,
    req: GradRequest,
) -> Result<LayerGrads<T>> {
    let g = ConvGeom::new("conv2d_backward", x.shape(), p.weight.shape(), padding)?;
    dy.expect_shape("conv2d_backward", &[g.c_out, g.ho, g.wo])?;
    let xs = x.data();
    let ws = p.weight.data();
    let dys = dy.data();
    let plane = g.ho * g.wo;
    let in_plane = g.h * g.w;

    let dw = if req.weight {
        let mut dw = vec![T::zero(); ws.len()];
        for co in 0..g.c_out {
            let gplane = &dys[co * plane..(co + 1) * plane];
            for ci in 0..g.c_in {
                let src = &xs[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..g.k {
                    let rows = g.valid_out(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let cols = g.valid_out(kx, g.w, g.wo);
                        let mut acc = T::zero();
                        for oy in rows.clone() {
                            let iy = oy + ky - g.pad;
                            for ox in cols.clone() {
                                acc += gplane[oy * g.wo + ox] * src[iy * g.w + ox + kx - g.pad];
                            }
                        }
                        dw[((co * g.c_in + ci) * g.k + ky) * g.k + kx] = acc;
                    }
                }
            }
        }
        flops::add(2 * g.nominal_macs());
        Some(finite(
            Tensor::new(p.weight.shape(), dw)?,
            "conv2d_backward",
        )?)
    } else {
        None
    };

    let db = if req.bias {
        let db: Vec<T> = (0..g.c_out)
            .map(|co| {
                let mut acc = T::zero();
                for v in &dys[co * plane..(co + 1) * plane] {
                    acc += *v;
                }
                acc
            })
            .collect();
        flops::add((g.c_out * plane) as u64);
        Some(Tensor::vector(db))
    } else {
        None
    };

    let dx = if req.input {
        let mut dx = vec![T::zero(); xs.len()];
        for co in 0..g.c_out {
            let gplane = &dys[co * plane..(co + 1) * plane];
            for ci in 0..g.c_in {
                let dst = &mut dx[ci * in_plane..(ci + 1) * in_plane];
                for ky in 0..g.k {
                    let rows = g.valid_out(ky, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = ws[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                        let cols = g.valid_out(kx, g.w, g.wo);
                        for oy in rows.clone() {
                            let iy = oy + ky - g.pad;
                            for ox in cols.clone() {
                                dst[iy * g.w + ox + kx - g.pad] += wv * gplane[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        flops::add(2 * g.nominal_macs());
        Some(finite(Tensor::new(x.shape(), dx)?, "conv2d_backward")?)
    } else {
        None
    };
    Ok(LayerGrads { dw, db, dx })
}

/// Positions (flat input offsets) selected by a 2x2 max-pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolMask {
    input_shape: [usize; 3],
    argmax: Vec<u32>,
}

/// 2x2, stride-2 max pool over `[c, h, w]`. Ties go to the first element in
/// row-major window order.
pub fn maxpool2x2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolMask)> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape("maxpool2x2_forward", &[0, 0, 0], x.shape())),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2x2_forward: odd spatial dims {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let first = base + 2 * oy * w + 2 * ox;
                let mut best = first;
                for off in [1, w, w + 1] {
                    if xs[first + off] > xs[best] {
                        best = first + off;
                    }
                }
                out.push(xs[best]);
                argmax.push(best as u32);
            }
        }
    }
    flops::add((3 * c * ho * wo) as u64);
    Ok((
        Tensor::new(&[c, ho, wo], out)?,
        PoolMask {
            input_shape: [c, h, w],
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward<T: Real>(dy: &Tensor<T>, mask: &PoolMask) -> Result<Tensor<T>> {
    if dy.len() != mask.argmax.len() {
        return Err(Error::shape(
            "maxpool2x2_backward",
            &[mask.argmax.len()],
            dy.shape(),
        ));
    }
    let mut dx = Tensor::zeros(&mask.input_shape);
    let dxs = dx.data_mut();
    for (&pos, &g) in mask.argmax.iter().zip(dy.data()) {
        dxs[pos as usize] += g;
    }
    Ok(dx)
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    flops::add(x.len() as u64);
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Gradient gate `x > 0`; the derivative at exactly zero is zero.
pub fn relu_backward<T: Real>(dy: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.len() != x.len() {
        return Err(Error::shape("relu_backward", x.shape(), dy.shape()));
    }
    flops::add(x.len() as u64);
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

#[derive(Clone, Debug)]
pub struct SoftmaxXent<T = f32> {
    pub probs: Tensor<T>,
    pub loss: T,
    pub dlogits: Tensor<T>,
}

/// Softmax with cross-entropy against `label`; `dlogits = p - onehot(label)`.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, label: usize) -> Result<SoftmaxXent<T>> {
    let n = logits.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "softmax_xent needs at least 2 classes, got {n}"
        )));
    }
    if label >= n {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    logits.check_finite("softmax_xent")?;
    let probs = softmax(logits.data());
    let loss = -probs[label].max(T::min_positive_value()).ln();
    let mut grad = probs.clone();
    grad[label] -= T::one();
    Ok(SoftmaxXent {
        probs: Tensor::vector(probs),
        loss,
        dlogits: Tensor::vector(grad),
    })
}

/// Numerically stable softmax (subtract-max before exponentiation).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let mut sum = T::zero();
    for e in &exps {
        sum += *e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest element; ties go to the smallest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
