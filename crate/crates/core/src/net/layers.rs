//! Layer kernels with their hand-written backward passes.
//!
//! Every kernel accumulates each output element in a fixed order that does not
//! depend on the spatial size of the input, so the same pixel computed inside a
//! tile or inside the whole image comes out bit-identical.

use super::tensor::{axpy, dot, Scalar, Tensor};
use crate::{Error, Result};

/// Output positions `o` in `[lo, hi)` whose tap `o * stride + offset - pad` lands in `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    if in_len + pad < offset + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - offset) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

fn check_conv(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>, stride: usize, pad: usize) -> Result<[usize; 4]> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, kh, kw] = w.shape();
    if wci != ci {
        return Err(Error::shape(format!("conv input has {ci} channels, weights expect {wci}")));
    }
    let ho = conv_output_len(h, kh, stride, pad);
    let wo = conv_output_len(wd, kw, stride, pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok([n, co, ho, wo]),
        _ => Err(Error::shape(format!(
            "conv kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit input {h}x{wd}"
        ))),
    }
}

/// Cross-correlation with zero padding. Weights are `[out, in, kh, kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let out_shape = check_conv(x, w, stride, pad)?;
    let [n, ci, h, wd] = x.shape();
    let [_, co, ho, wo] = out_shape;
    let [_, _, kh, kw] = w.shape();
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::shape(format!("bias has {} entries for {co} channels", b.len())));
        }
    }
    let mut out = Tensor::zeros(out_shape);
    let wdata = w.data();
    for b in 0..n {
        for o in 0..co {
            let plane = out.plane_mut(b, o);
            if let Some(bias) = bias {
                plane.fill(bias[o]);
            }
            for c in 0..ci {
                let src = x.plane(b, c);
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ho, h, ky, pad, stride);
                    for kx in 0..kw {
                        let (ox0, ox1) = valid_range(wo, wd, kx, pad, stride);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = wdata[((o * ci + c) * kh + ky) * kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let irow = &src[iy * wd..(iy + 1) * wd];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                axpy(wv, &irow[ix0..ix0 + (ox1 - ox0)], &mut orow[ox0..ox1]);
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] = orow[ox] + wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let out_shape = check_conv(x, w, stride, pad)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(format!(
            "conv output gradient has shape {:?}, expected {out_shape:?}",
            grad_out.shape()
        )));
    }
    let [n, ci, h, wd] = x.shape();
    let [_, co, ho, wo] = out_shape;
    let [_, _, kh, kw] = w.shape();
    let wdata = w.data();

    let mut gb = vec![T::zero(); co];
    for b in 0..n {
        for (o, g) in gb.iter_mut().enumerate() {
            *g = *g + grad_out.plane(b, o).iter().copied().sum::<T>();
        }
    }

    let mut gw = Tensor::zeros(w.shape());
    {
        let gwd = gw.data_mut();
        for o in 0..co {
            for c in 0..ci {
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ho, h, ky, pad, stride);
                    for kx in 0..kw {
                        let (ox0, ox1) = valid_range(wo, wd, kx, pad, stride);
                        let mut acc = T::zero();
                        if ox0 < ox1 {
                            for b in 0..n {
                                let g = grad_out.plane(b, o);
                                let src = x.plane(b, c);
                                for oy in oy0..oy1 {
                                    let iy = oy * stride + ky - pad;
                                    let grow = &g[oy * wo..(oy + 1) * wo];
                                    let irow = &src[iy * wd..(iy + 1) * wd];
                                    if stride == 1 {
                                        let ix0 = ox0 + kx - pad;
                                        acc = acc + dot(&grow[ox0..ox1], &irow[ix0..ix0 + (ox1 - ox0)]);
                                    } else {
                                        for ox in ox0..ox1 {
                                            acc = acc + grow[ox] * irow[ox * stride + kx - pad];
                                        }
                                    }
                                }
                            }
                        }
                        gwd[((o * ci + c) * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
    }

    let mut gx = Tensor::zeros(x.shape());
    for b in 0..n {
        for c in 0..ci {
            for o in 0..co {
                let g = grad_out.plane(b, o);
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(ho, h, ky, pad, stride);
                    for kx in 0..kw {
                        let (ox0, ox1) = valid_range(wo, wd, kx, pad, stride);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = wdata[((o * ci + c) * kh + ky) * kw + kx];
                        let dst = gx.plane_mut(b, c);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let drow = &mut dst[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                axpy(wv, &grow[ox0..ox1], &mut drow[ix0..ix0 + (ox1 - ox0)]);
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kx - pad;
                                    drow[ix] = drow[ix] + wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Argmax positions of a max-pooling layer, one plane-local flat offset per output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    offsets: Vec<usize>,
    out_shape: [usize; 4],
    in_shape: [usize; 4],
    window: usize,
    stride: usize,
}

impl PoolIndices {
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn out_shape(&self) -> [usize; 4] {
        self.out_shape
    }

    pub fn in_shape(&self) -> [usize; 4] {
        self.in_shape
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Test hook: overwrite one stored offset.
    pub fn set_offset(&mut self, i: usize, offset: usize) {
        self.offsets[i] = offset;
    }

    fn validate(&self) -> Result<()> {
        let [_, _, ho, wo] = self.out_shape;
        let w_in = self.in_shape[3];
        for (i, &off) in self.offsets.iter().enumerate() {
            let within = i % (ho * wo);
            let (py, px) = (within / wo, within % wo);
            let (y, x) = (off / w_in, off % w_in);
            let y0 = py * self.stride;
            let x0 = px * self.stride;
            if y < y0 || y >= y0 + self.window || x < x0 || x >= x0 + self.window || y >= self.in_shape[2] {
                return Err(Error::CorruptIndices {
                    offset: off,
                    window: within,
                });
            }
        }
        Ok(())
    }
}

/// Max pooling that records where each maximum came from. Ties go to the first
/// position in row-major order within the window.
pub fn maxpool_with_indices<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = x.shape();
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    if h % stride != 0 || w % stride != 0 || h < window || w < window {
        return Err(Error::shape(format!(
            "pool input {h}x{w} is not divisible by stride {stride}"
        )));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let out_shape = [n, c, ho, wo];
    let mut out = Tensor::zeros(out_shape);
    let mut offsets = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for py in 0..ho {
                for px in 0..wo {
                    let (y0, x0) = (py * stride, px * stride);
                    let mut best_off = y0 * w + x0;
                    let mut best = src[best_off];
                    for y in y0..y0 + window {
                        for xx in x0..x0 + window {
                            let off = y * w + xx;
                            if src[off] > best {
                                best = src[off];
                                best_off = off;
                            }
                        }
                    }
                    dst[py * wo + px] = best;
                    offsets.push(best_off);
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            offsets,
            out_shape,
            in_shape: x.shape(),
            window,
            stride,
        },
    ))
}

/// Scatter `y` to the recorded argmax positions; everything else is zero.
pub fn unpool_by_indices<T: Scalar>(y: &Tensor<T>, idx: &PoolIndices, out_shape: [usize; 4]) -> Result<Tensor<T>> {
    if y.shape() != idx.out_shape {
        return Err(Error::shape(format!(
            "unpool input {:?} does not match pooling output {:?}",
            y.shape(),
            idx.out_shape
        )));
    }
    if out_shape != idx.in_shape {
        return Err(Error::shape(format!(
            "unpool target {out_shape:?} does not match pooling input {:?}",
            idx.in_shape
        )));
    }
    idx.validate()?;
    let mut out = Tensor::zeros(out_shape);
    let [n, c, _, _] = out_shape;
    let plane_out = y.plane_len();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane_out;
            let src = y.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (i, &v) in src.iter().enumerate() {
                let off = idx.offsets[base + i];
                dst[off] = dst[off] + v;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`unpool_by_indices`]: gather from the argmax positions.
pub fn unpool_backward<T: Scalar>(grad_out: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.shape() != idx.in_shape {
        return Err(Error::shape("unpool gradient does not match pooling input"));
    }
    let [n, c, _, _] = idx.out_shape;
    let mut gy = Tensor::zeros(idx.out_shape);
    let plane = gy.plane_len();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let src = grad_out.plane(b, ch);
            let dst = gy.plane_mut(b, ch);
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[idx.offsets[base + i]];
            }
        }
    }
    Ok(gy)
}

/// Gradient of [`maxpool_with_indices`]: route each output gradient to its argmax.
pub fn maxpool_backward<T: Scalar>(grad_out: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    unpool_by_indices(grad_out, idx, idx.in_shape)
}

pub fn transposed_conv_output_len(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}

fn check_tconv(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>, stride: usize) -> Result<[usize; 4]> {
    let [n, ci, h, wd] = x.shape();
    let [wci, co, kh, kw] = w.shape();
    if stride == 0 {
        return Err(Error::shape("transposed conv stride must be >= 1"));
    }
    if wci != ci {
        return Err(Error::shape(format!(
            "transposed conv input has {ci} channels, weights expect {wci}"
        )));
    }
    if h == 0 || wd == 0 {
        return Err(Error::shape("transposed conv input is empty"));
    }
    Ok([n, co, transposed_conv_output_len(h, kh, stride), transposed_conv_output_len(wd, kw, stride)])
}

/// Fractionally strided convolution, the adjoint of [`conv2d_forward`] with zero
/// padding. Weights are `[in, out, kh, kw]`, i.e. the same tensor a forward
/// convolution from `out` to `in` channels would use.
pub fn transposed_conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let out_shape = check_tconv(x, w, stride)?;
    let [n, ci, h, wd] = x.shape();
    let [_, co, _, wo] = out_shape;
    let [_, _, kh, kw] = w.shape();
    let wdata = w.data();
    let mut out = Tensor::zeros(out_shape);
    for b in 0..n {
        for o in 0..co {
            let dst = out.plane_mut(b, o);
            for c in 0..ci {
                let src = x.plane(b, c);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdata[((c * co + o) * kh + ky) * kw + kx];
                        for iy in 0..h {
                            let oy = iy * stride + ky;
                            let irow = &src[iy * wd..(iy + 1) * wd];
                            let orow = &mut dst[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                axpy(wv, irow, &mut orow[kx..kx + wd]);
                            } else {
                                for (ix, &v) in irow.iter().enumerate() {
                                    let ox = ix * stride + kx;
                                    orow[ox] = orow[ox] + wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct TransposedConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
}

pub fn transposed_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
) -> Result<TransposedConvGrads<T>> {
    let out_shape = check_tconv(x, w, stride)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape("transposed conv output gradient has the wrong shape"));
    }
    let [n, ci, h, wd] = x.shape();
    let [_, co, _, wo] = out_shape;
    let [_, _, kh, kw] = w.shape();
    let wdata = w.data();

    let mut gx = Tensor::zeros(x.shape());
    for b in 0..n {
        for c in 0..ci {
            for o in 0..co {
                let g = grad_out.plane(b, o);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdata[((c * co + o) * kh + ky) * kw + kx];
                        let dst = gx.plane_mut(b, c);
                        for iy in 0..h {
                            let oy = iy * stride + ky;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let drow = &mut dst[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                axpy(wv, &grow[kx..kx + wd], drow);
                            } else {
                                for (ix, d) in drow.iter_mut().enumerate() {
                                    *d = *d + wv * grow[ix * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut gw = Tensor::zeros(w.shape());
    {
        let gwd = gw.data_mut();
        for c in 0..ci {
            for o in 0..co {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for b in 0..n {
                            let src = x.plane(b, c);
                            let g = grad_out.plane(b, o);
                            for iy in 0..h {
                                let oy = iy * stride + ky;
                                let grow = &g[oy * wo..(oy + 1) * wo];
                                let irow = &src[iy * wd..(iy + 1) * wd];
                                if stride == 1 {
                                    acc = acc + dot(irow, &grow[kx..kx + wd]);
                                } else {
                                    for (ix, &v) in irow.iter().enumerate() {
                                        acc = acc + v * grow[ix * stride + kx];
                                    }
                                }
                            }
                        }
                        gwd[((c * co + o) * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        }
    }
    Ok(TransposedConvGrads { input: gx, weight: gw })
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu shapes agree")
}

/// Softmax across the channel axis, independently per pixel.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let plane = x.plane_len();
    let mut out = Tensor::zeros(x.shape());
    let mut max = vec![T::zero(); plane];
    let mut sum = vec![T::zero(); plane];
    for b in 0..n {
        max.copy_from_slice(x.plane(b, 0));
        for ch in 1..c {
            for (m, &v) in max.iter_mut().zip(x.plane(b, ch)) {
                if v > *m {
                    *m = v;
                }
            }
        }
        sum.fill(T::zero());
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for i in 0..plane {
                let e = (src[i] - max[i]).exp();
                dst[i] = e;
                sum[i] = sum[i] + e;
            }
        }
        for ch in 0..c {
            for (d, &s) in out.plane_mut(b, ch).iter_mut().zip(&sum) {
                *d = *d / s;
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`softmax_channels`] given its output `p`.
pub fn softmax_backward<T: Scalar>(p: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = p.shape();
    let plane = p.plane_len();
    let mut out = Tensor::zeros(p.shape());
    let mut inner = vec![T::zero(); plane];
    for b in 0..n {
        inner.fill(T::zero());
        for ch in 0..c {
            for ((s, &pv), &g) in inner.iter_mut().zip(p.plane(b, ch)).zip(grad_out.plane(b, ch)) {
                *s = *s + pv * g;
            }
        }
        for ch in 0..c {
            let pp = p.plane(b, ch);
            let gp = grad_out.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for i in 0..plane {
                dst[i] = pp[i] * (gp[i] - inner[i]);
            }
        }
    }
    out
}

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Label value that contributes nothing to the loss (padding around odd-sized chips).
pub const IGNORE_LABEL: i32 = 0;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Gradient of the loss with respect to the probabilities.
    pub grad: Tensor<T>,
    /// Labeled pixels whose probability had to be clamped at [`LOG_CLAMP`].
    pub clamped: usize,
    /// Pixels that contributed (label != [`IGNORE_LABEL`]).
    pub counted: usize,
}

fn check_labels<T: Scalar>(probs: &Tensor<T>, labels: &[i32], weights: &[T]) -> Result<()> {
    let [n, k, h, w] = probs.shape();
    if labels.len() != n * h * w {
        return Err(Error::shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n * h * w
        )));
    }
    if weights.len() != k {
        return Err(Error::shape(format!("{} class weights for {k} classes", weights.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y < IGNORE_LABEL || y > k as i32) {
        return Err(Error::argument(format!("label {bad} outside 1..={k}")));
    }
    Ok(())
}

/// `-sum_p w[y_p] * ln(p[y_p])`, summed over every labeled pixel.
pub fn weighted_cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[i32], weights: &[T]) -> Result<LossOutput<T>> {
    check_labels(probs, labels, weights)?;
    let [n, k, _, _] = probs.shape();
    let plane = probs.plane_len();
    let eps = T::from(LOG_CLAMP).unwrap();
    let mut grad = Tensor::zeros(probs.shape());
    let mut loss = T::zero();
    let (mut clamped, mut counted) = (0, 0);
    for b in 0..n {
        for i in 0..plane {
            let y = labels[b * plane + i];
            if y == IGNORE_LABEL {
                continue;
            }
            counted += 1;
            let c = (y - 1) as usize;
            let p = probs.plane(b, c)[i];
            let wy = weights[c];
            if p < eps {
                clamped += 1;
                loss = loss - wy * eps.ln();
            } else {
                loss = loss - wy * p.ln();
                grad.plane_mut(b, c)[i] = -wy / p;
            }
        }
    }
    let _ = k;
    Ok(LossOutput {
        loss,
        grad,
        clamped,
        counted,
    })
}

/// Gradient of `scale * weighted_cross_entropy(softmax(z))` with respect to the logits `z`,
/// given `probs = softmax(z)`: `scale * w[y] * (p - onehot(y))`.
pub fn softmax_cross_entropy_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[i32],
    weights: &[T],
    scale: T,
) -> Result<Tensor<T>> {
    check_labels(probs, labels, weights)?;
    let [n, k, _, _] = probs.shape();
    let plane = probs.plane_len();
    let mut grad = probs.clone();
    for b in 0..n {
        let lab = &labels[b * plane..(b + 1) * plane];
        for ch in 0..k {
            let dst = grad.plane_mut(b, ch);
            for (i, d) in dst.iter_mut().enumerate() {
                let y = lab[i];
                if y == IGNORE_LABEL {
                    *d = T::zero();
                    continue;
                }
                let c = (y - 1) as usize;
                let onehot = if c == ch { T::one() } else { T::zero() };
                *d = scale * weights[c] * (*d - onehot);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn conv_all_ones_padded() {
        let x = t([1, 1, 3, 3], vec![1.0; 9]);
        let w = t([1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn([2, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let w = t([1, 1, 1, 1], vec![1.0]);
        assert_eq!(conv2d_forward(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let x = Tensor::<f64>::zeros([1, 2, 7, 6]);
        let w = Tensor::<f64>::zeros([3, 2, 3, 3]);
        let y = conv2d_forward(&x, &w, Some(&[0.0; 3]), 2, 1).unwrap();
        assert_eq!(y.shape(), [1, 3, 4, 3]);
        let bad = Tensor::<f64>::zeros([3, 5, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &bad, None, 1, 1), Err(Error::Shape(_))));
        assert!(conv2d_forward(&x, &w, Some(&[0.0; 2]), 1, 1).is_err());
    }

    #[test]
    fn pool_max_and_tie_break() {
        let x = t([1, 1, 2, 4], vec![1.0, 2.0, 5.0, 5.0, 3.0, 4.0, 5.0, 5.0]);
        let (y, idx) = maxpool_with_indices(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
        // (1,1) of the first window, (0,0) of the constant second window.
        assert_eq!(idx.offsets(), &[5, 2]);
        assert!(maxpool_with_indices(&Tensor::<f64>::zeros([1, 1, 3, 4]), 2, 2).is_err());
    }

    #[test]
    fn unpool_places_maxima() {
        let x = t([1, 1, 2, 4], vec![1.0, 2.0, 5.0, 5.0, 3.0, 4.0, 5.0, 5.0]);
        let (y, idx) = maxpool_with_indices(&x, 2, 2).unwrap();
        let u = unpool_by_indices(&y, &idx, x.shape()).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 5.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        let z = unpool_by_indices(&Tensor::<f64>::zeros(y.shape()), &idx, x.shape()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpool_rejects_corrupt_indices() {
        let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
        let (y, mut idx) = maxpool_with_indices(&x, 2, 2).unwrap();
        idx.set_offset(0, 15);
        assert!(matches!(
            unpool_by_indices(&y, &idx, x.shape()),
            Err(Error::CorruptIndices { .. })
        ));
        assert!(unpool_by_indices(&y, &idx, [1, 1, 8, 8]).is_err());
    }

    #[test]
    fn tconv_single_pixel_stamps_kernel() {
        let x = t([1, 1, 1, 1], vec![1.0]);
        let w = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = transposed_conv_forward(&x, &w, 2).unwrap();
        assert_eq!(y.data(), w.data());
        let y = transposed_conv_forward(&Tensor::<f64>::zeros([1, 1, 3, 2]), &w, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 6, 4]);
        assert!(transposed_conv_forward(&Tensor::<f64>::zeros([1, 2, 3, 2]), &w, 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn([2, 5, 3, 3], |i| ((i * 37) % 11) as f64 - 5.0);
        let p = softmax_channels(&x);
        for b in 0..2 {
            for i in 0..9 {
                let s: f64 = (0..5).map(|c| p.plane(b, c)[i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let k = 4;
        let probs = Tensor::from_fn([1, k, 2, 3], |_| 0.25f64);
        let labels = vec![1, 2, 3, 4, 1, 2];
        let out = weighted_cross_entropy(&probs, &labels, &[1.0; 4]).unwrap();
        assert!((out.loss - 6.0 * (4f64).ln()).abs() < 1e-12);

        let onehot = Tensor::from_fn([1, 2, 1, 2], |i| if i == 0 || i == 3 { 1.0f64 } else { 0.0 });
        let out = weighted_cross_entropy(&onehot, &[1, 2], &[1.0, 1.0]).unwrap();
        assert_eq!(out.loss, 0.0);

        let zero = weighted_cross_entropy(&onehot, &[2, 1], &[1.0, 1.0]).unwrap();
        assert_eq!(zero.clamped, 2);
        assert!((zero.loss - 2.0 * -(LOG_CLAMP.ln())).abs() < 1e-9);

        assert!(weighted_cross_entropy(&onehot, &[3, 1], &[1.0, 1.0]).is_err());
        let ignored = weighted_cross_entropy(&onehot, &[0, 0], &[1.0, 1.0]).unwrap();
        assert_eq!((ignored.loss, ignored.counted), (0.0, 0));
    }
}
