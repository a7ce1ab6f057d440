//! Convolution kernels on raw NCHW buffers.

use crate::scalar::{matmul, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for ci in 0..g.in_channels {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for ci in 0..g.in_channels {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y[b] = W · im2col(x[b]) + bias`. `w` is `(Co, Ci, k, k)`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * oh * ow;
    let rows = g.col_rows();
    let mut y = vec![T::zero(); batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * oh * ow]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * out_len..(b + 1) * out_len];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        matmul(g.out_channels, rows, oh * ow, w, false, src, false, yb, false);
        if let Some(bias) = bias {
            for (co, plane) in yb.chunks_mut(oh * ow).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]: returns `(dx, dw, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * oh * ow;
    let rows = g.col_rows();
    let mut dx = if need_dx {
        vec![T::zero(); batch * in_len]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.out_channels];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * oh * ow }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { rows * oh * ow } else { 0 }];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        for (co, plane) in dyb.chunks(oh * ow).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        matmul(g.out_channels, oh * ow, rows, dyb, false, src, true, &mut dw, true);
        if need_dx {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                matmul(rows, g.out_channels, oh * ow, w, true, dyb, false, dxb, true);
            } else {
                matmul(rows, g.out_channels, oh * ow, w, true, dyb, false, &mut dcols, false);
                col2im(g, &dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 stride-2 transposed convolution. `w` is `(Ci, Co, 2, 2)`.
pub fn conv_t2x2_forward<T: Scalar>(
    batch: usize,
    ci: usize,
    co: usize,
    h: usize,
    w_: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = h * w_;
    let (oh, ow) = (2 * h, 2 * w_);
    let mut y = vec![T::zero(); batch * co * oh * ow];
    let mut tmp = vec![T::zero(); co * 4 * hw];
    for b in 0..batch {
        let xb = &x[b * ci * hw..(b + 1) * ci * hw];
        // tmp (Co·4 × HW) = Wᵀ (Co·4 × Ci) · X (Ci × HW)
        matmul(co * 4, ci, hw, w, true, xb, false, &mut tmp, false);
        let yb = &mut y[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            let bv = bias.map_or(T::zero(), |bs| bs[o]);
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                let src = &tmp[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..w_ {
                        yb[o * oh * ow + (2 * i + di) * ow + 2 * j + dj] = src[i * w_ + j] + bv;
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t2x2_backward<T: Scalar>(
    batch: usize,
    ci: usize,
    co: usize,
    h: usize,
    w_: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = h * w_;
    let (oh, ow) = (2 * h, 2 * w_);
    let mut dx = if need_dx {
        vec![T::zero(); batch * ci * hw]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); co];
    let mut gathered = vec![T::zero(); co * 4 * hw];
    for b in 0..batch {
        let dyb = &dy[b * co * oh * ow..(b + 1) * co * oh * ow];
        for o in 0..co {
            db[o] += dyb[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum::<T>();
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                let dst = &mut gathered[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..w_ {
                        dst[i * w_ + j] = dyb[o * oh * ow + (2 * i + di) * ow + 2 * j + dj];
                    }
                }
            }
        }
        let xb = &x[b * ci * hw..(b + 1) * ci * hw];
        // dW (Ci × Co·4) += X (Ci × HW) · Gᵀ (HW × Co·4)
        matmul(ci, hw, co * 4, xb, false, &gathered, true, &mut dw, true);
        if need_dx {
            let dxb = &mut dx[b * ci * hw..(b + 1) * ci * hw];
            matmul(ci, co * 4, hw, w, false, &gathered, false, dxb, false);
        }
    }
    (dx, dw, db)
}
