//! im2col convolution kernels over `[N, H, W, C]` activations with
//! `[kh, kw, Cin, Cout]` weights.

use super::tensor::Scalar;

/// Kernel size, stride and per-side zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, padding: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            stride_h: stride,
            stride_w: stride,
            pad_top: padding,
            pad_bottom: padding,
            pad_left: padding,
            pad_right: padding,
        }
    }

    /// Height-1 kernel for 1-D convolution along the width axis.
    pub fn along_width(k: usize, stride: usize, pad_left: usize, pad_right: usize) -> Self {
        Self {
            kh: 1,
            kw: k,
            stride_h: 1,
            stride_w: stride,
            pad_top: 0,
            pad_bottom: 0,
            pad_left,
            pad_right,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + self.pad_top + self.pad_bottom;
        let pw = w + self.pad_left + self.pad_right;
        if ph < self.kh || pw < self.kw || self.stride_h == 0 || self.stride_w == 0 {
            return None;
        }
        Some(((ph - self.kh) / self.stride_h + 1, (pw - self.kw) / self.stride_w + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.stride_h == 1
            && self.stride_w == 1
            && self.pad_top + self.pad_bottom + self.pad_left + self.pad_right == 0
    }
}

/// Input pixel feeding output `(oy, ox)` at kernel tap `(ky, kx)`, if inside
/// the unpadded image.
#[inline]
fn source(g: &ConvGeom, h: usize, w: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
    let y = (oy * g.stride_h + ky).checked_sub(g.pad_top)?;
    let x = (ox * g.stride_w + kx).checked_sub(g.pad_left)?;
    (y < h && x < w).then_some((y, x))
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, cin: usize, g: &ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let row_len = g.kh * g.kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * row_len..][..row_len];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * cin..][..cin];
                    match source(g, h, w, oy, ox, ky, kx) {
                        Some((y, xx)) => dst.copy_from_slice(&x[(y * w + xx) * cin..][..cin]),
                        None => dst.fill(T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], h: usize, w: usize, cin: usize, g: &ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let row_len = g.kh * g.kw * cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * row_len..][..row_len];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, xx)) = source(g, h, w, oy, ox, ky, kx) {
                        let src = &row[(ky * g.kw + kx) * cin..][..cin];
                        let dst = &mut dx[(y * w + xx) * cin..][..cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Dimensions of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_forward<T: Scalar>(s: &ConvShape, g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let kk = g.kh * g.kw * s.cin;
    let p = s.ho * s.wo;
    let mut out = Vec::with_capacity(s.n * p * s.cout);
    for _ in 0..s.n * p {
        out.extend_from_slice(bias);
    }
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); p * kk] };
    for b in 0..s.n {
        let xb = &x[b * s.h * s.w * s.cin..][..s.h * s.w * s.cin];
        let a: &[T] = if pointwise {
            xb
        } else {
            im2col(xb, s.h, s.w, s.cin, g, s.ho, s.wo, &mut cols);
            &cols
        };
        let ob = &mut out[b * p * s.cout..][..p * s.cout];
        T::gemm(p, kk, s.cout, a, kk, 1, weight, s.cout, 1, T::one(), ob);
    }
    out
}

/// Accumulates weight and bias gradients, and returns the input gradient
/// when `want_dx` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    s: &ConvShape,
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let kk = g.kh * g.kw * s.cin;
    let p = s.ho * s.wo;
    if let Some(db) = dbias {
        for row in dy.chunks_exact(s.cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
    }
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); p * kk] };
    if let Some(dw) = dweight {
        for b in 0..s.n {
            let xb = &x[b * s.h * s.w * s.cin..][..s.h * s.w * s.cin];
            let a: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, s.h, s.w, s.cin, g, s.ho, s.wo, &mut cols);
                &cols
            };
            let dyb = &dy[b * p * s.cout..][..p * s.cout];
            // dW[kk x cout] += cols^T [kk x p] * dy [p x cout]
            T::gemm(kk, p, s.cout, a, 1, kk, dyb, s.cout, 1, T::one(), dw);
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); s.n * s.h * s.w * s.cin];
    for b in 0..s.n {
        let dyb = &dy[b * p * s.cout..][..p * s.cout];
        let dxb = &mut dx[b * s.h * s.w * s.cin..][..s.h * s.w * s.cin];
        if pointwise {
            // dx [p x cin] = dy [p x cout] * W^T [cout x cin]
            T::gemm(p, s.cout, kk, dyb, s.cout, 1, weight, 1, s.cout, T::zero(), dxb);
        } else {
            T::gemm(p, s.cout, kk, dyb, s.cout, 1, weight, 1, s.cout, T::zero(), &mut cols);
            col2im_add(&cols, s.h, s.w, s.cin, g, s.ho, s.wo, dxb);
        }
    }
    Some(dx)
}
