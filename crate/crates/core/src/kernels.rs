//! Raw numeric kernels on row-major slices. No shape checking happens here;
//! callers in `autodiff` validate geometry first.

use crate::tensor::Real;

/// Geometry shared by a convolution, its transpose, and its kernel gradient.
///
/// The "image side" is `c_in × h × w`; the "feature side" is `c_out × oh × ow`.
/// `conv2d` maps image side to feature side, `conv2d_transpose` maps back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn image_shape(&self) -> [usize; 3] {
        [self.c_in, self.h, self.w]
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        [self.c_out, self.oh, self.ow]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    let s = stride as isize;
    // need o*s >= pad - k and o*s <= len - 1 + pad - k
    let lo_num = pad - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    let hi_num = len as isize - 1 + pad - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Patch matrix of `x`: row `(c, ki, kj)` holds the input value seen by every
/// output position, zero where the kernel overlaps padding.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * n];
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy0, oy1) = valid_range(ki, g.pad, g.stride, g.h, g.oh);
            for kj in 0..g.kw {
                let (ox0, ox1) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ki - g.pad;
                    let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = ox0 + kj - g.pad;
                        dst[ox0..ox1].copy_from_slice(&xrow[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = xrow[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image, summing overlaps.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.oh * g.ow;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy0, oy1) = valid_range(ki, g.pad, g.stride, g.h, g.oh);
            for kj in 0..g.kw {
                let (ox0, ox1) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let xrow = &mut xc[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        xrow[ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
    x
}

/// Dot product with eight independent partial sums, combined in a fixed order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Cross-correlation with zero padding: image side -> feature side.
pub fn conv2d<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let ckk = g.c_in * g.kh * g.kw;
    matmul(k, &im2col(x, g), g.c_out, ckk, g.oh * g.ow)
}

/// Adjoint of [`conv2d`] with respect to its input: feature side -> image side.
pub fn conv2d_transpose<T: Real>(y: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let ckk = g.c_in * g.kh * g.kw;
    let kt = transpose(k, g.c_out, ckk);
    col2im(&matmul(&kt, y, ckk, g.c_out, g.oh * g.ow), g)
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_kernel_grad<T: Real>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.oh * g.ow;
    let ckk = g.c_in * g.kh * g.kw;
    let cols = im2col(x, g);
    let mut k = vec![T::zero(); g.c_out * ckk];
    for o in 0..g.c_out {
        let gyo = &gy[o * n..(o + 1) * n];
        for r in 0..ckk {
            k[o * ckk + r] = dot(gyo, &cols[r * n..(r + 1) * n]);
        }
    }
    k
}
