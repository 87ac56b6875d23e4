//! Raw buffer kernels shared by the differentiable ops: im2col/col2im for
//! channels-last convolutions and axis reductions.

use crate::tensor::Scalar;

/// Geometry of a 2-D convolution over NHWC buffers.
///
/// `(h, w, c)` is the image side (the input of a convolution, the output of a
/// transposed convolution); `(ho, wo)` is the patch grid it is unfolded into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Grid extent for a convolution over `size` pixels, or `None` when the
    /// kernel does not fit.
    pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if padded < k || stride == 0 {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    /// Image extent produced by a transposed convolution over `grid` cells.
    pub fn transpose_extent(grid: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        ((grid - 1) * stride + k).checked_sub(2 * pad).filter(|&e| e > 0)
    }

    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }
}

/// Unfolds `x` (n, h, w, c) into rows of (kh, kw, c) patches, zero padded.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    let mut row = 0;
    for n in 0..g.n {
        let img = &x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        let off = (ky * g.kw + kx) * g.c;
                        dst[off..off + g.c].copy_from_slice(&img[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image, summing
/// overlaps.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.c];
    let mut row = 0;
    for n in 0..g.n {
        let img = &mut x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.c;
                        let off = (ky * g.kw + kx) * g.c;
                        for (d, &s) in img[dst..dst + g.c].iter_mut().zip(&src[off..off + g.c]) {
                            *d = *d + s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// Output shape after removing `axes` and, for every input element, the flat
/// index of the output element it reduces into.
pub fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    // Output stride contributed by each input axis (0 for reduced axes).
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            strides[i] = acc;
            acc *= shape[i];
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut out = 0usize;
    for _ in 0..numel {
        map.push(out);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            out += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}
