//! Raw compute kernels behind the recorded operations.
//!
//! Everything here works on row-major slices with explicitly passed extents;
//! shape validation happens in the graph layer before these are called.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm_into, Layout};
use super::Real;

/// Output spatial extent of a cross-correlation, or `None` when the kernel
/// does not fit the padded input.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unfolds `(c, h, w)` into a `(c*k*k) x (out_h*out_w)` patch matrix.
/// Out-of-bounds (padding) taps stay zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ncols = out_h * out_w;
    let mut cols = vec![T::zero(); c * k * k * ncols];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (ci * k + dy) * k + dx;
                let out_row = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + dy) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * out_w..(oy + 1) * out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch-matrix values back into the
/// input layout.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let ncols = out_h * out_w;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx_off in 0..k {
                let row = (ci * k + dy) * k + dx_off;
                let col_row = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..out_h {
                    let iy = (oy * stride + dy) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * out_w..(oy + 1) * out_w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + dx_off) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + g;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass: `kernel (c_out x c_in*k*k) @ im2col`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: &[T],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let cols = im2col(x, c_in, h, w, k, stride, padding, out_h, out_w);
    let ncols = out_h * out_w;
    let mut out = vec![T::zero(); c_out * ncols];
    gemm_into(
        Layout::NotNot,
        c_out,
        c_in * k * k,
        ncols,
        kernel,
        &cols,
        T::zero(),
        T::one(),
        &mut out,
    );
    out
}

/// Pooling window along one dimension: `[floor(i*n/out), ceil((i+1)*n/out))`.
#[inline]
pub fn pool_window(i: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = i * n / out;
    let hi = ((i + 1) * n).div_ceil(out);
    (lo, hi)
}

pub fn adaptive_avg_pool_forward<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..out_h {
            let (lo_h, hi_h) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (lo_w, hi_w) = pool_window(j, w, out_w);
                let mut acc = T::zero();
                for y in lo_h..hi_h {
                    for xi in lo_w..hi_w {
                        acc = acc + plane[y * w + xi];
                    }
                }
                let count = T::from_f64(((hi_h - lo_h) * (hi_w - lo_w)) as f64);
                out[(ci * out_h + i) * out_w + j] = acc / count;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn adaptive_avg_pool_backward<T: Real>(
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for i in 0..out_h {
            let (lo_h, hi_h) = pool_window(i, h, out_h);
            for j in 0..out_w {
                let (lo_w, hi_w) = pool_window(j, w, out_w);
                let count = T::from_f64(((hi_h - lo_h) * (hi_w - lo_w)) as f64);
                let g = gout[(ci * out_h + i) * out_w + j] / count;
                for y in lo_h..hi_h {
                    for xi in lo_w..hi_w {
                        plane[y * w + xi] = plane[y * w + xi] + g;
                    }
                }
            }
        }
    }
}

/// Sub-pixel rearrangement `(c*s^2, h, w) -> (c, s*h, s*w)`.
pub fn pixel_shuffle_forward<T: Copy>(x: &[T], c_out: usize, s: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut out = Vec::with_capacity(c_out * oh * ow);
    for co in 0..c_out {
        for y in 0..oh {
            for xo in 0..ow {
                let ci = co * s * s + (y % s) * s + (xo % s);
                out.push(x[(ci * h + y / s) * w + xo / s]);
            }
        }
    }
    out
}

/// Inverse rearrangement `(c, s*h, s*w) -> (c*s^2, h, w)`.
pub fn pixel_unshuffle_forward<T: Copy>(x: &[T], c: usize, s: usize, oh: usize, ow: usize) -> Vec<T> {
    let (h, w) = (oh / s, ow / s);
    let mut out = vec![x[0]; c * s * s * h * w];
    for ci in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let oc = ci * s * s + dy * s + dx;
                for gy in 0..h {
                    for gx in 0..w {
                        out[(oc * h + gy) * w + gx] = x[(ci * oh + gy * s + dy) * ow + gx * s + dx];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates the gradient of [`pixel_shuffle_forward`] back onto the input.
pub fn pixel_shuffle_backward<T: Real>(gout: &[T], c_out: usize, s: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h * s, w * s);
    let mut idx = 0;
    for co in 0..c_out {
        for y in 0..oh {
            for xo in 0..ow {
                let ci = co * s * s + (y % s) * s + (xo % s);
                let j = (ci * h + y / s) * w + xo / s;
                dx[j] = dx[j] + gout[idx];
                idx += 1;
            }
        }
    }
}

/// Accumulates the gradient of [`pixel_unshuffle_forward`] back onto the input.
pub fn pixel_unshuffle_backward<T: Real>(gout: &[T], c: usize, s: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let (h, w) = (oh / s, ow / s);
    for ci in 0..c {
        for dy in 0..s {
            for dx_off in 0..s {
                let oc = ci * s * s + dy * s + dx_off;
                for gy in 0..h {
                    for gx in 0..w {
                        let j = (ci * oh + gy * s + dy) * ow + gx * s + dx_off;
                        dx[j] = dx[j] + gout[(oc * h + gy) * w + gx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        // floor((33 + 0 - 33)/33) + 1 = 1
        assert_eq!(conv_out_extent(33, 33, 33, 0), Some(1));
        assert_eq!(conv_out_extent(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn pool_windows_cover_input() {
        // 4 -> 2: windows [0,2) and [2,4)
        assert_eq!(pool_window(0, 4, 2), (0, 2));
        assert_eq!(pool_window(1, 4, 2), (2, 4));
        // 5 -> 2: [0,3) and [2,5) overlap by design
        assert_eq!(pool_window(0, 5, 2), (0, 3));
        assert_eq!(pool_window(1, 5, 2), (2, 5));
    }

    #[test]
    fn shuffle_then_unshuffle_is_identity() {
        let x: Vec<f64> = (0..36).map(|v| v as f64).collect(); // 4 x 3 x 3
        let shuffled = pixel_shuffle_forward(&x, 1, 2, 3, 3); // 1 x 6 x 6
        let back = pixel_unshuffle_forward(&shuffled, 1, 2, 6, 6);
        assert_eq!(back, x);
    }
}
