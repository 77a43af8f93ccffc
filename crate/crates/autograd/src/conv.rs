//! im2col-based 2-D convolution kernels. All kernels are square, padding is
//! zero-valued, and every batch item is processed independently so results do
//! not depend on how work is scheduled across threads.

use rayon::prelude::*;

use crate::tensor::Float;

/// Spatial geometry of a strided square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// Geometry for a convolution reading a `channels×height×width` input.
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kernel || pw < kernel {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (ph - kernel) / stride + 1,
            out_width: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im<T: Float>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x` is `[n, C, H, W]`, `w` is `[O, C, k, k]`.
/// Returns the output `[n, O, Ho, Wo]` and, when `keep_cols`, the per-item
/// im2col buffers for reuse in the backward pass.
pub fn conv2d_forward<T: Float>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
    keep_cols: bool,
) -> (Vec<T>, Vec<Vec<T>>) {
    let in_len = g.in_len();
    let out_len = out_channels * g.col_cols();
    let mut out = vec![T::zero(); n * out_len];
    let cols: Vec<Vec<T>> = out
        .par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .map(|(y, xi)| {
            let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
            im2col(xi, g, &mut col);
            T::gemm(
                out_channels,
                g.col_rows(),
                g.col_cols(),
                w,
                false,
                &col,
                false,
                y,
                false,
            );
            if let Some(b) = bias {
                for (o, row) in y.chunks_mut(g.col_cols()).enumerate() {
                    for v in row {
                        *v = *v + b[o];
                    }
                }
            }
            if keep_cols {
                col
            } else {
                Vec::new()
            }
        })
        .collect();
    (out, cols)
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw, db)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    dy: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    out_channels: usize,
    cols: &[Vec<T>],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let out_len = out_channels * g.col_cols();
    let wlen = out_channels * g.col_rows();
    let per_item: Vec<(Vec<T>, Vec<T>)> = dy
        .par_chunks(out_len)
        .zip(cols.par_iter())
        .map(|(dyi, col)| {
            let mut dx = Vec::new();
            if need_dx {
                let mut dcol = vec![T::zero(); g.col_rows() * g.col_cols()];
                T::gemm(
                    g.col_rows(),
                    out_channels,
                    g.col_cols(),
                    w,
                    true,
                    dyi,
                    false,
                    &mut dcol,
                    false,
                );
                dx = vec![T::zero(); g.in_len()];
                col2im(&dcol, g, &mut dx);
            }
            let mut dw = Vec::new();
            if need_dw {
                dw = vec![T::zero(); wlen];
                T::gemm(
                    out_channels,
                    g.col_cols(),
                    g.col_rows(),
                    dyi,
                    false,
                    col,
                    true,
                    &mut dw,
                    false,
                );
            }
            (dx, dw)
        })
        .collect();
    let mut db = vec![T::zero(); out_channels];
    for dyi in dy.chunks(out_len) {
        for (o, row) in dyi.chunks(g.col_cols()).enumerate() {
            db[o] = db[o] + row.iter().copied().sum::<T>();
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(n * g.in_len());
        for (item, _) in &per_item {
            dx.extend_from_slice(item);
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); wlen];
        for (_, item) in &per_item {
            for (a, &b) in acc.iter_mut().zip(item) {
                *a = *a + b;
            }
        }
        acc
    });
    (dx, dw, db)
}

/// Transposed convolution. `x` is `[n, Cin, H, W]`, `w` is `[Cin, Cout, k, k]`.
/// `g` describes the *adjoint* convolution: input `Cout×Ho×Wo` (the
/// transposed-conv output) and output `H×W` (the transposed-conv input).
pub fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    n: usize,
    in_channels: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = in_channels * g.col_cols();
    let out_len = g.in_len();
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(y, xi)| {
            let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
            T::gemm(
                g.col_rows(),
                in_channels,
                g.col_cols(),
                w,
                true,
                xi,
                false,
                &mut col,
                false,
            );
            col2im(&col, g, y);
            if let Some(b) = bias {
                let plane = g.height * g.width;
                for (o, row) in y.chunks_mut(plane).enumerate() {
                    for v in row {
                        *v = *v + b[o];
                    }
                }
            }
        });
    out
}

/// Gradients of [`conv_transpose2d_forward`]. Returns `(dx, dw, db)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Float>(
    dy: &[T],
    x: &[T],
    n: usize,
    in_channels: usize,
    g: &ConvGeom,
    w: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let in_len = in_channels * g.col_cols();
    let out_len = g.in_len();
    let wlen = in_channels * g.col_rows();
    let per_item: Vec<(Vec<T>, Vec<T>)> = dy
        .par_chunks(out_len)
        .zip(x.par_chunks(in_len))
        .map(|(dyi, xi)| {
            let mut dcol = vec![T::zero(); g.col_rows() * g.col_cols()];
            im2col(dyi, g, &mut dcol);
            let mut dx = Vec::new();
            if need_dx {
                dx = vec![T::zero(); in_len];
                T::gemm(
                    in_channels,
                    g.col_rows(),
                    g.col_cols(),
                    w,
                    false,
                    &dcol,
                    false,
                    &mut dx,
                    false,
                );
            }
            let mut dw = Vec::new();
            if need_dw {
                dw = vec![T::zero(); wlen];
                T::gemm(
                    in_channels,
                    g.col_cols(),
                    g.col_rows(),
                    xi,
                    false,
                    &dcol,
                    true,
                    &mut dw,
                    false,
                );
            }
            (dx, dw)
        })
        .collect();
    let plane = g.height * g.width;
    let mut db = vec![T::zero(); g.channels];
    for dyi in dy.chunks(out_len) {
        for (o, row) in dyi.chunks(plane).enumerate() {
            db[o] = db[o] + row.iter().copied().sum::<T>();
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(n * in_len);
        for (item, _) in &per_item {
            dx.extend_from_slice(item);
        }
        dx
    });
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); wlen];
        for (_, item) in &per_item {
            for (a, &b) in acc.iter_mut().zip(item) {
                *a = *a + b;
            }
        }
        acc
    });
    (dx, dw, db)
}
