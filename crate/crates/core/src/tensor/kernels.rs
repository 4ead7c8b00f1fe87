//! Raw slice kernels behind the tape operations. Shapes are validated by the
//! callers; everything here assumes consistent dimensions.

use rayon::prelude::*;

use super::Scalar;

/// Minimum slice length addressed by a `rows x cols` strided view.
pub(crate) fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// `a [m x k] * b [k x n]`, both row-major.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    T::gemm(m, k, n, T::ONE, a, k as isize, 1, b, n as isize, 1, T::ZERO, &mut c, n as isize, 1);
    c
}

/// Geometry of a batched 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_image(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &Conv2dGeom) -> Vec<T> {
    let plane = g.out_plane();
    let rows = g.cols_rows();
    let mut out = vec![T::ZERO; g.batch * g.c_out * plane];
    out.par_chunks_mut(g.c_out * plane)
        .enumerate()
        .for_each(|(b, ob)| {
            let xb = &x[b * g.in_image()..(b + 1) * g.in_image()];
            let mut cols = vec![T::ZERO; rows * plane];
            im2col(xb, g, &mut cols);
            for (o, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
            T::gemm(
                g.c_out,
                rows,
                plane,
                T::ONE,
                weight,
                rows as isize,
                1,
                &cols,
                plane as isize,
                1,
                T::ONE,
                ob,
                plane as isize,
                1,
            );
        });
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` is only
/// computed when requested. Per-image weight gradients are reduced in batch
/// order so the result does not depend on the worker count.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &Conv2dGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.out_plane();
    let rows = g.cols_rows();
    let wlen = g.c_out * rows;
    let mut dx = if need_input {
        vec![T::ZERO; g.batch * g.in_image()]
    } else {
        Vec::new()
    };

    let per_image = |b: usize, dxb: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let xb = &x[b * g.in_image()..(b + 1) * g.in_image()];
        let gb = &grad_out[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        let mut cols = vec![T::ZERO; rows * plane];
        im2col(xb, g, &mut cols);
        let mut dw = vec![T::ZERO; wlen];
        // dW = dY * cols^T
        T::gemm(
            g.c_out,
            plane,
            rows,
            T::ONE,
            gb,
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            T::ZERO,
            &mut dw,
            rows as isize,
            1,
        );
        let db: Vec<T> = gb.chunks(plane).map(|c| c.iter().copied().sum()).collect();
        if let Some(dxb) = dxb {
            // dcols = W^T * dY, reusing the column buffer.
            T::gemm(
                rows,
                g.c_out,
                plane,
                T::ONE,
                weight,
                1,
                rows as isize,
                gb,
                plane as isize,
                1,
                T::ZERO,
                &mut cols,
                plane as isize,
                1,
            );
            col2im(&cols, g, dxb);
        }
        (dw, db)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = if need_input {
        dx.par_chunks_mut(g.in_image())
            .enumerate()
            .map(|(b, dxb)| per_image(b, Some(dxb)))
            .collect()
    } else {
        (0..g.batch).into_par_iter().map(|b| per_image(b, None)).collect()
    };

    let mut dw = vec![T::ZERO; wlen];
    let mut db = vec![T::ZERO; g.c_out];
    for (pw, pb) in partials {
        dw.iter_mut().zip(&pw).for_each(|(a, &v)| *a += v);
        db.iter_mut().zip(&pb).for_each(|(a, &v)| *a += v);
    }
    (need_input.then_some(dx), dw, db)
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`. Returns the
/// pooled values and the flat argmax index of each window; ties resolve to
/// the first maximum in row-major order.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Batched 1-D cross-correlation, stride 1, no padding.
/// `x [batch x c_in x len]`, `weight [c_out x c_in x k]`.
pub(crate) fn conv1d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
) -> Vec<T> {
    let lo = len - k + 1;
    let mut out = vec![T::ZERO; batch * c_out * lo];
    for b in 0..batch {
        let xb = &x[b * c_in * len..(b + 1) * c_in * len];
        for o in 0..c_out {
            let dst = &mut out[(b * c_out + o) * lo..(b * c_out + o + 1) * lo];
            dst.fill(bias[o]);
            for c in 0..c_in {
                let xc = &xb[c * len..(c + 1) * len];
                let wk = &weight[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                for (t, d) in dst.iter_mut().enumerate() {
                    let mut acc = T::ZERO;
                    for (j, &wv) in wk.iter().enumerate() {
                        acc += wv * xc[t + j];
                    }
                    *d += acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let lo = len - k + 1;
    let mut dx = vec![T::ZERO; x.len()];
    let mut dw = vec![T::ZERO; weight.len()];
    let mut db = vec![T::ZERO; c_out];
    for b in 0..batch {
        for o in 0..c_out {
            let go = &grad_out[(b * c_out + o) * lo..(b * c_out + o + 1) * lo];
            db[o] += go.iter().copied().sum();
            for c in 0..c_in {
                let xoff = (b * c_in + c) * len;
                let woff = (o * c_in + c) * k;
                for (t, &gv) in go.iter().enumerate() {
                    for j in 0..k {
                        dw[woff + j] += gv * x[xoff + t + j];
                        dx[xoff + t + j] += gv * weight[woff + j];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
