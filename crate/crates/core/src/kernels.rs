//! Forward and backward numeric kernels on raw slices.
//!
//! Every kernel here is single-threaded and sums in a fixed order, so
//! repeated calls on the same inputs give bit-identical results.

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` m×k and `b` k×n.
/// `a_t`/`b_t` mean the operand is stored transposed (k×m, n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // elements of slices whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a strided window sweep, or `None` if the window does
/// not fit in the padded input.
pub fn window_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub n: usize,
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
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_spatial(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, unpadded: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &Conv2dGeom, x: &[f64], col: &mut [f64]) {
    let spatial = g.out_spatial();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &Conv2dGeom, col: &[f64], dx: &mut [f64]) {
    let spatial = g.out_spatial();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * spatial..(row + 1) * spatial];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (N×C×H×W) with `kernel` (C_out×C×k×k).
pub(crate) fn conv2d_forward(g: &Conv2dGeom, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let spatial = g.out_spatial();
    let mut out = vec![0.0; g.n * g.c_out * spatial];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * spatial]
    };
    for s in 0..g.n {
        let xs = &x[s * g.in_plane()..(s + 1) * g.in_plane()];
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        let os = &mut out[s * g.c_out * spatial..(s + 1) * g.c_out * spatial];
        gemm(g.c_out, g.patch(), spatial, kernel, false, cols, false, os, false);
        if let Some(b) = bias {
            for (co, row) in os.chunks_exact_mut(spatial).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub(crate) struct Conv2dGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

/// Gradients of `conv2d_forward` given the upstream gradient `dout`.
/// Per-sample contributions to the kernel and bias are summed in sample order.
pub(crate) fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dkernel: bool,
    want_dbias: bool,
) -> Conv2dGrads {
    let spatial = g.out_spatial();
    let patch = g.patch();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dkernel = want_dkernel.then(|| vec![0.0; kernel.len()]);
    let mut dbias = want_dbias.then(|| vec![0.0; g.c_out]);
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { patch * spatial }];
    let mut dcol = vec![0.0; if want_dx && !g.is_pointwise() { patch * spatial } else { 0 }];

    for s in 0..g.n {
        let ds = &dout[s * g.c_out * spatial..(s + 1) * g.c_out * spatial];
        if let Some(db) = dbias.as_mut() {
            for (co, row) in ds.chunks_exact(spatial).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        let in_range = s * g.in_plane()..(s + 1) * g.in_plane();
        if let Some(dk) = dkernel.as_mut() {
            let xs = &x[in_range.clone()];
            let cols: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            gemm(g.c_out, spatial, patch, ds, false, cols, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[in_range];
            if g.is_pointwise() {
                gemm(patch, g.c_out, spatial, kernel, true, ds, false, dxs, true);
            } else {
                gemm(patch, g.c_out, spatial, kernel, true, ds, false, &mut dcol, false);
                col2im_add(g, &dcol, dxs);
            }
        }
    }
    Conv2dGrads { dx, dkernel, dbias }
}

/// Length-preserving 1-D cross-correlation along the last axis of an N×L input.
pub(crate) fn conv1d_forward(x: &[f64], len: usize, kernel: &[f64]) -> Vec<f64> {
    let half = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
        for (l, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let idx = l as isize + j as isize - half;
                if idx >= 0 && (idx as usize) < len {
                    acc += row[idx as usize] * kv;
                }
            }
            *o = acc;
        }
    }
    out
}

pub(crate) fn conv1d_backward(x: &[f64], len: usize, kernel: &[f64], dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let half = (kernel.len() / 2) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for ((row, drow), dxrow) in x
        .chunks_exact(len)
        .zip(dout.chunks_exact(len))
        .zip(dx.chunks_exact_mut(len))
    {
        for (l, d) in drow.iter().enumerate() {
            for (j, kv) in kernel.iter().enumerate() {
                let idx = l as isize + j as isize - half;
                if idx >= 0 && (idx as usize) < len {
                    dk[j] += row[idx as usize] * d;
                    dxrow[idx as usize] += kv * d;
                }
            }
        }
    }
    (dx, dk)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Windowed maximum with padding treated as negative infinity. Returns the
/// output and, per output element, the flat input index that won; ties go
/// to the first element in row-major window order.
pub(crate) fn maxpool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let out_len = g.planes * g.h_out * g.w_out;
    let mut out = Vec::with_capacity(out_len);
    let mut arg = Vec::with_capacity(out_len);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..g.k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}
