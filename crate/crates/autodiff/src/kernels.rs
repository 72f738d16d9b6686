//! Dense numeric kernels behind the graph primitives.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out() * self.w_out()
    }

    pub fn cols_len(&self) -> usize {
        self.patch() * self.positions()
    }
}

/// `c = a·b + beta·c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the strides describe in-bounds views: `a` is m×k, `b` is k×n,
    // `c` is m×n row-major, as checked by the callers' shape contracts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold `x` into a `[c_in·k·k, h_out·w_out]` column matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let p = ho * wo;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let p = ho * wo;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, cols: &[f64], w: &[f64], b: Option<&[f64]>, out: &mut [f64]) {
    let (pk, p) = (g.patch(), g.positions());
    gemm(g.c_out, pk, p, w, (pk, 1), cols, (p, 1), out, 0.0);
    if let Some(b) = b {
        for (co, bias) in b.iter().enumerate() {
            out[co * p..(co + 1) * p].iter_mut().for_each(|y| *y += bias);
        }
    }
}

pub(crate) fn conv_backward_filters(g: &ConvGeom, cols: &[f64], up: &[f64], dw: &mut [f64]) {
    let (pk, p) = (g.patch(), g.positions());
    // dW = dY · colsᵀ
    gemm(g.c_out, p, pk, up, (p, 1), cols, (1, p), dw, 1.0);
}

pub(crate) fn conv_backward_bias(g: &ConvGeom, up: &[f64], db: &mut [f64]) {
    let p = g.positions();
    for (co, d) in db.iter_mut().enumerate() {
        *d += up[co * p..(co + 1) * p].iter().sum::<f64>();
    }
}

pub(crate) fn conv_backward_input(g: &ConvGeom, w: &[f64], up: &[f64], dx: &mut [f64]) {
    let (pk, p) = (g.patch(), g.positions());
    let mut dcols = vec![0.0; pk * p];
    // dcols = Wᵀ · dY
    gemm(pk, g.c_out, p, w, (1, pk), up, (p, 1), &mut dcols, 0.0);
    col2im_add(g, &dcols, dx);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Element-wise binary op where either operand may be a single element.
pub(crate) fn zip_bcast(a: &[f64], b: &[f64], out: &mut [f64], f: impl Fn(f64, f64) -> f64) {
    let n = out.len();
    for (k, o) in out.iter_mut().enumerate().take(n) {
        let x = if a.len() == 1 { a[0] } else { a[k] };
        let y = if b.len() == 1 { b[0] } else { b[k] };
        *o = f(x, y);
    }
}

/// Accumulate `f(up[k], k)` into `g`, summing everything when `g` is a
/// broadcast single element.
pub(crate) fn acc_bcast(g: &mut [f64], up: &[f64], f: impl Fn(f64, usize) -> f64) {
    if g.len() == 1 && up.len() != 1 {
        g[0] += up.iter().enumerate().map(|(k, &u)| f(u, k)).sum::<f64>();
    } else {
        for (k, (d, &u)) in g.iter_mut().zip(up).enumerate() {
            *d += f(u, k);
        }
    }
}

/// `(outer, axis_len, inner)` decomposition of a row-major shape.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Strides into `src` for each dim of `dst`, zero where broadcast.
pub(crate) fn broadcast_strides(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let lead = dst.len() - src.len();
    let mut src_strides = vec![0; src.len()];
    let mut acc = 1;
    for d in (0..src.len()).rev() {
        src_strides[d] = acc;
        acc *= src[d];
    }
    let mut out = vec![0; dst.len()];
    for d in 0..src.len() {
        let (s, t) = (src[d], dst[lead + d]);
        if s == t {
            out[lead + d] = if s == 1 { 0 } else { src_strides[d] };
        } else if s == 1 {
            out[lead + d] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Call `f(dst_index, src_index)` for every element of a broadcast.
pub(crate) fn for_each_broadcast(dst: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = dst.iter().product();
    let mut idx = vec![0usize; dst.len()];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < dst[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}
