//! Slice-level numeric kernels used by the tape ops: matrix products (on
//! `matrixmultiply`) and im2col convolution with its adjoints.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m x p] += a[m x n] * b[n x p]`.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * p);
    gemm_strided(View::rows(a, n), View::rows(b, p), c, m, n, p);
}

/// `c[n x p] += a[m x n]^T * b[m x p]`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * p);
    debug_assert_eq!(c.len(), n * p);
    gemm_strided(View::cols(a, n), View::rows(b, p), c, n, m, p);
}

/// `c[m x n] += a[m x p] * b[n x p]^T`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(c.len(), m * n);
    gemm_strided(View::rows(a, p), View::cols(b, p), c, m, p, n);
}

/// A matrix over a slice: element `(i, j)` is `data[i * si + j * sj]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    si: usize,
    sj: usize,
}

impl<'a> View<'a> {
    /// Row-major with `width` columns.
    fn rows(data: &'a [f64], width: usize) -> Self {
        View { data, si: width, sj: 1 }
    }

    /// Transpose of a row-major matrix with `width` columns.
    fn cols(data: &'a [f64], width: usize) -> Self {
        View { data, si: 1, sj: width }
    }

    /// Largest index touched by a `rows x cols` block, if any.
    fn last(&self, rows: usize, cols: usize) -> Option<usize> {
        (rows > 0 && cols > 0).then(|| (rows - 1) * self.si + (cols - 1) * self.sj)
    }
}

/// `c[rows x p] += a[rows x k] * b[k x p]`, row-major `c`.
fn gemm_strided(a: View, b: View, c: &mut [f64], rows: usize, k: usize, p: usize) {
    if rows == 0 || p == 0 {
        return;
    }
    assert!(c.len() >= rows * p);
    if let Some(i) = a.last(rows, k) {
        assert!(i < a.data.len());
    }
    if let Some(i) = b.last(k, p) {
        assert!(i < b.data.len());
    }
    // SAFETY: every index dgemm reads or writes was bounds-checked above,
    // and `c` cannot alias `a` or `b` since it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            p,
            1.0,
            a.data.as_ptr(),
            a.si as isize,
            a.sj as isize,
            b.data.as_ptr(),
            b.si as isize,
            b.sj as isize,
            1.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

#[inline]
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Dot product with eight fixed partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a same-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds `input[c_in x h x w]` into `[c_in*k*k x h*w]` with zero padding.
pub fn im2col(input: &[f64], g: ConvGeom) -> Vec<f64> {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; g.rows() * hw];
    for ci in 0..g.c_in {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut cols[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        dst_row[x] = src_row[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `dinput`.
pub fn col2im_acc(cols: &[f64], g: ConvGeom, dinput: &mut [f64]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..g.c_in {
        let plane = &mut dinput[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &cols[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                    for x in x0..x1 {
                        dst_row[(x as isize + dx) as usize] += src_row[x];
                    }
                }
            }
        }
    }
}

/// Same-padded cross-correlation. Returns the output and the unfolded input
/// (needed for the kernel gradient).
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    extra_bias: Option<&[f64]>,
    g: ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let hw = g.positions();
    let cols = im2col(input, g);
    let mut out = match extra_bias {
        Some(e) => e.to_vec(),
        None => vec![0.0; g.c_out * hw],
    };
    for (co, b) in bias.iter().enumerate() {
        for v in &mut out[co * hw..(co + 1) * hw] {
            *v += b;
        }
    }
    gemm_acc(kernel, &cols, &mut out, g.c_out, g.rows(), hw);
    (out, cols)
}

/// Kernel gradient: `dkernel += dout * cols^T`.
pub fn conv2d_backward_kernel(dout: &[f64], cols: &[f64], g: ConvGeom, dkernel: &mut [f64]) {
    gemm_nt_acc(dout, cols, dkernel, g.c_out, g.rows(), g.positions());
}

/// Input gradient: `dinput += col2im(kernel^T * dout)`.
pub fn conv2d_backward_input(dout: &[f64], kernel: &[f64], g: ConvGeom, dinput: &mut [f64]) {
    let mut dcols = vec![0.0; g.rows() * g.positions()];
    gemm_tn_acc(kernel, dout, &mut dcols, g.c_out, g.rows(), g.positions());
    col2im_acc(&dcols, g, dinput);
}

/// Geometry of a convolution over `(time, height, width)` that is valid in
/// time and same-padded in space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub t: usize,
    pub kt: usize,
    pub plane: ConvGeom,
}

impl Conv3dGeom {
    pub fn t_out(&self) -> usize {
        self.t + 1 - self.kt
    }
}

/// The `[c_out x c_in x k x k]` slice of a `[c_out x c_in x kt x k x k]`
/// kernel at temporal offset `tau`.
pub fn kernel3d_slice(kernel: &[f64], g: Conv3dGeom, tau: usize) -> Vec<f64> {
    let kk = g.plane.k * g.plane.k;
    let mut out = Vec::with_capacity(g.plane.c_out * g.plane.c_in * kk);
    for co in 0..g.plane.c_out {
        for ci in 0..g.plane.c_in {
            let base = ((co * g.plane.c_in + ci) * g.kt + tau) * kk;
            out.extend_from_slice(&kernel[base..base + kk]);
        }
    }
    out
}

fn kernel3d_scatter_acc(slice: &[f64], g: Conv3dGeom, tau: usize, kernel: &mut [f64]) {
    let kk = g.plane.k * g.plane.k;
    for co in 0..g.plane.c_out {
        for ci in 0..g.plane.c_in {
            let base = ((co * g.plane.c_in + ci) * g.kt + tau) * kk;
            let src = ((co * g.plane.c_in) + ci) * kk;
            for j in 0..kk {
                kernel[base + j] += slice[src + j];
            }
        }
    }
}

pub fn conv3d_forward(input: &[f64], kernel: &[f64], bias: &[f64], g: Conv3dGeom) -> Vec<f64> {
    let frame_in = g.plane.c_in * g.plane.positions();
    let frame_out = g.plane.c_out * g.plane.positions();
    let mut out = vec![0.0; g.t_out() * frame_out];
    let hw = g.plane.positions();
    for t in 0..g.t_out() {
        let dst = &mut out[t * frame_out..(t + 1) * frame_out];
        for (co, b) in bias.iter().enumerate() {
            dst[co * hw..(co + 1) * hw].fill(*b);
        }
    }
    for tau in 0..g.kt {
        let ks = kernel3d_slice(kernel, g, tau);
        for t in 0..g.t_out() {
            let src = &input[(t + tau) * frame_in..(t + tau + 1) * frame_in];
            let cols = im2col(src, g.plane);
            let dst = &mut out[t * frame_out..(t + 1) * frame_out];
            gemm_acc(&ks, &cols, dst, g.plane.c_out, g.plane.rows(), hw);
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients of [`conv3d_forward`].
pub fn conv3d_backward(
    dout: &[f64],
    input: &[f64],
    kernel: &[f64],
    g: Conv3dGeom,
    mut dinput: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let frame_in = g.plane.c_in * g.plane.positions();
    let frame_out = g.plane.c_out * g.plane.positions();
    let hw = g.plane.positions();
    if let Some(db) = dbias.as_deref_mut() {
        for t in 0..g.t_out() {
            for (co, d) in db.iter_mut().enumerate() {
                let base = t * frame_out + co * hw;
                *d += dout[base..base + hw].iter().sum::<f64>();
            }
        }
    }
    for tau in 0..g.kt {
        let ks = kernel3d_slice(kernel, g, tau);
        let mut dks = vec![0.0; ks.len()];
        for t in 0..g.t_out() {
            let go = &dout[t * frame_out..(t + 1) * frame_out];
            if dkernel.is_some() {
                let src = &input[(t + tau) * frame_in..(t + tau + 1) * frame_in];
                let cols = im2col(src, g.plane);
                conv2d_backward_kernel(go, &cols, g.plane, &mut dks);
            }
            if let Some(di) = dinput.as_deref_mut() {
                let dst = &mut di[(t + tau) * frame_in..(t + tau + 1) * frame_in];
                conv2d_backward_input(go, &ks, g.plane, dst);
            }
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            kernel3d_scatter_acc(&dks, g, tau, dk);
        }
    }
}
