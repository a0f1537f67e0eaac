//! im2col-backed 2-D cross-correlation kernels shared by the tape.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
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

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize, usize),
        c_out: usize,
        kernel_c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, c_in, h, w) = input;
        if k % 2 == 0 {
            return Err(Error::shape(format!("kernel size must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        if kernel_c_in != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels, kernel expects {kernel_c_in}"
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: {k}x{k} kernel with padding {pad} does not fit a {h}x{w} input"
            )));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    /// Rows of the column matrix: `C_in·k·k`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn in_sample(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_sample(&self) -> usize {
        self.c_out * self.out_plane()
    }
}

/// Output columns `ow` whose input column `ow·s + kj − p` lies inside `0..w`.
fn valid_cols(w: usize, w_out: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    let hi = if w + p > kj { (w + p - kj).div_ceil(s).min(w_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `C×H×W` sample into a `(C·k·k) × (H'·W')` column matrix.
pub fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let in_c = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * plane..][..plane];
                let (lo, hi) = valid_cols(g.w, g.w_out, s, kj, p);
                for oh in 0..g.h_out {
                    let dst = &mut row[oh * g.w_out..(oh + 1) * g.w_out];
                    let ih = oh * s + ki;
                    if ih < p || ih - p >= g.h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &in_c[(ih - p) * g.w..(ih - p + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if hi > lo {
                        let first = lo * s + kj - p;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto a sample.
pub fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let plane = g.out_plane();
    for c in 0..g.c_in {
        let in_c = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * plane..][..plane];
                let (lo, hi) = valid_cols(g.w, g.w_out, s, kj, p);
                if hi <= lo {
                    continue;
                }
                for oh in 0..g.h_out {
                    let ih = oh * s + ki;
                    if ih < p || ih - p >= g.h {
                        continue;
                    }
                    let dst = &mut in_c[(ih - p) * g.w..(ih - p + 1) * g.w];
                    let src = &row[oh * g.w_out + lo..oh * g.w_out + hi];
                    let first = lo * s + kj - p;
                    if s == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output and, when `keep_cols`, the column
/// matrices of every sample (needed for the kernel gradient).
pub fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    bias: &[T],
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    if keep_cols {
        let cols = unfold(g, input);
        (conv2d_forward_cols(g, &cols, kernel, bias), Some(cols))
    } else {
        let plane = g.out_plane();
        let mut out = vec![T::zero(); g.batch * g.out_sample()];
        let mut scratch = vec![T::zero(); g.patch_len() * plane];
        for n in 0..g.batch {
            let out_n = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
            for (co, row) in out_n.chunks_exact_mut(plane).enumerate() {
                row.fill(bias[co]);
            }
            correlate_sample(g, &input[n * g.in_sample()..(n + 1) * g.in_sample()], kernel, &mut scratch, out_n);
        }
        (out, None)
    }
}

/// Convs this small skip the unfold and run as shifted row updates.
pub fn is_small(g: &ConvGeometry) -> bool {
    g.stride == 1 && g.c_in * g.k * g.k <= 18
}

/// Visits every (output row, input row, valid column span) of a stride-1
/// correlation for tap `(ki, kj)`: `f(oh, ih, lo, hi, shift)` with the
/// output columns `lo..hi` reading input columns `lo + shift - pad ..`.
fn taps_stride1(g: &ConvGeometry, ki: usize, kj: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (lo, hi) = valid_cols(g.w, g.w_out, 1, kj, g.pad);
    if hi <= lo {
        return;
    }
    for oh in 0..g.h_out {
        let ih = oh + ki;
        if ih < g.pad || ih - g.pad >= g.h {
            continue;
        }
        f(oh, ih - g.pad, lo, hi);
    }
}

/// Forward pass of a small stride-1 conv without columns.
pub fn direct_forward<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    debug_assert!(g.stride == 1);
    let (k, p, plane) = (g.k, g.pad, g.out_plane());
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + co) * plane..][..plane];
            dst.fill(bias[co]);
            for ci in 0..g.c_in {
                let src = &input[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = kernel[((co * g.c_in + ci) * k + ki) * k + kj];
                        taps_stride1(g, ki, kj, |oh, ih, lo, hi| {
                            let first = lo + kj - p;
                            let d = &mut dst[oh * g.w_out + lo..oh * g.w_out + hi];
                            for (d, &x) in d.iter_mut().zip(&src[ih * g.w + first..]) {
                                *d += wv * x;
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Input and kernel gradients of [`direct_forward`], accumulated.
pub fn direct_backward<T: Real>(
    g: &ConvGeometry,
    grad_out: &[T],
    kernel: &[T],
    input: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
) {
    let (k, p, plane) = (g.k, g.pad, g.out_plane());
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + co) * plane..][..plane];
            for ci in 0..g.c_in {
                let base = (n * g.c_in + ci) * g.h * g.w;
                for ki in 0..k {
                    for kj in 0..k {
                        let widx = ((co * g.c_in + ci) * k + ki) * k + kj;
                        let wv = kernel[widx];
                        let mut acc = T::zero();
                        taps_stride1(g, ki, kj, |oh, ih, lo, hi| {
                            let first = base + ih * g.w + lo + kj - p;
                            let gr = &go[oh * g.w_out + lo..oh * g.w_out + hi];
                            if let Some(gi) = grad_input.as_deref_mut() {
                                for (d, &v) in gi[first..first + hi - lo].iter_mut().zip(gr) {
                                    *d += wv * v;
                                }
                            }
                            if grad_kernel.is_some() {
                                acc += gr.iter().zip(&input[first..first + hi - lo]).map(|(&a, &b)| a * b).sum::<T>();
                            }
                        });
                        if let Some(gk) = grad_kernel.as_deref_mut() {
                            gk[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Column matrices of every sample, back to back.
pub fn unfold<T: Real>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let per = g.patch_len() * g.out_plane();
    let mut cols = vec![T::zero(); g.batch * per];
    for (n, c) in cols.chunks_exact_mut(per).enumerate() {
        im2col(g, &input[n * g.in_sample()..(n + 1) * g.in_sample()], c);
    }
    cols
}

/// Forward pass from precomputed columns (see [`unfold`]).
pub fn conv2d_forward_cols<T: Real>(g: &ConvGeometry, cols: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    for n in 0..g.batch {
        let out_n = &mut out[n * g.out_sample()..(n + 1) * g.out_sample()];
        for (co, row) in out_n.chunks_exact_mut(plane).enumerate() {
            row.fill(bias[co]);
        }
        let cols_n = &cols[n * kk * plane..(n + 1) * kk * plane];
        gemm_strided((plane, kk, g.c_out), (cols_n, 1, plane), (kernel, 1, kk), (out_n, 1, plane), true);
    }
    out
}

/// Adds the correlation of one sample with `kernel` onto `out`, using `cols`
/// as the unfold buffer.
fn correlate_sample<T: Real>(g: &ConvGeometry, input: &[T], kernel: &[T], cols: &mut [T], out: &mut [T]) {
    let plane = g.out_plane();
    let kk = g.patch_len();
    im2col(g, input, cols);
    // out^T[p, co] += Σ_r cols[r, p] · W[co, r]; the tall orientation packs better.
    gemm_strided((plane, kk, g.c_out), (cols, 1, plane), (kernel, 1, kk), (out, 1, plane), true);
}

/// `C = A·B (+ C)` with explicit (row, column) strides for every operand.
fn gemm_strided<T: Real>(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[T], usize, usize),
    (b, rsb, csb): (&[T], usize, usize),
    (c, rsc, csc): (&mut [T], usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, q: usize| (r.max(1) - 1) * rs + (q.max(1) - 1) * cs;
    assert!(k == 0 || (last(rsa, csa, m, k) < a.len() && last(rsb, csb, k, n) < b.len()));
    assert!(last(rsc, csc, m, n) < c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the furthest element of every operand is bounds-checked above and
    // `c` is a unique borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Gradients of the convolution given the upstream gradient and saved columns.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    grad_out: &[T],
    kernel: &[T],
    cols: &[T],
    grad_input: Option<&mut [T]>,
    grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let kk = g.patch_len();
    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            let go = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
            for (co, row) in go.chunks_exact(plane).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    if let Some(gk) = grad_kernel {
        for n in 0..g.batch {
            let go = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
            let cols_n = &cols[n * kk * plane..(n + 1) * kk * plane];
            // dW^T[r, co] += Σ_p cols[r, p] · go[co, p]
            gemm_strided(
                (kk, plane, g.c_out),
                (cols_n, plane, 1),
                (go, 1, plane),
                (gk, 1, kk),
                true,
            );
        }
    }
    if let Some(gi) = grad_input {
        if g.stride == 1 && g.pad < g.k {
            // Stride 1: the input gradient is the correlation of the output
            // gradient with the flipped, transposed kernel.
            let t = ConvGeometry {
                batch: 1,
                c_in: g.c_out,
                h: g.h_out,
                w: g.w_out,
                c_out: g.c_in,
                k: g.k,
                stride: 1,
                pad: g.k - 1 - g.pad,
                h_out: g.h,
                w_out: g.w,
            };
            let kk2 = g.k * g.k;
            let mut flipped = vec![T::zero(); kernel.len()];
            for co in 0..g.c_out {
                for ci in 0..g.c_in {
                    let src = &kernel[(co * g.c_in + ci) * kk2..][..kk2];
                    let dst = &mut flipped[(ci * g.c_out + co) * kk2..][..kk2];
                    for (d, &v) in dst.iter_mut().zip(src.iter().rev()) {
                        *d = v;
                    }
                }
            }
            let mut cols = vec![T::zero(); t.patch_len() * t.out_plane()];
            for n in 0..g.batch {
                let go = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
                correlate_sample(&t, go, &flipped, &mut cols, &mut gi[n * g.in_sample()..(n + 1) * g.in_sample()]);
            }
        } else {
            let mut dcols = vec![T::zero(); kk * plane];
            for n in 0..g.batch {
                let go = &grad_out[n * g.out_sample()..(n + 1) * g.out_sample()];
                // dcols[r, p] = Σ_co W[co, r] · go[co, p]
                matmul(kk, g.c_out, plane, kernel, true, go, false, &mut dcols, false);
                col2im(g, &dcols, &mut gi[n * g.in_sample()..(n + 1) * g.in_sample()]);
            }
        }
    }
}
