//! Dense numeric kernels behind the tape primitives.

/// `c = a·b + beta·c` for row-major operands, where `a` is `m×k` (or `k×m`
/// when `a_t`) and `b` is `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are checked by the callers.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image `[C, H, W]` into the rows of a `[C·K·K, Ho·Wo]` block
/// whose rows are `stride` apart.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64], stride: usize) {
    let k = g.kernel;
    let hw_out = g.out_len();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * stride..row * stride + hw_out];
                for oy in 0..g.out_h {
                    let iy = (oy + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.padding == 0 {
                        line.copy_from_slice(&src[kx..kx + g.out_w]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `[C·K·K, Ho·Wo]` back into `[C, H, W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64], stride: usize) {
    let k = g.kernel;
    let hw_out = g.out_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * stride..row * stride + hw_out];
                for oy in 0..g.out_h {
                    let iy = (oy + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.padding == 0 {
                        for (d, v) in dst[kx..kx + g.out_w].iter_mut().zip(line) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[C, B·L]` to `[B, C, L]`.
pub(crate) fn unfold_batch(wide: &[f64], channels: usize, batch: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; wide.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &wide[(c * batch + b) * len..][..len];
            out[(b * channels + c) * len..][..len].copy_from_slice(src);
        }
    }
    out
}

/// `[B, C, L]` to `[C, B·L]`.
pub(crate) fn fold_batch(x: &[f64], channels: usize, batch: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for b in 0..batch {
            out[(c * batch + b) * len..][..len].copy_from_slice(&x[(b * channels + c) * len..][..len]);
        }
    }
    out
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}
