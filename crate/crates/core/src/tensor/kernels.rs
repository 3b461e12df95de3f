//! Raw buffer kernels shared by the tape ops.

/// `c[m×n] = a[m×k] · b[k×n] (+ c if accumulate)`, all row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: dimensions and strides describe the slices exactly (checked above).
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `a[k×m]ᵀ · b[k×n]` as a new `m×n` buffer.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: a is k×m row-major, read transposed via swapped strides. With
    // beta = 0 the output is only written, so it may start uninitialised; every
    // one of the m·n entries is written before the length is set.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
        c.set_len(m * n);
    }
    c
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: b is n×k row-major, read transposed via swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unfold a zero-padded `[c, h, w]` input into a `[c·k·k, h·w]` column matrix
/// for a same-padded `k×k` convolution.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = Vec::with_capacity(c * k * k * hw);
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = ((-dx).max(0) as usize).min(w);
                let x_hi = ((w as isize - dx).min(w as isize).max(0) as usize).max(x_lo);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        cols.resize(cols.len() + w, 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    cols.resize(cols.len() + x_lo, 0.0);
                    if x_hi > x_lo {
                        let s0 = (x_lo as isize + dx) as usize;
                        cols.extend_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                    cols.resize(cols.len() + (w - x_hi), 0.0);
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), c * k * k * hw);
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` buffer.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_hi <= x_lo {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
