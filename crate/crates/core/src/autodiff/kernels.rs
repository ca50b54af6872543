//! Forward and backward kernels on raw `H × W × C` buffers.

/// `c (m×n) = a (m×k) · b (k×n)`, optionally accumulating into `c`.
/// `a_t`/`b_t` mark operands stored transposed.
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// Unfolds `K × K` zero-padded neighbourhoods into rows of `K·K·C` values.
pub(crate) fn im2col(input: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let cols = k * k * c;
    let mut out = vec![0.0; h * w * cols];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * cols..(y * w + x + 1) * cols];
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = x as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], h: usize, w: usize, c: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let width = k * k * c;
    for y in 0..h {
        for x in 0..w {
            let row = &cols[(y * w + x) * width..(y * w + x + 1) * width];
            for ky in 0..k {
                let iy = y as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = x as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * k + kx) * c;
                    for (o, g) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += g;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; hw * d.cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(d.cout) {
            px.copy_from_slice(b);
        }
    }
    let cols = d.k * d.k * d.cin;
    if d.k == 1 {
        gemm(hw, cols, d.cout, input, false, kernel, false, &mut out, true);
    } else {
        let patches = im2col(input, d.h, d.w, d.cin, d.k);
        gemm(hw, cols, d.cout, &patches, false, kernel, false, &mut out, true);
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = d.h * d.w;
    let cols = d.k * d.k * d.cin;
    let patches_owned;
    let patches: &[f64] = if d.k == 1 {
        input
    } else if want[1] {
        patches_owned = im2col(input, d.h, d.w, d.cin, d.k);
        &patches_owned
    } else {
        &[]
    };

    let d_input = want[0].then(|| {
        let mut dcols = vec![0.0; hw * cols];
        gemm(hw, d.cout, cols, grad_out, false, kernel, true, &mut dcols, false);
        if d.k == 1 {
            dcols
        } else {
            let mut dx = vec![0.0; hw * d.cin];
            col2im(&dcols, d.h, d.w, d.cin, d.k, &mut dx);
            dx
        }
    });
    let d_kernel = want[1].then(|| {
        let mut dk = vec![0.0; cols * d.cout];
        gemm(cols, hw, d.cout, patches, true, grad_out, false, &mut dk, false);
        dk
    });
    let d_bias = want[2].then(|| {
        let mut db = vec![0.0; d.cout];
        for px in grad_out.chunks_exact(d.cout) {
            for (b, g) in db.iter_mut().zip(px) {
                *b += g;
            }
        }
        db
    });
    (d_input, d_kernel, d_bias)
}

/// Max pooling; also returns the flat input index that won each output cell.
/// Ties go to the first cell of the window in row-major order.
pub(crate) fn max_pool(input: &[f64], h: usize, w: usize, c: usize, f: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let o = (oy * ow + ox) * c + ch;
                for dy in 0..f {
                    for dx in 0..f {
                        let i = ((oy * f + dy) * w + ox * f + dx) * c + ch;
                        if input[i] > out[o] {
                            out[o] = input[i];
                            arg[o] = i;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool(input: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for x in 0..w {
            let o = ((y / f) * ow + x / f) * c;
            let i = (y * w + x) * c;
            for ch in 0..c {
                out[o + ch] += input[i + ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ow = w / f;
    let norm = 1.0 / (f * f) as f64;
    let mut dx = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let o = ((y / f) * ow + x / f) * c;
            let i = (y * w + x) * c;
            for ch in 0..c {
                dx[i + ch] = grad_out[o + ch] * norm;
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for bilinear upsampling along one axis
/// with half-pixel centres (align-corners false).
pub(crate) fn bilinear_taps(n_in: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * f)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / f as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            if i0 + 1 >= n_in {
                (i0, i0, 0.0)
            } else {
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

pub(crate) fn upsample_nearest(input: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ow = w * f;
    let mut out = vec![0.0; h * f * ow * c];
    for y in 0..h * f {
        for x in 0..ow {
            let i = ((y / f) * w + x / f) * c;
            let o = (y * ow + x) * c;
            out[o..o + c].copy_from_slice(&input[i..i + c]);
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(grad_out: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ow = w * f;
    let mut dx = vec![0.0; h * w * c];
    for y in 0..h * f {
        for x in 0..ow {
            let i = ((y / f) * w + x / f) * c;
            let o = (y * ow + x) * c;
            for ch in 0..c {
                dx[i + ch] += grad_out[o + ch];
            }
        }
    }
    dx
}

pub(crate) fn upsample_bilinear(input: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let ow = w * f;
    let mut out = vec![0.0; h * f * ow * c];
    for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (x, &(x0, x1, lx)) in tx.iter().enumerate() {
            let o = (y * ow + x) * c;
            let w00 = (1.0 - ly) * (1.0 - lx);
            let w01 = (1.0 - ly) * lx;
            let w10 = ly * (1.0 - lx);
            let w11 = ly * lx;
            let (i00, i01) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
            let (i10, i11) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
            for ch in 0..c {
                out[o + ch] = w00 * input[i00 + ch]
                    + w01 * input[i01 + ch]
                    + w10 * input[i10 + ch]
                    + w11 * input[i11 + ch];
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_backward(grad_out: &[f64], h: usize, w: usize, c: usize, f: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let ow = w * f;
    let mut dx = vec![0.0; h * w * c];
    for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
        for (x, &(x0, x1, lx)) in tx.iter().enumerate() {
            let o = (y * ow + x) * c;
            let taps = [
                ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                ((y0 * w + x1) * c, (1.0 - ly) * lx),
                ((y1 * w + x0) * c, ly * (1.0 - lx)),
                ((y1 * w + x1) * c, ly * lx),
            ];
            for (i, wt) in taps {
                for ch in 0..c {
                    dx[i + ch] += wt * grad_out[o + ch];
                }
            }
        }
    }
    dx
}
