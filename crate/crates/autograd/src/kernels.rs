//! Raw numeric kernels shared by forward and backward passes.

/// `c[m×n] += a[m×k] · b[k×n]` with arbitrary element strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(a.len() >= span(m, k, rsa, csa));
    debug_assert!(b.len() >= span(k, n, rsb, csb));
    // SAFETY: every index reachable through the given strides lies inside
    // the slices (checked above in debug builds; callers derive strides from
    // the tensor shapes they pass).
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn unfold3x3(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 9 * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = (y * w + xx) * 9 * c;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let off = dst + (ky * 3 + kx) * c;
                    out[off..off + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn fold3x3_acc(gy: &[f64], h: usize, w: usize, c: usize, gx: &mut [f64]) {
    for y in 0..h {
        for xx in 0..w {
            let src = (y * w + xx) * 9 * c;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let off = src + (ky * 3 + kx) * c;
                    for ch in 0..c {
                        gx[dst + ch] += gy[off + ch];
                    }
                }
            }
        }
    }
}

pub(crate) fn avg_pool2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = ((y / 2) * wo + xx / 2) * c;
            let src = (y * w + xx) * c;
            for ch in 0..c {
                out[dst + ch] += 0.25 * x[src + ch];
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward_acc(gy: &[f64], h: usize, w: usize, c: usize, gx: &mut [f64]) {
    let wo = w / 2;
    for y in 0..h {
        for xx in 0..w {
            let src = ((y / 2) * wo + xx / 2) * c;
            let dst = (y * w + xx) * c;
            for ch in 0..c {
                gx[dst + ch] += 0.25 * gy[src + ch];
            }
        }
    }
}

pub(crate) fn upsample2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let wo = 2 * w;
    let mut out = vec![0.0; 4 * h * w * c];
    for y in 0..2 * h {
        for xx in 0..wo {
            let src = ((y / 2) * w + xx / 2) * c;
            let dst = (y * wo + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

pub(crate) fn upsample2_backward_acc(gy: &[f64], h: usize, w: usize, c: usize, gx: &mut [f64]) {
    let wo = 2 * w;
    for y in 0..2 * h {
        for xx in 0..wo {
            let dst = ((y / 2) * w + xx / 2) * c;
            let src = (y * wo + xx) * c;
            for ch in 0..c {
                gx[dst + ch] += gy[src + ch];
            }
        }
    }
}
