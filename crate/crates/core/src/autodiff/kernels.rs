//! Raw buffer kernels behind the differentiable ops. Everything here works on
//! flat row-major slices; shape checking happens in the tape.

use super::Padding;

/// `c = a · b + beta · c` where `a` is m×k and `b` is k×n, both row-major,
/// each optionally supplied in transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_trans: bool, b: &[f32], b_trans: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are sized for the strides above (checked in debug).
    unsafe {
        matrixmultiply::sgemm(
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

#[inline]
fn src_index(pos: isize, extent: usize, pad: Padding) -> Option<usize> {
    if pos >= 0 && (pos as usize) < extent {
        Some(pos as usize)
    } else {
        match pad {
            Padding::Replicate => Some(pos.clamp(0, extent as isize - 1) as usize),
            Padding::Zero => None,
        }
    }
}

/// Unfolds one image `[c, h, w]` into `[c·k·k, h·w]` columns (stride 1, same size).
pub(crate) fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: Padding, cols: &mut [f32]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = src_index(y as isize + ky as isize - p, h, pad);
                    let out = &mut row[y * w..(y + 1) * w];
                    match sy {
                        None => out.fill(0.0),
                        Some(sy) => {
                            let src = &plane[sy * w..(sy + 1) * w];
                            for (xo, o) in out.iter_mut().enumerate() {
                                *o = match src_index(xo as isize + kx as isize - p, w, pad) {
                                    Some(sx) => src[sx],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into `dx`.
pub(crate) fn col2im(dcols: &[f32], c: usize, h: usize, w: usize, k: usize, pad: Padding, dx: &mut [f32]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let Some(sy) = src_index(y as isize + ky as isize - p, h, pad) else {
                        continue;
                    };
                    for xo in 0..w {
                        if let Some(sx) = src_index(xo as isize + kx as isize - p, w, pad) {
                            plane[sy * w + sx] += row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward(x: &[f32], weight: &[f32], d: &ConvDims, pad: Padding) -> Vec<f32> {
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let mut out = vec![0.0; d.n * d.cout * hw];
    let mut cols = vec![0.0; kk * hw];
    for i in 0..d.n {
        im2col(&x[i * d.cin * hw..(i + 1) * d.cin * hw], d.cin, d.h, d.w, d.k, pad, &mut cols);
        gemm(
            d.cout,
            kk,
            hw,
            weight,
            false,
            &cols,
            false,
            0.0,
            &mut out[i * d.cout * hw..(i + 1) * d.cout * hw],
        );
    }
    out
}

/// Returns `(dx, dweight)`, each computed only when requested.
pub(crate) fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    d: &ConvDims,
    pad: Padding,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let hw = d.h * d.w;
    let kk = d.cin * d.k * d.k;
    let mut dx = want_dx.then(|| vec![0.0; d.n * d.cin * hw]);
    let mut dw = want_dw.then(|| vec![0.0; d.cout * kk]);
    let mut cols = vec![0.0; kk * hw];
    for i in 0..d.n {
        let dout_i = &dout[i * d.cout * hw..(i + 1) * d.cout * hw];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[i * d.cin * hw..(i + 1) * d.cin * hw], d.cin, d.h, d.w, d.k, pad, &mut cols);
            gemm(d.cout, hw, kk, dout_i, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kk, d.cout, hw, weight, true, dout_i, false, 0.0, &mut cols);
            col2im(&cols, d.cin, d.h, d.w, d.k, pad, &mut dx[i * d.cin * hw..(i + 1) * d.cin * hw]);
        }
    }
    (dx, dw)
}

/// One `k×k` kernel applied to every `h×w` plane of `x`.
pub(crate) fn depthwise_forward(x: &[f32], planes: usize, h: usize, w: usize, kernel: &[f32], k: usize, pad: Padding) -> Vec<f32> {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; planes * hw];
    for pl in 0..planes {
        let src = &x[pl * hw..(pl + 1) * hw];
        let dst = &mut out[pl * hw..(pl + 1) * hw];
        for y in 0..h {
            for xo in 0..w {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    let Some(sy) = src_index(y as isize + ky as isize - p, h, pad) else {
                        continue;
                    };
                    for kx in 0..k {
                        if let Some(sx) = src_index(xo as isize + kx as isize - p, w, pad) {
                            acc += kernel[ky * k + kx] * src[sy * w + sx];
                        }
                    }
                }
                dst[y * w + xo] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[f32],
    k: usize,
    pad: Padding,
    dout: &[f32],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut dx = want_dx.then(|| vec![0.0f32; planes * hw]);
    let mut dk = vec![0.0f64; k * k];
    for pl in 0..planes {
        let src = &x[pl * hw..(pl + 1) * hw];
        let g = &dout[pl * hw..(pl + 1) * hw];
        for y in 0..h {
            for xo in 0..w {
                let gv = g[y * w + xo];
                if gv == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    let Some(sy) = src_index(y as isize + ky as isize - p, h, pad) else {
                        continue;
                    };
                    for kx in 0..k {
                        if let Some(sx) = src_index(xo as isize + kx as isize - p, w, pad) {
                            if want_dk {
                                dk[ky * k + kx] += (gv * src[sy * w + sx]) as f64;
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx[pl * hw + sy * w + sx] += gv * kernel[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, want_dk.then(|| dk.into_iter().map(|v| v as f32).collect()))
}
