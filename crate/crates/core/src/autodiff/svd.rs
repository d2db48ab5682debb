//! One-sided (Hestenes) Jacobi SVD for small dense matrices.

use crate::error::{Error, Result};

/// Full singular value decomposition `M = U · diag(S) · Vt` of an `h×w`
/// matrix, with `U: h×h`, `S: min(h,w)` nonincreasing and `Vt: w×w`, all
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTriple {
    pub rows: usize,
    pub cols: usize,
    pub u: Vec<f32>,
    pub s: Vec<f32>,
    pub vt: Vec<f32>,
}

pub const MAX_SVD_EXTENT: usize = 256;

impl FactorTriple {
    pub fn min_dim(&self) -> usize {
        self.rows.min(self.cols)
    }

    /// `U[:, :r] · diag(S[:r]) · Vt[:r, :]` as a row-major `rows×cols` matrix.
    pub fn reconstruct(&self, rank: usize) -> Vec<f32> {
        let (h, w) = (self.rows, self.cols);
        let r = rank.min(self.min_dim());
        let mut out = vec![0.0f64; h * w];
        for k in 0..r {
            let s = self.s[k] as f64;
            if s == 0.0 {
                continue;
            }
            for i in 0..h {
                let us = self.u[i * h + k] as f64 * s;
                for j in 0..w {
                    out[i * w + j] += us * self.vt[k * w + j] as f64;
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Singular vectors truncated to `r`: `(U[:, :r], S[:r], Vt[:r, :])`.
    pub fn truncated(&self, rank: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let (h, w) = (self.rows, self.cols);
        let r = rank.min(self.min_dim());
        let mut u = Vec::with_capacity(h * r);
        for i in 0..h {
            u.extend_from_slice(&self.u[i * h..i * h + r]);
        }
        (u, self.s[..r].to_vec(), self.vt[..r * w].to_vec())
    }
}

/// Decomposes a row-major `rows×cols` matrix.
pub fn svd_small(m: &[f32], rows: usize, cols: usize) -> Result<FactorTriple> {
    if rows == 0 || cols == 0 || m.len() != rows * cols {
        return Err(Error::InvalidArgument(format!("svd of {rows}x{cols} with {} values", m.len())));
    }
    if rows > MAX_SVD_EXTENT || cols > MAX_SVD_EXTENT {
        return Err(Error::InvalidArgument(format!("svd extents {rows}x{cols} exceed {MAX_SVD_EXTENT}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input".into()));
    }
    if rows >= cols {
        let (u, s, v) = jacobi_tall(m, rows, cols);
        Ok(FactorTriple {
            rows,
            cols,
            u: to_f32(&u),
            s: to_f32(&s),
            vt: to_f32(&transpose(&v, cols, cols)),
        })
    } else {
        let mt = transpose(&m.iter().map(|&v| v as f64).collect::<Vec<_>>(), rows, cols);
        let mt32 = to_f32(&mt);
        // Mᵀ = U' S V'ᵀ  =>  M = V' S U'ᵀ
        let (u2, s, v2) = jacobi_tall(&mt32, cols, rows);
        Ok(FactorTriple {
            rows,
            cols,
            u: to_f32(&v2),
            s: to_f32(&s),
            vt: to_f32(&transpose(&u2, cols, cols)),
        })
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// For `m ≥ n`: returns full `U (m×m)`, `S (n)`, `V (n×n)`, row-major.
fn jacobi_tall(a32: &[f32], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut a: Vec<f64> = a32.iter().map(|&v| v as f64).collect();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    const TOL: f64 = 1e-15;
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (ap, aq) = (a[i * n + p], a[i * n + q]);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma.abs() <= TOL * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (ap, aq) = (a[i * n + p], a[i * n + q]);
                    a[i * n + p] = c * ap - s * aq;
                    a[i * n + q] = s * ap + c * aq;
                }
                for i in 0..n {
                    let (vp, vq) = (v[i * n + p], v[i * n + q]);
                    v[i * n + p] = c * vp - s * vq;
                    v[i * n + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| a[i * n + j] * a[i * n + j]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable ordering keeps ties deterministic
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = smax * 1e-12 + f64::MIN_POSITIVE;
    let mut s = vec![0.0; n];
    let mut vs = vec![0.0; n * n];
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        for i in 0..n {
            vs[i * n + k] = v[i * n + j];
        }
        if norms[j] > tiny {
            cols.push((0..m).map(|i| a[i * n + j] / norms[j]).collect());
        } else {
            s[k] = if norms[j] > 0.0 { norms[j] } else { 0.0 };
            cols.push(Vec::new());
        }
    }
    // Fill missing left vectors (null space and the m > n block) by
    // Gram–Schmidt over the standard basis.
    let mut basis: Vec<Vec<f64>> = cols.iter().filter(|c| !c.is_empty()).cloned().collect();
    let mut candidate = 0;
    let mut next_unit = || -> Vec<f64> {
        loop {
            let mut e = vec![0.0; m];
            e[candidate % m] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = b.iter().zip(&e).map(|(x, y)| x * y).sum();
                    e.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let nrm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= nrm);
                basis.push(e.clone());
                return e;
            }
            assert!(candidate < 4 * m + 4, "failed to complete orthonormal basis");
        }
    };
    for c in cols.iter_mut() {
        if c.is_empty() {
            *c = next_unit();
        }
    }
    while cols.len() < m {
        cols.push(next_unit());
    }
    let mut u = vec![0.0; m * m];
    for (k, c) in cols.iter().enumerate() {
        for i in 0..m {
            u[i * m + k] = c[i];
        }
    }
    (u, s, vs)
}
