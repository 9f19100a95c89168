//! Thin complex SVD via one-sided Jacobi rotations.
//!
//! Operates on the columns of the matrix directly (never forms the Gram
//! matrix), which keeps small singular values accurate. Sized for dictionary
//! work: thousands of rows, a few hundred columns.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Economy SVD result: `a = u * diag(s) * v^H` with `u` (m×r), `v` (n×r)
/// column-orthonormal and `s` non-increasing, r = min(m, n).
pub struct Svd {
    pub u: Vec<Complex64>,
    pub s: Vec<f64>,
    pub v: Vec<Complex64>,
    pub m: usize,
    pub n: usize,
}

/// Column-major access helpers for a flat complex buffer.
#[inline]
fn col(buf: &[Complex64], rows: usize, j: usize) -> &[Complex64] {
    &buf[j * rows..(j + 1) * rows]
}

fn dot_conj(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        acc += x.conj() * y;
    }
    acc
}

/// One-sided Jacobi SVD of `a` given row-major with shape (m, n), m >= n.
pub fn svd_jacobi(a_rows: &[Complex64], m: usize, n: usize) -> Result<Svd> {
    if m == 0 || n == 0 || a_rows.len() != m * n {
        return Err(Error::DimensionMismatch(format!(
            "svd: buffer {} does not match {}x{}",
            a_rows.len(),
            m,
            n
        )));
    }
    if m < n {
        return Err(Error::InvalidParameter("svd_jacobi requires m >= n".into()));
    }

    // Work in column-major: columns are rotated in place.
    let mut a = vec![Complex64::new(0.0, 0.0); m * n];
    for r in 0..m {
        for c in 0..n {
            a[c * m + r] = a_rows[r * n + c];
        }
    }
    // v accumulates the column rotations, starting from identity (n×n,
    // column-major).
    let mut v = vec![Complex64::new(0.0, 0.0); n * n];
    for j in 0..n {
        v[j * n + j] = Complex64::new(1.0, 0.0);
    }

    let tol = 1e-13;
    let max_sweeps = 60;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let app = col(&a, m, p).iter().map(|x| x.norm_sqr()).sum::<f64>();
                let aqq = col(&a, m, q).iter().map(|x| x.norm_sqr()).sum::<f64>();
                let apq = dot_conj(col(&a, m, p), col(&a, m, q));
                let mag = apq.norm();
                if app == 0.0 || aqq == 0.0 || mag <= tol * (app * aqq).sqrt() {
                    continue;
                }
                off = off.max(mag / (app * aqq).sqrt());

                // Fold the phase of the off-diagonal into column q, then the
                // 2x2 Gram block is real symmetric and a classic Jacobi
                // rotation annihilates it.
                let phase = apq / mag;
                let tau = (aqq - app) / (2.0 * mag);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;

                let (head, tail) = a.split_at_mut(q * m);
                let colp = &mut head[p * m..p * m + m];
                let colq = &mut tail[..m];
                for i in 0..m {
                    let ap = colp[i];
                    let aq = colq[i] * phase;
                    colp[i] = c * ap - s * aq;
                    colq[i] = s * ap + c * aq;
                }
                let (vhead, vtail) = v.split_at_mut(q * n);
                let vp = &mut vhead[p * n..p * n + n];
                let vq = &mut vtail[..n];
                for i in 0..n {
                    let xp = vp[i];
                    let xq = vq[i] * phase;
                    vp[i] = c * xp - s * xq;
                    vq[i] = s * xp + c * xq;
                }
            }
        }
        if off < tol {
            break;
        }
    }

    // Singular values are the column norms; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| col(&a, m, j).iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = vec![Complex64::new(0.0, 0.0); m * n];
    let mut s = vec![0.0f64; n];
    let mut v_sorted = vec![Complex64::new(0.0, 0.0); n * n];
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        let inv = if norms[src] > 0.0 { 1.0 / norms[src] } else { 0.0 };
        for r in 0..m {
            u[r * n + dst] = a[src * m + r] * inv;
        }
        for r in 0..n {
            v_sorted[r * n + dst] = v[src * n + r];
        }
    }

    Ok(Svd { u, s, v: v_sorted, m, n })
}
