//! Dense f64 kernels shared by the tensor engine and the plain (no-tape)
//! network forward paths. Loops are written with independent accumulators so
//! LLVM can vectorize them without reassociating a single reduction chain;
//! parallel splits always write disjoint output rows, keeping results
//! bit-reproducible at any thread count.

use rayon::prelude::*;

/// Row-block size: keeps an A panel plus an output panel L1-resident while
/// the B panel streams once per block instead of once per row.
const ROW_BLOCK: usize = 16;

/// out[i, j] += dot(a[i, :], b[j, :]) for a: m×k, b: n×k, out: m×n (row-major).
pub(crate) fn matmul_abt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(blk, oblock)| {
        let i0 = blk * ROW_BLOCK;
        let rows = oblock.len() / n;
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut r = 0;
            while r + 2 <= rows {
                let a0 = &a[(i0 + r) * k..(i0 + r + 1) * k];
                let a1 = &a[(i0 + r + 1) * k..(i0 + r + 2) * k];
                let (d0, d1) = dot2(brow, a0, a1, k);
                oblock[r * n + j] += d0;
                oblock[(r + 1) * n + j] += d1;
                r += 2;
            }
            if r < rows {
                oblock[r * n + j] += dot(&a[(i0 + r) * k..(i0 + r + 1) * k], brow, k);
            }
        }
    });
}

/// out[i, :] += sum_t a[i, t] * b[t, :] for a: m×k, b: k×n, out: m×n.
pub(crate) fn matmul_ab(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(blk, oblock)| {
        let i0 = blk * ROW_BLOCK;
        let rows = oblock.len() / n;
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            for r in 0..rows {
                let coeff = a[(i0 + r) * k + t];
                if coeff != 0.0 {
                    axpy(coeff, brow, &mut oblock[r * n..(r + 1) * n]);
                }
            }
        }
    });
}

/// out[t, :] += sum_i a[i, t] * b[i, :] for a: m×k, b: m×n, out: k×n
/// (i.e. out += a^T b). Parallel over output rows.
pub(crate) fn matmul_atb(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(|(blk, oblock)| {
        let t0 = blk * ROW_BLOCK;
        let rows = oblock.len() / n;
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for r in 0..rows {
                let coeff = a[i * k + t0 + r];
                if coeff != 0.0 {
                    axpy(coeff, brow, &mut oblock[r * n..(r + 1) * n]);
                }
            }
        }
    });
}

const LANES: usize = 8;

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    let n = x.len().min(y.len());
    let (xm, xr) = x[..n].split_at(n - n % LANES);
    let (ym, yr) = y[..n].split_at_mut(n - n % LANES);
    for (cy, cx) in ym.chunks_exact_mut(LANES).zip(xm.chunks_exact(LANES)) {
        for u in 0..LANES {
            cy[u] = alpha.mul_add(cx[u], cy[u]);
        }
    }
    for (yi, xi) in yr.iter_mut().zip(xr) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64], k: usize) -> f64 {
    let mut acc = [0.0f64; LANES];
    let (am, ar) = a[..k].split_at(k - k % LANES);
    let (bm, br) = b[..k].split_at(k - k % LANES);
    for (ca, cb) in am.chunks_exact(LANES).zip(bm.chunks_exact(LANES)) {
        for u in 0..LANES {
            acc[u] = ca[u].mul_add(cb[u], acc[u]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail = x.mul_add(*y, tail);
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
fn dot2(a: &[f64], b0: &[f64], b1: &[f64], k: usize) -> (f64, f64) {
    let mut acc0 = [0.0f64; LANES];
    let mut acc1 = [0.0f64; LANES];
    let main = k - k % LANES;
    let (am, ar) = a[..k].split_at(main);
    let (b0m, b0r) = b0[..k].split_at(main);
    let (b1m, b1r) = b1[..k].split_at(main);
    for ((ca, c0), c1) in am
        .chunks_exact(LANES)
        .zip(b0m.chunks_exact(LANES))
        .zip(b1m.chunks_exact(LANES))
    {
        for u in 0..LANES {
            acc0[u] = ca[u].mul_add(c0[u], acc0[u]);
            acc1[u] = ca[u].mul_add(c1[u], acc1[u]);
        }
    }
    let mut t0 = 0.0;
    let mut t1 = 0.0;
    for i in 0..ar.len() {
        t0 = ar[i].mul_add(b0r[i], t0);
        t1 = ar[i].mul_add(b1r[i], t1);
    }
    (acc0.iter().sum::<f64>() + t0, acc1.iter().sum::<f64>() + t1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive_abt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a[i * k + t] * b[j * k + t];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_match_naive_matmul() {
        let mut rng = crate::rng::rng_from_seed(3);
        let (m, n, k) = (13, 9, 21);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.random::<f64>() - 0.5).collect();

        let mut out = vec![0.0; m * n];
        matmul_abt(&a, &b, &mut out, m, n, k);
        let want = naive_abt(&a, &b, m, n, k);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // matmul_ab with b transposed equals abt.
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for t in 0..k {
                bt[t * n + j] = b[j * k + t];
            }
        }
        let mut out2 = vec![0.0; m * n];
        matmul_ab(&a, &bt, &mut out2, m, n, k);
        for (x, y) in out2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // atb: out = a^T c, check against transposed naive.
        let c: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut out3 = vec![0.0; k * n];
        matmul_atb(&a, &c, &mut out3, m, n, k);
        for t in 0..k {
            for j in 0..n {
                let mut want = 0.0;
                for i in 0..m {
                    want += a[i * k + t] * c[i * n + j];
                }
                assert!((out3[t * n + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[cfg(test)]
mod bench {
    use super::*;
    #[test]
    #[ignore]
    fn gemm_throughput() {
        let (m, n, k) = (4096, 300, 300);
        let a = vec![1.1f64; m * k];
        let b = vec![0.9f64; n * k];
        let mut out = vec![0.0; m * n];
        // warmup
        matmul_abt(&a, &b, &mut out, m, n, k);
        let t = std::time::Instant::now();
        let reps = 5;
        for _ in 0..reps {
            matmul_abt(&a, &b, &mut out, m, n, k);
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (m * n * k) as f64 / dt / 1e9;
        eprintln!("matmul_abt {m}x{k} * {n}x{k}^T: {dt:.4}s  {gflops:.2} GFLOP/s");

        let mut out2 = vec![0.0; m * n];
        let bt = vec![0.9f64; k * n];
        let t = std::time::Instant::now();
        for _ in 0..reps {
            matmul_ab(&a, &bt, &mut out2, m, n, k);
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (m * n * k) as f64 / dt / 1e9;
        eprintln!("matmul_ab: {dt:.4}s  {gflops:.2} GFLOP/s");
    }
}
