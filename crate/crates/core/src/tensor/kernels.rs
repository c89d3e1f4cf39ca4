//! Row-major matrix products. Each output row is produced by one worker with a
//! fixed summation order, so parallel and serial results are bitwise equal.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

fn rows_mut(out: &mut [f64], width: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `a[m×n] · b[n×p]`. Each output accumulates over `n` in ascending order;
/// four steps are fused per pass over the row without reassociating.
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    rows_mut(&mut out, p, m * n * p, |i, row| {
        let ai = &a[i * n..(i + 1) * n];
        let mut k = 0;
        while k + 4 <= n {
            let (a0, a1, a2, a3) = (ai[k], ai[k + 1], ai[k + 2], ai[k + 3]);
            let b0 = &b[k * p..(k + 1) * p];
            let b1 = &b[(k + 1) * p..(k + 2) * p];
            let b2 = &b[(k + 2) * p..(k + 3) * p];
            let b3 = &b[(k + 3) * p..(k + 4) * p];
            for j in 0..p {
                row[j] = row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            k += 4;
        }
        for k in k..n {
            let aik = ai[k];
            for (o, &bkj) in row.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *o += aik * bkj;
            }
        }
    });
    out
}

/// `a[m×n] · b[p×n]ᵀ`. Transposes `b` once so the inner loop vectorizes; each
/// output still sums over `n` in ascending order.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * p];
    for j in 0..p {
        for k in 0..n {
            bt[k * p + j] = b[j * n + k];
        }
    }
    gemm_nn(a, &bt, m, n, p)
}

/// `a[k×m]ᵀ · b[k×p]`
pub fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    rows_mut(&mut out, p, k * m * p, |i, row| {
        for r in 0..k {
            let ari = a[r * m + i];
            let br = &b[r * p..(r + 1) * p];
            for (o, &brj) in row.iter_mut().zip(br) {
                *o += ari * brj;
            }
        }
    });
    out
}
