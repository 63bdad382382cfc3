//! Slice-level numeric kernels shared by the tape ops and by callers that
//! only need forward values.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a` is `n×k`, `b` is `k×m`, result `n×m`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    matmul_acc(&mut out, a, b, n, k, m);
    out
}

/// `out += a·b` for `a: n×k`, `b: k×m`.
pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    if m == 0 || k == 0 {
        return;
    }
    for (row, arow) in out.chunks_exact_mut(m).zip(a.chunks_exact(k)).take(n) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(m)) {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a·bᵀ` for `a: n×m`, `b: k×m`; `out` is `n×k`.
pub fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, m: usize, k: usize) {
    if m == 0 || k == 0 {
        return;
    }
    for (row, arow) in out.chunks_exact_mut(k).zip(a.chunks_exact(m)).take(n) {
        for (o, brow) in row.iter_mut().zip(b.chunks_exact(m)) {
            *o += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += aᵀ·b` for `a: n×k`, `b: n×m`; `out` is `k×m`.
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    if m == 0 || k == 0 {
        return;
    }
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(m)).take(n) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(m)) {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numerically stable softmax of each row of an `rows×cols` matrix.
pub fn row_softmax(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// Softmax over groups of edges sharing a target node.
///
/// Nodes without incoming edges simply have no group.
pub fn segment_softmax(scores: &[f64], targets: &[usize], n: usize) -> Result<Vec<f64>> {
    if scores.len() != targets.len() {
        return Err(Error::shape("segment_softmax", &[scores.len()], &[targets.len()]));
    }
    let mut max = vec![f64::NEG_INFINITY; n];
    for (&s, &t) in scores.iter().zip(targets) {
        if t >= n {
            return Err(Error::Index {
                what: "segment_softmax target",
                index: t,
                len: n,
            });
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("segment_softmax scores".into()));
        }
        max[t] = max[t].max(s);
    }
    let mut total = vec![0.0; n];
    let mut out: Vec<f64> = scores
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            let e = (s - max[t]).exp();
            total[t] += e;
            e
        })
        .collect();
    for (o, &t) in out.iter_mut().zip(targets) {
        *o /= total[t];
    }
    Ok(out)
}

/// Per-row normalization statistics: returns (x_hat, inv_std).
pub fn layer_norm_stats(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; rows * cols];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let mean = src.iter().sum::<f64>() / cols as f64;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv[r] = inv_std;
        for (h, s) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *h = (s - mean) * inv_std;
        }
    }
    (xhat, inv)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
