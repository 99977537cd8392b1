//! Multi-head scaled dot-product attention over a token matrix.

use crate::tensor::gemm;

/// Row-wise softmax in place.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn head_slice(src: &[f64], n: usize, c: usize, head: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&src[r * c + head * dh..r * c + (head + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], n: usize, c: usize, head: usize, dh: usize) {
    for r in 0..n {
        for j in 0..dh {
            dst[r * c + head * dh + j] += src[r * dh + j];
        }
    }
}

/// Forward pass. `q`, `k`, `v` are `n x c`; returns the attended values
/// (`n x c`) and the softmax matrices (`heads x n x n`).
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    assert!(heads >= 1 && c.is_multiple_of(heads), "channels must split evenly across heads");
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * c];
    let mut probs = vec![0.0; heads * n * n];
    for hd in 0..heads {
        let qh = head_slice(q, n, c, hd, dh);
        let kh = head_slice(k, n, c, hd, dh);
        let vh = head_slice(v, n, c, hd, dh);
        let p = &mut probs[hd * n * n..(hd + 1) * n * n];
        gemm(n, dh, n, scale, &qh, false, &kh, true, 0.0, p);
        softmax_rows(p, n);
        let mut oh = vec![0.0; n * dh];
        gemm(n, n, dh, 1.0, p, false, &vh, false, 0.0, &mut oh);
        scatter_head(&mut out, &oh, n, c, hd, dh);
    }
    (out, probs)
}

/// Backward pass: `(d_q, d_k, d_v)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    d_out: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    n: usize,
    c: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * c];
    let mut dk = vec![0.0; n * c];
    let mut dv = vec![0.0; n * c];
    for hd in 0..heads {
        let qh = head_slice(q, n, c, hd, dh);
        let kh = head_slice(k, n, c, hd, dh);
        let vh = head_slice(v, n, c, hd, dh);
        let doh = head_slice(d_out, n, c, hd, dh);
        let p = &probs[hd * n * n..(hd + 1) * n * n];

        let mut dvh = vec![0.0; n * dh];
        gemm(n, n, dh, 1.0, p, true, &doh, false, 0.0, &mut dvh);
        let mut dp = vec![0.0; n * n];
        gemm(n, dh, n, 1.0, &doh, false, &vh, true, 0.0, &mut dp);
        // softmax Jacobian, row by row
        for r in 0..n {
            let pr = &p[r * n..(r + 1) * n];
            let dr = &mut dp[r * n..(r + 1) * n];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
        }
        let mut dqh = vec![0.0; n * dh];
        gemm(n, n, dh, scale, &dp, false, &kh, false, 0.0, &mut dqh);
        let mut dkh = vec![0.0; n * dh];
        gemm(n, n, dh, scale, &dp, true, &qh, false, 0.0, &mut dkh);
        scatter_head(&mut dq, &dqh, n, c, hd, dh);
        scatter_head(&mut dk, &dkh, n, c, hd, dh);
        scatter_head(&mut dv, &dvh, n, c, hd, dh);
    }
    (dq, dk, dv)
}
