//! Multi-head scaled-dot-product kernels with explicit backward passes.

use super::BlockMask;
use crate::arraymath::{
    lit, matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, DenseArray, Scalar,
};

/// Masked logits receive this additive constant before softmax; large
/// enough to zero the probability in both f32 and f64.
pub const MASK_NEG: f64 = -1e30;

/// Copies a row range out of a 2-D array.
pub(crate) fn split_rows<T: Scalar>(
    x: &DenseArray<T>,
    range: std::ops::Range<usize>,
) -> DenseArray<T> {
    let d = x.cols();
    let mut out = DenseArray::zeros(&[range.len(), d]);
    for (i, r) in range.enumerate() {
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    out
}

pub(crate) fn head_slice<T: Scalar>(x: &DenseArray<T>, heads: usize, head: usize) -> DenseArray<T> {
    let (l, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let mut out = DenseArray::zeros(&[l, dh]);
    for r in 0..l {
        out.row_mut(r)
            .copy_from_slice(&x.row(r)[head * dh..(head + 1) * dh]);
    }
    out
}

pub(crate) fn head_merge<T: Scalar>(
    acc: &mut DenseArray<T>,
    part: &DenseArray<T>,
    heads: usize,
    head: usize,
) {
    let d = acc.cols();
    let dh = d / heads;
    for r in 0..part.rows() {
        acc.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(part.row(r));
    }
}

fn head_merge_add<T: Scalar>(
    acc: &mut DenseArray<T>,
    part: &DenseArray<T>,
    heads: usize,
    head: usize,
) {
    let d = acc.cols();
    let dh = d / heads;
    for r in 0..part.rows() {
        let dst = &mut acc.row_mut(r)[head * dh..(head + 1) * dh];
        for (o, &p) in dst.iter_mut().zip(part.row(r)) {
            *o += p;
        }
    }
}

/// Scaled dot-product attention over projected q/k/v of width d, split into
/// heads. Returns the merged context (q_rows x d) and per-head probabilities.
pub(crate) fn sdpa_forward<T: Scalar>(
    q: &DenseArray<T>,
    k: &DenseArray<T>,
    v: &DenseArray<T>,
    heads: usize,
    mask: Option<&BlockMask>,
) -> (DenseArray<T>, Vec<DenseArray<T>>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let neg = lit::<T>(MASK_NEG);
    let mut ctx = DenseArray::zeros(&[q.rows(), d]);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, heads, h);
        let kh = head_slice(k, heads, h);
        let vh = head_slice(v, heads, h);
        let mut logits = matmul_nt(&qh, &kh).expect("sdpa logits").scale(scale);
        if let Some(m) = mask {
            debug_assert_eq!((m.rows, m.cols), (logits.rows(), logits.cols()));
            for r in 0..logits.rows() {
                let row = logits.row_mut(r);
                for (c, x) in row.iter_mut().enumerate() {
                    if !m.allowed(r, c) {
                        *x += neg;
                    }
                }
            }
        }
        let p = softmax_rows(&logits);
        let c = matmul(&p, &vh).expect("sdpa context");
        head_merge(&mut ctx, &c, heads, h);
        probs.push(p);
    }
    (ctx, probs)
}

/// Backward of [`sdpa_forward`]; masked entries contribute nothing because
/// their probabilities are exactly zero. Returns (d_q, d_k, d_v).
pub(crate) fn sdpa_backward<T: Scalar>(
    d_ctx: &DenseArray<T>,
    q: &DenseArray<T>,
    k: &DenseArray<T>,
    v: &DenseArray<T>,
    probs: &[DenseArray<T>],
    heads: usize,
) -> (DenseArray<T>, DenseArray<T>, DenseArray<T>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut d_q = DenseArray::zeros(q.shape());
    let mut d_k = DenseArray::zeros(k.shape());
    let mut d_v = DenseArray::zeros(v.shape());
    for h in 0..heads {
        let qh = head_slice(q, heads, h);
        let kh = head_slice(k, heads, h);
        let vh = head_slice(v, heads, h);
        let d_ctx_h = head_slice(d_ctx, heads, h);
        let p = &probs[h];
        let d_p = matmul_nt(&d_ctx_h, &vh).expect("sdpa d_p");
        let d_vh = matmul_tn(p, &d_ctx_h).expect("sdpa d_v");
        let d_logits = softmax_rows_backward(p, &d_p).scale(scale);
        let d_qh = matmul(&d_logits, &kh).expect("sdpa d_q");
        let d_kh = matmul_tn(&d_logits, &qh).expect("sdpa d_k");
        head_merge_add(&mut d_q, &d_qh, heads, h);
        head_merge_add(&mut d_k, &d_kh, heads, h);
        head_merge_add(&mut d_v, &d_vh, heads, h);
    }
    (d_q, d_k, d_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arraymath::{draw_normal, RngState};

    fn arr(seed: u64, r: usize, c: usize) -> DenseArray<f64> {
        let mut rng = RngState::new(seed);
        draw_normal::<f64>(&mut rng, r * c).reshape(vec![r, c]).unwrap()
    }

    #[test]
    fn sdpa_backward_matches_finite_difference() {
        let (l, d, heads) = (5, 8, 2);
        let q = arr(1, l, d);
        let k = arr(2, l, d);
        let v = arr(3, l, d);
        let up = arr(4, l, d);
        let loss = |q: &DenseArray<f64>, k: &DenseArray<f64>, v: &DenseArray<f64>| -> f64 {
            let (ctx, _) = sdpa_forward(q, k, v, heads, None);
            ctx.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (ctx, probs) = sdpa_forward(&q, &k, &v, heads, None);
        let _ = ctx;
        let (dq, dk, dv) = sdpa_backward(&up, &q, &k, &v, &probs, heads);
        let h = 1e-6;
        for (label, base, grad) in [("q", &q, &dq), ("k", &k, &dk), ("v", &v, &dv)] {
            for idx in [0usize, 7, 19, l * d - 1] {
                let mut p = base.clone();
                p.data_mut()[idx] += h;
                let mut m = base.clone();
                m.data_mut()[idx] -= h;
                let (lp, lm) = match label {
                    "q" => (loss(&p, &k, &v), loss(&m, &k, &v)),
                    "k" => (loss(&q, &p, &v), loss(&q, &m, &v)),
                    _ => (loss(&q, &k, &p), loss(&q, &k, &m)),
                };
                let num = (lp - lm) / (2.0 * h);
                assert!(
                    (grad.data()[idx] - num).abs() < 1e-6,
                    "{label}[{idx}] {} vs {num}",
                    grad.data()[idx]
                );
            }
        }
    }
}
