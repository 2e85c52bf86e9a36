//! Row-streamed scaled-dot-product attention shared by the cross-attention
//! and MHSA ops. Scores for one query row live only in a per-row buffer, so
//! memory stays `O(n_kv)` regardless of the query count; the backward pass
//! recomputes each row's softmax.
//!
//! Keys and values are repacked head-major and contiguous before the row
//! sweep; at the default widths the head slices would otherwise touch only a
//! quarter of every cache line.

use crate::exec;
use crate::nn::softmax_into;

/// Rows processed per parallel work item; score buffers are reused within a
/// chunk.
const ROW_CHUNK: usize = 8;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Repacks `[n, d]` rows into head-major `[heads][n][dh]`.
fn head_major(m: &[f64], n: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let base = h * n * dh;
        for j in 0..n {
            out[base + j * dh..base + (j + 1) * dh]
                .copy_from_slice(&m[j * d + h * dh..j * d + (h + 1) * dh]);
        }
    }
    out
}

/// `out[i, h·dh..] = Σ_j softmax_j(α·q_i[h]·k_j[h]) · v_j[h]` per head.
/// Shapes: `q: [n_q, d]`, `k, v: [n_kv, d]`, `out: [n_q, d]`, `d = heads·dh`.
pub(crate) fn attn_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_kv: usize,
    d: usize,
    heads: usize,
    alpha: f64,
    out: &mut [f64],
) {
    let dh = d / heads;
    let kh = head_major(k, n_kv, d, heads);
    let vh = head_major(v, n_kv, d, heads);
    exec::for_chunks_mut(out, ROW_CHUNK * d, |chunk_i, rows| {
        let mut scores = vec![0.0; n_kv];
        let mut weights = vec![0.0; n_kv];
        for (local, out_row) in rows.chunks_mut(d).enumerate() {
            let i = chunk_i * ROW_CHUNK + local;
            let q_row = &q[i * d..(i + 1) * d];
            for h in 0..heads {
                let q_h = &q_row[h * dh..(h + 1) * dh];
                let k_h = &kh[h * n_kv * dh..(h + 1) * n_kv * dh];
                let v_h = &vh[h * n_kv * dh..(h + 1) * n_kv * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = alpha * dot(q_h, &k_h[j * dh..(j + 1) * dh]);
                }
                softmax_into(&scores, &mut weights);
                let head_out = &mut out_row[h * dh..(h + 1) * dh];
                head_out.fill(0.0);
                for (j, &a) in weights.iter().enumerate() {
                    let v_row = &v_h[j * dh..(j + 1) * dh];
                    for (o, &vv) in head_out.iter_mut().zip(v_row) {
                        *o += a * vv;
                    }
                }
            }
        }
    });
}

/// Backward of [`attn_forward`]: accumulates into `dq`, `dk`, `dv` (zeroed by
/// the caller). Sequential over query rows — `dk`/`dv` receive scattered
/// contributions whose order must stay fixed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_kv: usize,
    d: usize,
    heads: usize,
    alpha: f64,
    grad_out: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let n_q = q.len() / d;
    let kh = head_major(k, n_kv, d, heads);
    let vh = head_major(v, n_kv, d, heads);
    let mut dkh = vec![0.0; n_kv * d];
    let mut dvh = vec![0.0; n_kv * d];
    let mut scores = vec![0.0; n_kv];
    let mut weights = vec![0.0; n_kv];
    let mut d_weights = vec![0.0; n_kv];
    for i in 0..n_q {
        let q_row = &q[i * d..(i + 1) * d];
        let g_row = &grad_out[i * d..(i + 1) * d];
        for h in 0..heads {
            let q_h = &q_row[h * dh..(h + 1) * dh];
            let g_h = &g_row[h * dh..(h + 1) * dh];
            let head_base = h * n_kv * dh;
            let k_h = &kh[head_base..head_base + n_kv * dh];
            let v_h = &vh[head_base..head_base + n_kv * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = alpha * dot(q_h, &k_h[j * dh..(j + 1) * dh]);
            }
            softmax_into(&scores, &mut weights);
            for (j, dw) in d_weights.iter_mut().enumerate() {
                *dw = dot(g_h, &v_h[j * dh..(j + 1) * dh]);
            }
            let expectation: f64 = weights
                .iter()
                .zip(&d_weights)
                .map(|(&a, &da)| a * da)
                .sum();
            let dq_h = &mut dq[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n_kv {
                let a = weights[j];
                let ds = alpha * a * (d_weights[j] - expectation);
                let k_row = &k_h[j * dh..(j + 1) * dh];
                let dv_row = &mut dvh[head_base + j * dh..head_base + (j + 1) * dh];
                let dk_row = &mut dkh[head_base + j * dh..head_base + (j + 1) * dh];
                for t in 0..dh {
                    dv_row[t] += a * g_h[t];
                    dk_row[t] += ds * q_h[t];
                    dq_h[t] += ds * k_row[t];
                }
            }
        }
    }
    // Unpack head-major accumulators into row-major gradients.
    for h in 0..heads {
        let base = h * n_kv * dh;
        for j in 0..n_kv {
            for t in 0..dh {
                dk[j * d + h * dh + t] += dkh[base + j * dh + t];
                dv[j * d + h * dh + t] += dvh[base + j * dh + t];
            }
        }
    }
}
