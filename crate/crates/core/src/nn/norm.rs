//! Switchable normalization: a learned softmax mixture over instance, layer
//! and batch statistics. The pipeline runs single images, so batch statistics
//! degenerate to the instance statistics; the mixture still carries all three
//! logits so checkpoints keep the full parameterization.

use crate::nn::NORM_EPS;

/// `(channels, positions)` of a node under the given layout, or `None` when
/// the rank does not fit.
pub(crate) fn sn_dims(shape: &[usize], channels_last: bool) -> Option<(usize, usize)> {
    match (shape.len(), channels_last) {
        (2, true) => Some((shape[1], shape[0])),
        (2, false) => Some((shape[0], shape[1])),
        (3, false) => Some((shape[0], shape[1] * shape[2])),
        _ => None,
    }
}

#[inline]
fn at(channels_last: bool, c: usize, m: usize, ch: usize, i: usize) -> usize {
    if channels_last {
        i * c + ch
    } else {
        ch * m + i
    }
}

fn softmax3(logits: &[f64]) -> [f64; 3] {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = [
        (logits[0] - max).exp(),
        (logits[1] - max).exp(),
        (logits[2] - max).exp(),
    ];
    let total = e[0] + e[1] + e[2];
    [e[0] / total, e[1] / total, e[2] / total]
}

struct SnStats {
    mu_in: Vec<f64>,
    v_in: Vec<f64>,
    mu_ln: f64,
    v_ln: f64,
    /// Mixed per-channel mean and inverse std.
    mu_mix: Vec<f64>,
    inv_std: Vec<f64>,
    /// Softmax weights, order [instance, layer, batch].
    wm: [f64; 3],
    wv: [f64; 3],
}

fn compute_stats(
    x: &[f64],
    c: usize,
    m: usize,
    cl: bool,
    mean_logits: &[f64],
    var_logits: &[f64],
) -> SnStats {
    let mut mu_in = vec![0.0; c];
    let mut v_in = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..m {
            acc += x[at(cl, c, m, ch, i)];
        }
        let mu = acc / m as f64;
        let mut var = 0.0;
        for i in 0..m {
            let d = x[at(cl, c, m, ch, i)] - mu;
            var += d * d;
        }
        mu_in[ch] = mu;
        v_in[ch] = var / m as f64;
    }
    let mu_ln = mu_in.iter().sum::<f64>() / c as f64;
    let mut v_ln = 0.0;
    for ch in 0..c {
        for i in 0..m {
            let d = x[at(cl, c, m, ch, i)] - mu_ln;
            v_ln += d * d;
        }
    }
    v_ln /= (c * m) as f64;

    let wm = softmax3(mean_logits);
    let wv = softmax3(var_logits);
    // Batch stats equal instance stats at batch size 1.
    let a = wm[0] + wm[2];
    let b = wv[0] + wv[2];
    let mu_mix: Vec<f64> = mu_in.iter().map(|&mi| a * mi + wm[1] * mu_ln).collect();
    let inv_std: Vec<f64> = v_in
        .iter()
        .map(|&vi| 1.0 / (b * vi + wv[1] * v_ln + NORM_EPS).sqrt())
        .collect();
    SnStats {
        mu_in,
        v_in,
        mu_ln,
        v_ln,
        mu_mix,
        inv_std,
        wm,
        wv,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sn_forward(
    x: &[f64],
    c: usize,
    m: usize,
    cl: bool,
    mean_logits: &[f64],
    var_logits: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let st = compute_stats(x, c, m, cl, mean_logits, var_logits);
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let (mu, s, gm, bt) = (st.mu_mix[ch], st.inv_std[ch], gamma[ch], beta[ch]);
        for i in 0..m {
            let idx = at(cl, c, m, ch, i);
            y[idx] = gm * (x[idx] - mu) * s + bt;
        }
    }
    y
}

/// Returns `(dx, d_mean_logits, d_var_logits, d_gamma, d_beta)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sn_backward(
    x: &[f64],
    c: usize,
    m: usize,
    cl: bool,
    mean_logits: &[f64],
    var_logits: &[f64],
    gamma: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let st = compute_stats(x, c, m, cl, mean_logits, var_logits);
    let a = st.wm[0] + st.wm[2];
    let b = st.wv[0] + st.wv[2];
    let mf = m as f64;
    let cmf = (c * m) as f64;

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut d_mu_mix = vec![0.0; c];
    let mut d_v_mix = vec![0.0; c];
    for ch in 0..c {
        let (mu, s) = (st.mu_mix[ch], st.inv_std[ch]);
        let mut sum_p = 0.0;
        let mut sum_px = 0.0;
        for i in 0..m {
            let idx = at(cl, c, m, ch, i);
            let xc = x[idx] - mu;
            let gv = g[idx];
            d_gamma[ch] += gv * xc * s;
            d_beta[ch] += gv;
            let p = gv * gamma[ch];
            sum_p += p;
            sum_px += p * xc;
        }
        d_mu_mix[ch] = -s * sum_p;
        d_v_mix[ch] = -0.5 * s * s * s * sum_px;
    }
    let s_mu: f64 = d_mu_mix.iter().sum();
    let s_v: f64 = d_v_mix.iter().sum();

    let mut dx = vec![0.0; x.len()];
    for ch in 0..c {
        let s = st.inv_std[ch];
        for i in 0..m {
            let idx = at(cl, c, m, ch, i);
            let p = g[idx] * gamma[ch];
            dx[idx] = p * s
                + a * d_mu_mix[ch] / mf
                + st.wm[1] * s_mu / cmf
                + b * d_v_mix[ch] * 2.0 * (x[idx] - st.mu_in[ch]) / mf
                + st.wv[1] * s_v * 2.0 * (x[idx] - st.mu_ln) / cmf;
        }
    }

    // Route the mixture gradients to the logits through their softmax.
    let dw_in: f64 = d_mu_mix
        .iter()
        .zip(&st.mu_in)
        .map(|(&dm, &mu)| dm * mu)
        .sum();
    let dw = [dw_in, s_mu * st.mu_ln, dw_in];
    let dot: f64 = st.wm.iter().zip(&dw).map(|(&w, &d)| w * d).sum();
    let d_mean_logits: Vec<f64> = (0..3).map(|j| st.wm[j] * (dw[j] - dot)).collect();

    let du_in: f64 = d_v_mix
        .iter()
        .zip(&st.v_in)
        .map(|(&dv, &vi)| dv * vi)
        .sum();
    let du = [du_in, s_v * st.v_ln, du_in];
    let dot_v: f64 = st.wv.iter().zip(&du).map(|(&w, &d)| w * d).sum();
    let d_var_logits: Vec<f64> = (0..3).map(|j| st.wv[j] * (du[j] - dot_v)).collect();

    (dx, d_mean_logits, d_var_logits, d_gamma, d_beta)
}
