//! Raw dense kernels behind the tape ops: matrix products and 3×3
//! convolution with ERP-friendly padding.
//!
//! Every output element is a fixed-order reduction over its inputs, so the
//! parallel and sequential variants are bit-identical; the `_seq` entry
//! points exist for the benchmark suite and for determinism tests.

use crate::exec;

/// Padding behavior per axis for [`conv3x3`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    /// Indices wrap around (longitude continuity).
    Wrap,
    /// Edge values repeat (latitude clamp).
    Replicate,
}

#[inline]
fn pad_index(i: i64, n: usize, mode: PadMode) -> usize {
    match mode {
        PadMode::Wrap => i.rem_euclid(n as i64) as usize,
        PadMode::Replicate => i.clamp(0, n as i64 - 1) as usize,
    }
}

fn matmul_impl(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64], seq: bool) {
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), k * m);
    assert_eq!(out.len(), n * m);
    let fill = |i: usize, row: &mut [f64]| {
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * m..(l + 1) * m];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if seq {
        exec::for_chunks_mut_seq(out, m, fill);
    } else {
        exec::for_chunks_mut(out, m, fill);
    }
}

/// `out[n,m] = a[n,k] · b[k,m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    matmul_impl(a, b, n, k, m, out, false);
}

/// Sequential reference for [`matmul`]; bit-identical output.
pub fn matmul_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    matmul_impl(a, b, n, k, m, out, true);
}

/// `out[n,m] = a[n,k] · b[m,k]ᵀ` (rows of `b` are the right-hand columns).
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    assert_eq!(a.len(), n * k);
    assert_eq!(b.len(), m * k);
    assert_eq!(out.len(), n * m);
    exec::for_chunks_mut(out, m, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
}

/// `out[k,m] = a[n,k]ᵀ · g[n,m]`.
pub fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    assert_eq!(a.len(), n * k);
    assert_eq!(g.len(), n * m);
    assert_eq!(out.len(), k * m);
    exec::for_chunks_mut(out, m, |p, row| {
        row.fill(0.0);
        for i in 0..n {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let g_row = &g[i * m..(i + 1) * m];
            for (o, &gv) in row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    });
}

fn conv3x3_impl(
    x: &[f64],
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    pad: (PadMode, PadMode),
    out: &mut [f64],
    seq: bool,
) {
    assert_eq!(x.len(), c_in * h * w);
    assert_eq!(kernel.len(), c_out * c_in * 9);
    assert_eq!(out.len(), c_out * h * w);
    let (pad_v, pad_h) = pad;
    // One chunk per (output channel, row) pair.
    let fill = |idx: usize, row: &mut [f64]| {
        let co = idx / h;
        let y = idx % h;
        row.fill(0.0);
        for ci in 0..c_in {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * c_in + ci) * 9;
            for dy in 0..3 {
                let sy = pad_index(y as i64 + dy as i64 - 1, h, pad_v);
                let src_row = &plane[sy * w..(sy + 1) * w];
                for dx in 0..3 {
                    let kv = kernel[kbase + dy * 3 + dx];
                    if kv == 0.0 {
                        continue;
                    }
                    let off = dx as i64 - 1;
                    for (xi, o) in row.iter_mut().enumerate() {
                        let sx = pad_index(xi as i64 + off, w, pad_h);
                        *o += kv * src_row[sx];
                    }
                }
            }
        }
    };
    if seq {
        exec::for_chunks_mut_seq(out, w, fill);
    } else {
        exec::for_chunks_mut(out, w, fill);
    }
}

/// Same-size 3×3 convolution, `x: [c_in, h, w]`, `kernel: [c_out, c_in, 3, 3]`.
/// `pad` selects the (vertical, horizontal) padding behavior.
pub fn conv3x3(
    x: &[f64],
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    pad: (PadMode, PadMode),
    out: &mut [f64],
) {
    conv3x3_impl(x, kernel, c_in, c_out, h, w, pad, out, false);
}

/// Sequential reference for [`conv3x3`]; bit-identical output.
pub fn conv3x3_seq(
    x: &[f64],
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    pad: (PadMode, PadMode),
    out: &mut [f64],
) {
    conv3x3_impl(x, kernel, c_in, c_out, h, w, pad, out, true);
}

/// Gradient of [`conv3x3`] with respect to its input (scatter form, one
/// source channel per parallel chunk).
pub(crate) fn conv3x3_grad_input(
    grad_out: &[f64],
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    pad: (PadMode, PadMode),
    grad_x: &mut [f64],
) {
    let (pad_v, pad_h) = pad;
    exec::for_chunks_mut(grad_x, h * w, |ci, dst| {
        for co in 0..c_out {
            let gplane = &grad_out[co * h * w..(co + 1) * h * w];
            let kbase = (co * c_in + ci) * 9;
            for y in 0..h {
                for dy in 0..3 {
                    let sy = pad_index(y as i64 + dy as i64 - 1, h, pad_v);
                    for dx in 0..3 {
                        let kv = kernel[kbase + dy * 3 + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for xi in 0..w {
                            let sx = pad_index(xi as i64 + dx as i64 - 1, w, pad_h);
                            dst[sy * w + sx] += kv * gplane[y * w + xi];
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of [`conv3x3`] with respect to the kernel (gather form, one
/// output channel per parallel chunk).
pub(crate) fn conv3x3_grad_kernel(
    x: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    pad: (PadMode, PadMode),
    grad_k: &mut [f64],
) {
    let (pad_v, pad_h) = pad;
    debug_assert_eq!(grad_k.len(), c_out * c_in * 9);
    exec::for_chunks_mut(grad_k, c_in * 9, |co, dst| {
        let gplane = &grad_out[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for dy in 0..3 {
                for dx in 0..3 {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = pad_index(y as i64 + dy as i64 - 1, h, pad_v);
                        let src_row = &plane[sy * w..(sy + 1) * w];
                        let g_row = &gplane[y * w..(y + 1) * w];
                        for (xi, &gv) in g_row.iter().enumerate() {
                            let sx = pad_index(xi as i64 + dx as i64 - 1, w, pad_h);
                            acc += gv * src_row[sx];
                        }
                    }
                    dst[ci * 9 + dy * 3 + dx] += acc;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_small_hand_case() {
        // [1,2;3,4] * [5,6;7,8] = [19,22;43,50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transposes() {
        let (n, k, m) = (4, 3, 5);
        let a = rand_vec(n * k, 1);
        let b = rand_vec(k * m, 2);
        let mut base = vec![0.0; n * m];
        matmul(&a, &b, n, k, m, &mut base);

        // nt: feed b transposed as [m, k].
        let mut bt = vec![0.0; m * k];
        for i in 0..k {
            for j in 0..m {
                bt[j * k + i] = b[i * m + j];
            }
        }
        let mut out_nt = vec![0.0; n * m];
        matmul_nt(&a, &bt, n, k, m, &mut out_nt);
        for (x, y) in base.iter().zip(&out_nt) {
            assert!((x - y).abs() < 1e-14);
        }

        // tn: feed a transposed as the [n, k] operand.
        let mut at = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                at[j * n + i] = a[i * k + j];
            }
        }
        let mut out_tn = vec![0.0; n * m];
        matmul_tn(&at, &b, k, n, m, &mut out_tn);
        for (x, y) in base.iter().zip(&out_tn) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_parallel_matches_sequential_bitwise() {
        let (n, k, m) = (17, 23, 13);
        let a = rand_vec(n * k, 3);
        let b = rand_vec(k * m, 4);
        let mut p = vec![0.0; n * m];
        let mut s = vec![0.0; n * m];
        matmul(&a, &b, n, k, m, &mut p);
        matmul_seq(&a, &b, n, k, m, &mut s);
        assert_eq!(p, s);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = rand_vec(2 * 5 * 7, 5);
        let mut k = vec![0.0; 2 * 2 * 9];
        k[0 * 2 * 9 + 0 * 9 + 4] = 1.0; // out0 <- in0 center
        k[1 * 2 * 9 + 1 * 9 + 4] = 1.0; // out1 <- in1 center
        let mut out = vec![0.0; 2 * 5 * 7];
        conv3x3(&x, &k, 2, 2, 5, 7, (PadMode::Replicate, PadMode::Wrap), &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_all_ones_preserves_constants() {
        let x = vec![3.0; 4 * 6];
        let k = vec![1.0; 9];
        let mut out = vec![0.0; 4 * 6];
        conv3x3(&x, &k, 1, 1, 4, 6, (PadMode::Replicate, PadMode::Wrap), &mut out);
        for &v in &out {
            assert!((v - 27.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_naive_six_loop_reference() {
        let (ci, co, h, w) = (2, 3, 5, 7);
        let x = rand_vec(ci * h * w, 6);
        let k = rand_vec(co * ci * 9, 7);
        let pad = (PadMode::Replicate, PadMode::Wrap);
        let mut out = vec![0.0; co * h * w];
        conv3x3(&x, &k, ci, co, h, w, pad, &mut out);

        for oc in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for dy in 0..3i64 {
                            for dx in 0..3i64 {
                                let sy = (y as i64 + dy - 1).clamp(0, h as i64 - 1) as usize;
                                let sx = (xx as i64 + dx - 1).rem_euclid(w as i64) as usize;
                                acc += k[((oc * ci + ic) * 9) + (dy * 3 + dx) as usize]
                                    * x[ic * h * w + sy * w + sx];
                            }
                        }
                    }
                    let got = out[oc * h * w + y * w + xx];
                    assert!((got - acc).abs() < 1e-12, "({oc},{y},{xx})");
                }
            }
        }
    }

    #[test]
    fn conv_circular_padding_is_shift_equivariant() {
        let (h, w) = (4, 8);
        let x = rand_vec(h * w, 8);
        let k = rand_vec(9, 9);
        let pad = (PadMode::Replicate, PadMode::Wrap);
        let mut out = vec![0.0; h * w];
        conv3x3(&x, &k, 1, 1, h, w, pad, &mut out);

        let shift = 3usize;
        let mut xs = vec![0.0; h * w];
        for y in 0..h {
            for c in 0..w {
                xs[y * w + (c + shift) % w] = x[y * w + c];
            }
        }
        let mut out_s = vec![0.0; h * w];
        conv3x3(&xs, &k, 1, 1, h, w, pad, &mut out_s);
        for y in 0..h {
            for c in 0..w {
                assert_eq!(out_s[y * w + (c + shift) % w], out[y * w + c]);
            }
        }
    }
}
