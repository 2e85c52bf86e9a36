//! Minimal reverse-mode differentiable tensor core.
//!
//! A [`Tape`] owns an append-only arena of nodes; every operation evaluates
//! eagerly and records enough to run the reverse pass. Creation order is a
//! topological order, so [`Tape::backward`] is a single reverse sweep with a
//! deterministic accumulation order. Attention ops are fused and row-streamed:
//! the `n_q × n_kv` score matrix is never materialized, and the backward pass
//! recomputes each row's softmax instead of storing it.

pub mod gradcheck;
pub mod kernels;

mod attention;
mod norm;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::resample::SamplePlan;

pub use kernels::PadMode;

/// Variance floor used by every normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Multi-head attention geometry.
#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, model_dim: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::shape(
                "attention_config",
                format!("model_dim {model_dim} not divisible by heads {heads}"),
            ));
        }
        Ok(AttentionConfig { heads, model_dim })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

struct AttnSaved {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

struct MhsaSaved {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul {
        a: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    SoftmaxRows(usize),
    Conv3x3 {
        x: usize,
        k: usize,
        pad: (PadMode, PadMode),
    },
    Conv1x1 {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    AddChannelBias {
        x: usize,
        b: usize,
    },
    AvgPool2(usize),
    Upsample2x(usize),
    Silu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Abs(usize),
    Sum(usize),
    MeanMasked {
        x: usize,
        mask: Arc<Vec<bool>>,
        count: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
    ChwToRows(usize),
    GlobalAvgPool(usize),
    MulChannels {
        x: usize,
        s: usize,
    },
    SwitchableNorm {
        x: usize,
        mean_logits: usize,
        var_logits: usize,
        gamma: usize,
        beta: usize,
        channels_last: bool,
    },
    CrossAttention {
        q_src: usize,
        kv_src: usize,
        wq: usize,
        wk: usize,
        wv: usize,
        alpha: f64,
        saved: AttnSaved,
    },
    Mhsa {
        x: usize,
        wq: usize,
        wk: usize,
        wv: usize,
        wo: usize,
        heads: usize,
        saved: MhsaSaved,
    },
    GatherTokens {
        x: usize,
        plan: Arc<SamplePlan>,
    },
    ScatterTokens {
        tokens: usize,
        plan: Arc<SamplePlan>,
    },
    Sobel(usize),
    BerHu {
        pred: usize,
        gt: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
        count: usize,
        threshold: f64,
        /// Valid index attaining max|error|; the threshold derivative routes
        /// through it.
        argmax: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Append-only computation graph with eager forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, shape: &[usize], values: &[f64]) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} does not match {} values", values.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), values.to_vec(), Op::Leaf))
    }

    /// Leaf holding a grid's values with shape `[channels, height, width]`.
    pub fn leaf_grid(&mut self, g: &Grid) -> Var {
        self.push(
            vec![g.channels, g.height, g.width],
            g.data.clone(),
            Op::Leaf,
        )
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].grad
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    /// Copies a `[c, h, w]` node back into a grid, attaching `mask`.
    pub fn value_grid(&self, v: Var, mask: Option<Vec<bool>>) -> Grid {
        let shape = self.shape(v);
        assert_eq!(shape.len(), 3, "value_grid needs a rank-3 node");
        Grid {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            data: self.value(v).to_vec(),
            mask,
        }
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a.id, b.id)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a.id, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; n * m];
        kernels::matmul(self.value(a), self.value(b), n, k, m, &mut value);
        Ok(self.push(vec![n, m], value, Op::MatMul { a: a.id, b: b.id }))
    }

    /// `y = x·W + b`, with `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape("linear", format!("{sx:?} x {sw:?}")));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[1]);
        if let Some(bias) = b {
            if self.shape(bias) != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs d_out {dout}", self.shape(bias)),
                ));
            }
        }
        let mut value = vec![0.0; n * dout];
        kernels::matmul(self.value(x), self.value(w), n, din, dout, &mut value);
        if let Some(bias) = b {
            let bv = self.value(bias);
            for row in value.chunks_mut(dout) {
                add_into(row, bv);
            }
        }
        Ok(self.push(
            vec![n, dout],
            value,
            Op::Linear {
                x: x.id,
                w: w.id,
                b: b.map(|v| v.id),
            },
        ))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let mut value = vec![0.0; n * m];
        for (row_out, row_in) in value.chunks_mut(m).zip(self.value(x).chunks(m)) {
            softmax_into(row_in, row_out);
        }
        Ok(self.push(vec![n, m], value, Op::SoftmaxRows(x.id)))
    }

    /// Same-size 3×3 convolution; `pad` is (vertical, horizontal).
    pub fn conv3x3(&mut self, x: Var, k: Var, pad: (PadMode, PadMode)) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::shape("conv3x3", format!("x {sx:?}, kernel {sk:?}")));
        }
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let co = sk[0];
        let mut value = vec![0.0; co * h * w];
        kernels::conv3x3(self.value(x), self.value(k), ci, co, h, w, pad, &mut value);
        Ok(self.push(
            vec![co, h, w],
            value,
            Op::Conv3x3 {
                x: x.id,
                k: k.id,
                pad,
            },
        ))
    }

    /// ERP default padding: circular horizontally, replicate vertically.
    pub fn conv3x3_erp(&mut self, x: Var, k: Var) -> Result<Var> {
        self.conv3x3(x, k, (PadMode::Replicate, PadMode::Wrap))
    }

    /// Per-pixel channel mix: `x: [c_in, h, w]`, `w: [c_out, c_in]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(Error::shape("conv1x1", format!("x {sx:?}, w {sw:?}")));
        }
        let (ci, h, w_) = (sx[0], sx[1], sx[2]);
        let co = sw[0];
        if let Some(bias) = b {
            if self.shape(bias) != [co] {
                return Err(Error::shape("conv1x1", "bias shape".to_string()));
            }
        }
        let hw = h * w_;
        let mut value = vec![0.0; co * hw];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for oc in 0..co {
                let (acc, _rest) = value[oc * hw..(oc + 1) * hw].split_at_mut(hw);
                for ic in 0..ci {
                    let coef = wv[oc * ci + ic];
                    if coef == 0.0 {
                        continue;
                    }
                    for (o, &xvv) in acc.iter_mut().zip(&xv[ic * hw..(ic + 1) * hw]) {
                        *o += coef * xvv;
                    }
                }
            }
        }
        if let Some(bias) = b {
            let bv = self.value(bias).to_vec();
            for (oc, bias_v) in bv.iter().enumerate() {
                for o in &mut value[oc * hw..(oc + 1) * hw] {
                    *o += bias_v;
                }
            }
        }
        Ok(self.push(
            vec![co, h, w_],
            value,
            Op::Conv1x1 {
                x: x.id,
                w: w.id,
                b: b.map(|v| v.id),
            },
        ))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("x {sx:?}, b {sb:?}"),
            ));
        }
        let hw = sx[1] * sx[2];
        let bv = self.value(b).to_vec();
        let mut value = self.value(x).to_vec();
        for (ch, bias_v) in bv.iter().enumerate() {
            for o in &mut value[ch * hw..(ch + 1) * hw] {
                *o += bias_v;
            }
        }
        Ok(self.push(
            sx.to_vec(),
            value,
            Op::AddChannelBias { x: x.id, b: b.id },
        ))
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut value = vec![0.0; c * oh * ow];
        let xv = self.value(x);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    value[ch * oh * ow + y * ow + xx] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], value, Op::AvgPool2(x.id)))
    }

    /// Bilinear 2× upsampling, align-corners=false.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut value = vec![0.0; c * oh * ow];
        let xv = self.value(x);
        let ytaps = upsample_axis_taps(h);
        let xtaps = upsample_axis_taps(w);
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            let out_plane = &mut value[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    out_plane[oy * ow + ox] = (1.0 - fy) * (1.0 - fx) * plane[y0 * w + x0]
                        + (1.0 - fy) * fx * plane[y0 * w + x1]
                        + fy * (1.0 - fx) * plane[y1 * w + x0]
                        + fy * fx * plane[y1 * w + x1];
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], value, Op::Upsample2x(x.id)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Silu(x.id))
    }

    pub fn sigmoid_op(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Sigmoid(x.id))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.value(x).iter().map(|&v| softplus(v)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Softplus(x.id))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value: Vec<f64> = self.value(x).iter().map(|v| v.abs()).collect();
        self.push(self.shape(x).to_vec(), value, Op::Abs(x.id))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum(x.id))
    }

    /// Mean over the elements where `mask` is true.
    pub fn mean_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape(
                "mean_masked",
                format!("mask len {} vs {} values", mask.len(), xv.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("mean over an empty valid set".into()));
        }
        let mut acc = 0.0;
        for (v, &m) in xv.iter().zip(mask.iter()) {
            if m {
                acc += v;
            }
        }
        let value = vec![acc / count as f64];
        Ok(self.push(vec![1], value, Op::MeanMasked { x: x.id, mask, count }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
            return Err(Error::shape(
                "concat_channels",
                format!("{sa:?} vs {sb:?}"),
            ));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut value = Vec::with_capacity(numel(&shape));
        value.extend_from_slice(self.value(a));
        value.extend_from_slice(self.value(b));
        Ok(self.push(shape, value, Op::ConcatChannels { a: a.id, b: b.id }))
    }

    /// `[c, h, w]` → `[h·w, c]` token rows.
    pub fn chw_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("chw_to_rows", format!("{s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let xv = self.value(x);
        let mut value = vec![0.0; c * hw];
        for ch in 0..c {
            for i in 0..hw {
                value[i * c + ch] = xv[ch * hw + i];
            }
        }
        Ok(self.push(vec![hw, c], value, Op::ChwToRows(x.id)))
    }

    /// `[c, h, w]` → `[1, c]` spatial mean per channel.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let xv = self.value(x);
        let value: Vec<f64> = (0..c)
            .map(|ch| xv[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(vec![1, c], value, Op::GlobalAvgPool(x.id)))
    }

    /// Broadcast per-channel scaling: `x: [c, h, w]`, `s: [1, c]`.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 3 || ss != [1, sx[0]] {
            return Err(Error::shape(
                "mul_channels",
                format!("x {sx:?}, s {ss:?}"),
            ));
        }
        let hw = sx[1] * sx[2];
        let sv = self.value(s).to_vec();
        let mut value = self.value(x).to_vec();
        for (ch, coef) in sv.iter().enumerate() {
            for o in &mut value[ch * hw..(ch + 1) * hw] {
                *o *= coef;
            }
        }
        Ok(self.push(sx.to_vec(), value, Op::MulChannels { x: x.id, s: s.id }))
    }

    /// Switchable normalization: softmax-mixed instance/layer/batch statistics
    /// followed by a per-channel affine. At batch size 1 the batch statistics
    /// coincide with the instance statistics.
    ///
    /// `channels_last = false`: `x` is `[c, h, w]` (or `[c, m]`).
    /// `channels_last = true`: `x` is `[n, c]` token rows.
    pub fn switchable_norm(
        &mut self,
        x: Var,
        mean_logits: Var,
        var_logits: Var,
        gamma: Var,
        beta: Var,
        channels_last: bool,
    ) -> Result<Var> {
        let (c, m) = norm::sn_dims(self.shape(x), channels_last)
            .ok_or_else(|| Error::shape("switchable_norm", format!("{:?}", self.shape(x))))?;
        if m < 2 {
            return Err(Error::shape(
                "switchable_norm",
                format!("needs at least 2 positions, got {m}"),
            ));
        }
        for (name, v, want) in [
            ("mean_logits", mean_logits, 3),
            ("var_logits", var_logits, 3),
            ("gamma", gamma, c),
            ("beta", beta, c),
        ] {
            if numel(self.shape(v)) != want {
                return Err(Error::shape(
                    "switchable_norm",
                    format!("{name} has {} values, want {want}", numel(self.shape(v))),
                ));
            }
        }
        let value = norm::sn_forward(
            self.value(x),
            c,
            m,
            channels_last,
            self.value(mean_logits),
            self.value(var_logits),
            self.value(gamma),
            self.value(beta),
        );
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::SwitchableNorm {
                x: x.id,
                mean_logits: mean_logits.id,
                var_logits: var_logits.id,
                gamma: gamma.id,
                beta: beta.id,
                channels_last,
            },
        ))
    }

    /// Single-head cross-attention: queries from `q_src`, keys and values
    /// from `kv_src`, shared width `d`. With `scaled`, scores are divided by
    /// `√d` before the softmax.
    pub fn cross_attention(
        &mut self,
        q_src: Var,
        kv_src: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        scaled: bool,
    ) -> Result<Var> {
        let (sq, skv) = (self.shape(q_src), self.shape(kv_src));
        if sq.len() != 2 || skv.len() != 2 || sq[1] != skv[1] {
            return Err(Error::shape(
                "cross_attention",
                format!("q {sq:?}, kv {skv:?}"),
            ));
        }
        let d = sq[1];
        for (name, w) in [("W_q", wq), ("W_k", wk), ("W_v", wv)] {
            if self.shape(w) != [d, d] {
                return Err(Error::shape(
                    "cross_attention",
                    format!("{name} is {:?}, want [{d}, {d}]", self.shape(w)),
                ));
            }
        }
        let (nq, nkv) = (sq[0], skv[0]);
        let alpha = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };

        let mut q = vec![0.0; nq * d];
        let mut k = vec![0.0; nkv * d];
        let mut v = vec![0.0; nkv * d];
        kernels::matmul(self.value(q_src), self.value(wq), nq, d, d, &mut q);
        kernels::matmul(self.value(kv_src), self.value(wk), nkv, d, d, &mut k);
        kernels::matmul(self.value(kv_src), self.value(wv), nkv, d, d, &mut v);

        let mut value = vec![0.0; nq * d];
        attention::attn_forward(&q, &k, &v, nkv, d, 1, alpha, &mut value);

        Ok(self.push(
            vec![nq, d],
            value,
            Op::CrossAttention {
                q_src: q_src.id,
                kv_src: kv_src.id,
                wq: wq.id,
                wk: wk.id,
                wv: wv.id,
                alpha,
                saved: AttnSaved { q, k, v },
            },
        ))
    }

    /// Multi-head self-attention over token rows with output projection and
    /// residual connection. Head scores scale by `1/√head_dim`.
    pub fn mhsa(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        config: AttentionConfig,
    ) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] != config.model_dim {
            return Err(Error::shape(
                "mhsa",
                format!("tokens {s:?}, model_dim {}", config.model_dim),
            ));
        }
        let (n, d) = (s[0], s[1]);
        for (name, w) in [("W_q", wq), ("W_k", wk), ("W_v", wv), ("W_o", wo)] {
            if self.shape(w) != [d, d] {
                return Err(Error::shape(
                    "mhsa",
                    format!("{name} is {:?}, want [{d}, {d}]", self.shape(w)),
                ));
            }
        }
        let heads = config.heads;
        let dh = config.head_dim();
        let alpha = 1.0 / (dh as f64).sqrt();

        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        kernels::matmul(self.value(x), self.value(wq), n, d, d, &mut q);
        kernels::matmul(self.value(x), self.value(wk), n, d, d, &mut k);
        kernels::matmul(self.value(x), self.value(wv), n, d, d, &mut v);

        let mut attn = vec![0.0; n * d];
        attention::attn_forward(&q, &k, &v, n, d, heads, alpha, &mut attn);

        let mut value = vec![0.0; n * d];
        kernels::matmul(&attn, self.value(wo), n, d, d, &mut value);
        add_into(&mut value, self.value(x));

        Ok(self.push(
            vec![n, d],
            value,
            Op::Mhsa {
                x: x.id,
                wq: wq.id,
                wk: wk.id,
                wv: wv.id,
                wo: wo.id,
                heads,
                saved: MhsaSaved { q, k, v, attn },
            },
        ))
    }

    /// Resamples an ERP-layout grid into token rows through a precompiled
    /// plan: `x: [c, h, w]` → `[plan.out_len, c]`.
    pub fn gather_tokens(&mut self, x: Var, plan: Arc<SamplePlan>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] * s[2] != plan.src_len {
            return Err(Error::shape(
                "gather_tokens",
                format!("x {s:?} vs plan src {}", plan.src_len),
            ));
        }
        let c = s[0];
        let mut value = vec![0.0; plan.out_len * c];
        plan.apply_to_tokens(self.value(x), c, &mut value);
        Ok(self.push(vec![plan.out_len, c], value, Op::GatherTokens { x: x.id, plan }))
    }

    /// Stitches token rows back to an ERP-layout grid through a precompiled
    /// plan: `tokens: [plan.src_len, c]` → `[c, height, width]`.
    pub fn scatter_tokens(
        &mut self,
        tokens: Var,
        plan: Arc<SamplePlan>,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let s = self.shape(tokens);
        if s.len() != 2 || s[0] != plan.src_len || height * width != plan.out_len {
            return Err(Error::shape(
                "scatter_tokens",
                format!(
                    "tokens {s:?} vs plan src {} / out {}",
                    plan.src_len, plan.out_len
                ),
            ));
        }
        let c = s[1];
        let mut value = vec![0.0; c * plan.out_len];
        plan.apply_from_tokens(self.value(tokens), c, &mut value);
        Ok(self.push(
            vec![c, height, width],
            value,
            Op::ScatterTokens {
                tokens: tokens.id,
                plan,
            },
        ))
    }

    /// Valid-window Sobel responses of a single-channel map:
    /// `[1, h, w]` → `[2, h-2, w-2]` (x-response, then y-response).
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != 1 || s[1] < 3 || s[2] < 3 {
            return Err(Error::shape("sobel", format!("{s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let (oh, ow) = (h - 2, w - 2);
        let xv = self.value(x);
        let mut value = vec![0.0; 2 * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let v = xv[(y + dy) * w + xx + dx];
                        gx += SOBEL_X[dy][dx] * v;
                        gy += SOBEL_Y[dy][dx] * v;
                    }
                }
                value[y * ow + xx] = gx;
                value[oh * ow + y * ow + xx] = gy;
            }
        }
        Ok(self.push(vec![2, oh, ow], value, Op::Sobel(x.id)))
    }

    /// Reverse Huber penalty, averaged over valid pixels. The threshold is
    /// `c = 0.2·max|pred − gt|` over the valid set and is treated as a
    /// constant by the backward pass.
    pub fn berhu(&mut self, pred: Var, gt: Arc<Vec<f64>>, mask: Arc<Vec<bool>>) -> Result<Var> {
        let pv = self.value(pred);
        if gt.len() != pv.len() || mask.len() != pv.len() {
            return Err(Error::shape(
                "berhu",
                format!("{} preds, {} gts, {} mask", pv.len(), gt.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("berhu over an empty valid set".into()));
        }
        let mut max_abs = 0.0f64;
        let mut argmax = 0usize;
        for i in 0..pv.len() {
            if mask[i] {
                let a = (pv[i] - gt[i]).abs();
                if a > max_abs {
                    max_abs = a;
                    argmax = i;
                }
            }
        }
        let threshold = 0.2 * max_abs;
        let mut acc = 0.0;
        for i in 0..pv.len() {
            if mask[i] {
                let e = pv[i] - gt[i];
                acc += berhu_penalty(e, threshold);
            }
        }
        let value = vec![acc / count as f64];
        Ok(self.push(
            vec![1],
            value,
            Op::BerHu {
                pred: pred.id,
                gt,
                mask,
                count,
                threshold,
                argmax,
            },
        ))
    }

    /// Reverse sweep: populates `grad` for every node the loss depends on.
    /// `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut live = vec![false; n];
        live[loss.id] = true;
        self.nodes[loss.id].grad[0] += 1.0;

        for i in (0..=loss.id).rev() {
            if !live[i] {
                continue;
            }
            let contribs = self.node_backward(i);
            for (id, c) in contribs {
                live[id] = true;
                add_into(&mut self.nodes[id].grad, &c);
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn node_backward(&self, i: usize) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let g = &node.grad;
        let val = |id: usize| -> &[f64] { &self.nodes[id].value };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![(*a, g.clone()), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(val(*b)).map(|(gv, bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(val(*a)).map(|(gv, av)| gv * av).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::MatMul { a, b } => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let mut da = vec![0.0; n * k];
                let mut db = vec![0.0; k * m];
                kernels::matmul_nt(g, val(*b), n, m, k, &mut da);
                kernels::matmul_tn(val(*a), g, n, k, m, &mut db);
                vec![(*a, da), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (&self.nodes[*x].shape, &self.nodes[*w].shape);
                let (n, din, dout) = (sx[0], sx[1], sw[1]);
                let mut dx = vec![0.0; n * din];
                let mut dw = vec![0.0; din * dout];
                kernels::matmul_nt(g, val(*w), n, dout, din, &mut dx);
                kernels::matmul_tn(val(*x), g, n, din, dout, &mut dw);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(bias) = b {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        add_into(&mut db, row);
                    }
                    out.push((*bias, db));
                }
                out
            }
            Op::SoftmaxRows(x) => {
                let m = node.shape[1];
                let mut dx = vec![0.0; g.len()];
                for ((dx_row, g_row), y_row) in dx
                    .chunks_mut(m)
                    .zip(g.chunks(m))
                    .zip(node.value.chunks(m))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(gv, yv)| gv * yv).sum();
                    for ((d, &gv), &yv) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(x.to_owned(), dx)]
            }
            Op::Conv3x3 { x, k, pad } => {
                let sx = &self.nodes[*x].shape;
                let sk = &self.nodes[*k].shape;
                let (ci, h, w) = (sx[0], sx[1], sx[2]);
                let co = sk[0];
                let mut dx = vec![0.0; ci * h * w];
                let mut dk = vec![0.0; co * ci * 9];
                kernels::conv3x3_grad_input(g, val(*k), ci, co, h, w, *pad, &mut dx);
                kernels::conv3x3_grad_kernel(val(*x), g, ci, co, h, w, *pad, &mut dk);
                vec![(*x, dx), (*k, dk)]
            }
            Op::Conv1x1 { x, w, b } => {
                let sx = &self.nodes[*x].shape;
                let sw = &self.nodes[*w].shape;
                let (ci, hw) = (sx[0], sx[1] * sx[2]);
                let co = sw[0];
                let wv = val(*w);
                let xv = val(*x);
                let mut dx = vec![0.0; ci * hw];
                for ic in 0..ci {
                    for oc in 0..co {
                        let coef = wv[oc * ci + ic];
                        if coef == 0.0 {
                            continue;
                        }
                        let g_plane = &g[oc * hw..(oc + 1) * hw];
                        for (o, &gv) in dx[ic * hw..(ic + 1) * hw].iter_mut().zip(g_plane) {
                            *o += coef * gv;
                        }
                    }
                }
                let mut dw = vec![0.0; co * ci];
                for oc in 0..co {
                    let g_plane = &g[oc * hw..(oc + 1) * hw];
                    for ic in 0..ci {
                        let x_plane = &xv[ic * hw..(ic + 1) * hw];
                        dw[oc * ci + ic] = g_plane
                            .iter()
                            .zip(x_plane)
                            .map(|(gv, xvv)| gv * xvv)
                            .sum();
                    }
                }
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(bias) = b {
                    let db: Vec<f64> = (0..co)
                        .map(|oc| g[oc * hw..(oc + 1) * hw].iter().sum())
                        .collect();
                    out.push((*bias, db));
                }
                out
            }
            Op::AddChannelBias { x, b } => {
                let sx = &self.nodes[*x].shape;
                let hw = sx[1] * sx[2];
                let db: Vec<f64> = (0..sx[0])
                    .map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum())
                    .collect();
                vec![(*x, g.clone()), (*b, db)]
            }
            Op::AvgPool2(x) => {
                let sx = &self.nodes[*x].shape;
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g[ch * oh * ow + y * ow + xx];
                            let base = ch * h * w + 2 * y * w + 2 * xx;
                            dx[base] += gv;
                            dx[base + 1] += gv;
                            dx[base + w] += gv;
                            dx[base + w + 1] += gv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Upsample2x(x) => {
                let sx = &self.nodes[*x].shape;
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let ytaps = upsample_axis_taps(h);
                let xtaps = upsample_axis_taps(w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                    let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
                    for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                            let gv = gplane[oy * ow + ox];
                            dplane[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                            dplane[y0 * w + x1] += (1.0 - fy) * fx * gv;
                            dplane[y1 * w + x0] += fy * (1.0 - fx) * gv;
                            dplane[y1 * w + x1] += fy * fx * gv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Silu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Softplus(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| gv * sigmoid(xv))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Abs(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| gv * sign(xv))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.len();
                vec![(*x, vec![g[0]; n])]
            }
            Op::MeanMasked { x, mask, count } => {
                let scale = g[0] / *count as f64;
                let dx: Vec<f64> = mask
                    .iter()
                    .map(|&m| if m { scale } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::ConcatChannels { a, b } => {
                let na = self.nodes[*a].value.len();
                vec![(*a, g[..na].to_vec()), (*b, g[na..].to_vec())]
            }
            Op::ChwToRows(x) => {
                let sx = &self.nodes[*x].shape;
                let (c, hw) = (sx[0], sx[1] * sx[2]);
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    for i in 0..hw {
                        dx[ch * hw + i] = g[i * c + ch];
                    }
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let sx = &self.nodes[*x].shape;
                let (c, hw) = (sx[0], sx[1] * sx[2]);
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    let gv = g[ch] / hw as f64;
                    for o in &mut dx[ch * hw..(ch + 1) * hw] {
                        *o = gv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::MulChannels { x, s } => {
                let sx = &self.nodes[*x].shape;
                let (c, hw) = (sx[0], sx[1] * sx[2]);
                let sv = val(*s);
                let xv = val(*x);
                let mut dx = vec![0.0; c * hw];
                let mut ds = vec![0.0; c];
                for ch in 0..c {
                    let coef = sv[ch];
                    let g_plane = &g[ch * hw..(ch + 1) * hw];
                    let x_plane = &xv[ch * hw..(ch + 1) * hw];
                    for (o, &gv) in dx[ch * hw..(ch + 1) * hw].iter_mut().zip(g_plane) {
                        *o = coef * gv;
                    }
                    ds[ch] = g_plane.iter().zip(x_plane).map(|(gv, xvv)| gv * xvv).sum();
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::SwitchableNorm {
                x,
                mean_logits,
                var_logits,
                gamma,
                beta,
                channels_last,
            } => {
                let (c, m) = norm::sn_dims(&self.nodes[*x].shape, *channels_last).unwrap();
                let (dx, dml, dvl, dg, db) = norm::sn_backward(
                    val(*x),
                    c,
                    m,
                    *channels_last,
                    val(*mean_logits),
                    val(*var_logits),
                    val(*gamma),
                    g,
                );
                vec![
                    (*x, dx),
                    (*mean_logits, dml),
                    (*var_logits, dvl),
                    (*gamma, dg),
                    (*beta, db),
                ]
            }
            Op::CrossAttention {
                q_src,
                kv_src,
                wq,
                wk,
                wv,
                alpha,
                saved,
            } => {
                let d = node.shape[1];
                let nq = node.shape[0];
                let nkv = self.nodes[*kv_src].shape[0];
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nkv * d];
                let mut dv = vec![0.0; nkv * d];
                attention::attn_backward(
                    &saved.q, &saved.k, &saved.v, nkv, d, 1, *alpha, g, &mut dq, &mut dk,
                    &mut dv,
                );
                let mut d_qsrc = vec![0.0; nq * d];
                let mut d_kv = vec![0.0; nkv * d];
                let mut tmp = vec![0.0; nkv * d];
                kernels::matmul_nt(&dq, val(*wq), nq, d, d, &mut d_qsrc);
                kernels::matmul_nt(&dk, val(*wk), nkv, d, d, &mut d_kv);
                kernels::matmul_nt(&dv, val(*wv), nkv, d, d, &mut tmp);
                add_into(&mut d_kv, &tmp);
                let mut dwq = vec![0.0; d * d];
                let mut dwk = vec![0.0; d * d];
                let mut dwv = vec![0.0; d * d];
                kernels::matmul_tn(val(*q_src), &dq, nq, d, d, &mut dwq);
                kernels::matmul_tn(val(*kv_src), &dk, nkv, d, d, &mut dwk);
                kernels::matmul_tn(val(*kv_src), &dv, nkv, d, d, &mut dwv);
                vec![
                    (*q_src, d_qsrc),
                    (*kv_src, d_kv),
                    (*wq, dwq),
                    (*wk, dwk),
                    (*wv, dwv),
                ]
            }
            Op::Mhsa {
                x,
                wq,
                wk,
                wv,
                wo,
                heads,
                saved,
            } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let dh = d / heads;
                let alpha = 1.0 / (dh as f64).sqrt();

                // Residual path plus output projection.
                let mut dx = g.clone();
                let mut d_attn = vec![0.0; n * d];
                kernels::matmul_nt(g, val(*wo), n, d, d, &mut d_attn);
                let mut dwo = vec![0.0; d * d];
                kernels::matmul_tn(&saved.attn, g, n, d, d, &mut dwo);

                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                attention::attn_backward(
                    &saved.q, &saved.k, &saved.v, n, d, *heads, alpha, &d_attn, &mut dq,
                    &mut dk, &mut dv,
                );
                let mut tmp = vec![0.0; n * d];
                kernels::matmul_nt(&dq, val(*wq), n, d, d, &mut tmp);
                add_into(&mut dx, &tmp);
                kernels::matmul_nt(&dk, val(*wk), n, d, d, &mut tmp);
                add_into(&mut dx, &tmp);
                kernels::matmul_nt(&dv, val(*wv), n, d, d, &mut tmp);
                add_into(&mut dx, &tmp);

                let mut dwq = vec![0.0; d * d];
                let mut dwk = vec![0.0; d * d];
                let mut dwv = vec![0.0; d * d];
                kernels::matmul_tn(val(*x), &dq, n, d, d, &mut dwq);
                kernels::matmul_tn(val(*x), &dk, n, d, d, &mut dwk);
                kernels::matmul_tn(val(*x), &dv, n, d, d, &mut dwv);
                vec![(*x, dx), (*wq, dwq), (*wk, dwk), (*wv, dwv), (*wo, dwo)]
            }
            Op::GatherTokens { x, plan } => {
                let c = node.shape[1];
                let mut dx = vec![0.0; c * plan.src_len];
                plan.grad_apply_to_tokens(g, c, &mut dx);
                vec![(*x, dx)]
            }
            Op::ScatterTokens { tokens, plan } => {
                let c = node.shape[0];
                let mut dt = vec![0.0; plan.src_len * c];
                plan.grad_apply_from_tokens(g, c, &mut dt);
                vec![(*tokens, dt)]
            }
            Op::Sobel(x) => {
                let sx = &self.nodes[*x].shape;
                let (h, w) = (sx[1], sx[2]);
                let (oh, ow) = (h - 2, w - 2);
                let mut dx = vec![0.0; h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let gx = g[y * ow + xx];
                        let gy = g[oh * ow + y * ow + xx];
                        for dy in 0..3 {
                            for dxx in 0..3 {
                                dx[(y + dy) * w + xx + dxx] +=
                                    SOBEL_X[dy][dxx] * gx + SOBEL_Y[dy][dxx] * gy;
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::BerHu {
                pred,
                gt,
                mask,
                count,
                threshold,
                argmax,
            } => {
                let pv = val(*pred);
                let scale = g[0] / *count as f64;
                let c = *threshold;
                let mut dx: Vec<f64> = pv
                    .iter()
                    .zip(gt.iter())
                    .zip(mask.iter())
                    .map(|((&p, &t), &m)| {
                        if !m {
                            return 0.0;
                        }
                        let e = p - t;
                        if c == 0.0 {
                            0.0
                        } else if e.abs() <= c {
                            scale * sign(e)
                        } else {
                            scale * e / c
                        }
                    })
                    .collect();
                // The threshold is 0.2·|e| at the argmax pixel, so the
                // quadratic branch feeds a derivative back through it:
                // d/dc[(e²+c²)/(2c)] = (c²−e²)/(2c²).
                if c > 0.0 {
                    let mut dloss_dc = 0.0;
                    for i in 0..pv.len() {
                        if mask[i] {
                            let e = pv[i] - gt[i];
                            if e.abs() > c {
                                dloss_dc += (c * c - e * e) / (2.0 * c * c);
                            }
                        }
                    }
                    let e_max = pv[*argmax] - gt[*argmax];
                    dx[*argmax] += scale * dloss_dc * 0.2 * sign(e_max);
                }
                vec![(*pred, dx)]
            }
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn berhu_penalty(e: f64, c: f64) -> f64 {
    let a = e.abs();
    if a <= c || c == 0.0 {
        a
    } else {
        (e * e + c * c) / (2.0 * c)
    }
}

pub(crate) fn softmax_into(row_in: &[f64], row_out: &mut [f64]) {
    let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in row_out.iter_mut().zip(row_in) {
        let e = (v - max).exp();
        *o = e;
        total += e;
    }
    let inv = 1.0 / total;
    for o in row_out.iter_mut() {
        *o *= inv;
    }
}

/// Per-output-axis taps for 2× bilinear upsampling, align-corners=false:
/// output index `o` samples source coordinate `o/2 - 0.25`, edges clamped.
fn upsample_axis_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0f = src.floor();
            let f = src - i0f;
            let clamp = |v: f64| (v as i64).clamp(0, n as i64 - 1) as usize;
            (clamp(i0f), clamp(i0f + 1.0), f)
        })
        .collect()
}
