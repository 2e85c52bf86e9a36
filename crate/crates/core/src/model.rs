//! The desk-scale depth network: conv encoder pyramid over the ERP image,
//! per-scale cross-projection feature alignment (tangent-patch queries
//! attending to full-sphere ERP keys), a decoder with ERP skip links,
//! progressive feature aggregation with channel attention, and multi-scale
//! depth heads.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::layout::{build_layout, LayoutConfig, TangentPlaneSpec};
use crate::nn::{AttentionConfig, Tape, Var};
use crate::resample::{plan_erp_to_patches, plan_patches_to_erp, SamplePlan};

/// Where the tangent-patch queries of CPFA scales 2..S−1 come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    /// Upsampled decoder feature of the previous scale (default).
    Decoded,
    /// Upsampled aligned feature of the previous scale.
    Aligned,
}

fn default_scales() -> usize {
    5
}
fn default_channels() -> Vec<usize> {
    vec![64, 64, 48, 32, 16]
}
fn default_layout() -> String {
    "full-26".into()
}
fn default_resolutions() -> Vec<usize> {
    vec![4, 8, 16, 24]
}
fn default_heads() -> usize {
    4
}
fn default_height() -> usize {
    64
}
fn default_width() -> usize {
    128
}
fn default_true() -> bool {
    true
}
fn default_query_source() -> QuerySource {
    QuerySource::Decoded
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of scales S; scale S is the finest.
    #[serde(default = "default_scales")]
    pub scales: usize,
    /// Feature channels per scale, coarsest first; length S.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Layout preset name.
    #[serde(default = "default_layout")]
    pub layout: String,
    /// Longitude rotation of the layout, degrees.
    #[serde(default)]
    pub lon_offset_deg: f64,
    /// Tangent-patch resolution per CPFA scale (scales 1..S−1).
    #[serde(default = "default_resolutions")]
    pub patch_resolutions: Vec<usize>,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
    /// Divide attention scores by √d in the cross-attention (off reproduces
    /// the bare `softmax(q·kᵀ)` form).
    #[serde(default = "default_true")]
    pub attention_scaling: bool,
    #[serde(default = "default_query_source")]
    pub query_source: QuerySource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: default_scales(),
            channels: default_channels(),
            layout: default_layout(),
            lon_offset_deg: 0.0,
            patch_resolutions: default_resolutions(),
            heads: default_heads(),
            height: default_height(),
            width: default_width(),
            seed: 0,
            attention_scaling: true,
            query_source: default_query_source(),
        }
    }
}

impl ModelConfig {
    /// Lighter configuration for the toy trainer: same topology, smaller
    /// channel widths and patch resolutions so 200 full-batch iterations fit
    /// a single-core budget.
    pub fn toy() -> Self {
        ModelConfig {
            channels: vec![32, 32, 24, 16, 8],
            patch_resolutions: vec![2, 4, 6, 8],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.scales;
        if s < 2 {
            return Err(Error::Config("scales must be at least 2".into()));
        }
        if self.channels.len() != s {
            return Err(Error::Config(format!(
                "channels has {} entries, want scales = {s}",
                self.channels.len()
            )));
        }
        if self.patch_resolutions.len() != s - 1 {
            return Err(Error::Config(format!(
                "patch_resolutions has {} entries, want scales-1 = {}",
                self.patch_resolutions.len(),
                s - 1
            )));
        }
        if self.width != 2 * self.height {
            return Err(Error::Config(format!(
                "width {} must be twice height {}",
                self.width, self.height
            )));
        }
        let down = 1usize << (s - 1);
        if self.height % down != 0 {
            return Err(Error::Config(format!(
                "height {} must be divisible by 2^(S-1) = {down}",
                self.height
            )));
        }
        if self.channels.iter().any(|&c| c == 0)
            || self.patch_resolutions.iter().any(|&r| r == 0)
        {
            return Err(Error::Config("zero channel or resolution entry".into()));
        }
        for (i, &c) in self.channels.iter().take(s - 1).enumerate() {
            if c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "channels[{i}] = {c} not divisible by heads {}",
                    self.heads
                )));
            }
        }
        LayoutConfig::preset(&self.layout)?;
        Ok(())
    }

    pub fn layout_config(&self) -> Result<LayoutConfig> {
        Ok(LayoutConfig::preset(&self.layout)?
            .with_lon_offset(self.lon_offset_deg.to_radians()))
    }

    /// Spatial size `(h, w)` of scale `s` (1-based): `H/2^(S−s) × W/2^(S−s)`.
    pub fn scale_size(&self, s: usize) -> (usize, usize) {
        let f = 1usize << (self.scales - s);
        (self.height / f, self.width / f)
    }

    /// Channels of scale `s` (1-based).
    pub fn scale_channels(&self, s: usize) -> usize {
        self.channels[s - 1]
    }
}

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter tensors in a fixed creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, ParamTensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name} shape/value mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries
            .push((name.to_string(), ParamTensor { shape, values }));
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.values.len()).sum()
    }
}

/// Parameter leaves bound onto a tape for one forward pass.
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

enum Init {
    /// Uniform ±√(6/fan_in).
    Fan(usize),
    Zeros,
    Ones,
    Const(f64),
}

/// Depth-head bias start: softplus(·) ≈ 2 m, the middle of the toy scenes.
const HEAD_BIAS_INIT: f64 = 1.8545865421312374; // ln(e^2 - 1)

/// Everything derived from a [`ModelConfig`]: per-scale layouts and
/// resampling plans (for unmasked inputs), plus the parameter schema.
pub struct Model {
    pub config: ModelConfig,
    specs: Vec<Vec<TangentPlaneSpec>>,
    gather_plans: Vec<Arc<SamplePlan>>,
    scatter_plans: Vec<Arc<SamplePlan>>,
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutputs {
    /// Encoder features per scale, coarsest first (length S).
    pub erp: Vec<Var>,
    /// Aligned CPFA outputs, scales 1..S−1.
    pub aligned: Vec<Var>,
    /// Decoder features per scale (length S).
    pub decoded: Vec<Var>,
    /// PFAA aggregates per scale (length S).
    pub aggregated: Vec<Var>,
    /// Depth maps per scale (length S).
    pub depths: Vec<Var>,
    /// Coverage mask of the stitched aligned feature per CPFA scale.
    pub coverage: Vec<Vec<bool>>,
    pub cpfa_invocations: usize,
    /// Query token count per CPFA scale.
    pub token_counts: Vec<usize>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout_cfg = config.layout_config()?;
        let s = config.scales;
        let mut specs = Vec::with_capacity(s - 1);
        let mut gather_plans = Vec::with_capacity(s - 1);
        let mut scatter_plans = Vec::with_capacity(s - 1);
        for scale in 1..s {
            let res = config.patch_resolutions[scale - 1];
            let sp = build_layout(&layout_cfg, res)?;
            let (h, w) = config.scale_size(scale);
            let (src_h, src_w) = if scale == 1 {
                (config.height, config.width)
            } else {
                (h, w)
            };
            gather_plans.push(Arc::new(plan_erp_to_patches(src_h, src_w, None, &sp)));
            scatter_plans.push(Arc::new(plan_patches_to_erp(&sp, None, h, w)));
            specs.push(sp);
        }
        Ok(Model {
            config,
            specs,
            gather_plans,
            scatter_plans,
        })
    }

    pub fn patch_specs(&self, scale: usize) -> &[TangentPlaneSpec] {
        &self.specs[scale - 1]
    }

    /// The parameter schema: (name, shape, init) in creation order.
    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let cfg = &self.config;
        let s = cfg.scales;
        let c = |scale: usize| cfg.scale_channels(scale);
        let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let conv = |name: String, co: usize, ci: usize, out: &mut Vec<_>| {
            out.push((format!("{name}.w"), vec![co, ci, 3, 3], Init::Fan(ci * 9)));
            out.push((format!("{name}.b"), vec![co], Init::Zeros));
        };
        let sn = |name: String, ch: usize, out: &mut Vec<_>| {
            out.push((format!("{name}.mean_logits"), vec![3], Init::Zeros));
            out.push((format!("{name}.var_logits"), vec![3], Init::Zeros));
            out.push((format!("{name}.gamma"), vec![ch], Init::Ones));
            out.push((format!("{name}.beta"), vec![ch], Init::Zeros));
        };

        // Encoder: fine block at scale S, then one block per coarser scale.
        conv(format!("enc.s{s}.conv"), c(s), 3, &mut out);
        sn(format!("enc.s{s}.sn"), c(s), &mut out);
        for scale in (1..s).rev() {
            conv(format!("enc.s{scale}.conv"), c(scale), c(scale + 1), &mut out);
            sn(format!("enc.s{scale}.sn"), c(scale), &mut out);
        }

        // CPFA stages.
        for scale in 1..s {
            let d = c(scale);
            let qc = if scale == 1 { 3 } else { c(scale - 1) };
            let base = format!("cpfa.s{scale}");
            out.push((format!("{base}.embed.w"), vec![qc, d], Init::Fan(qc)));
            out.push((format!("{base}.embed.b"), vec![d], Init::Zeros));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{base}.mhsa.{w}"), vec![d, d], Init::Fan(d)));
            }
            sn(format!("{base}.sn_tp"), d, &mut out);
            sn(format!("{base}.sn_erp"), d, &mut out);
            for w in ["wq", "wk", "wv"] {
                out.push((format!("{base}.ca.{w}"), vec![d, d], Init::Fan(d)));
            }
        }

        // Decoder: scales 1..S−1 consume concat(aligned, skip); the finest
        // consumes concat(upsampled previous, finest skip).
        for scale in 1..s {
            let d = c(scale);
            conv(format!("dec.s{scale}.conv"), d, 2 * d, &mut out);
            sn(format!("dec.s{scale}.sn"), d, &mut out);
        }
        conv(format!("dec.s{s}.conv"), c(s), c(s - 1) + c(s), &mut out);
        sn(format!("dec.s{s}.sn"), c(s), &mut out);

        // PFAA: per-scale ACS blocks plus cross-scale projections.
        for scale in 1..=s {
            let cu = c(scale);
            let mid = (cu / 4).max(1);
            let base = format!("pfaa.acs.s{scale}");
            out.push((format!("{base}.fc1.w"), vec![cu, mid], Init::Fan(cu)));
            out.push((format!("{base}.fc1.b"), vec![mid], Init::Zeros));
            out.push((format!("{base}.fc2.w"), vec![mid, cu], Init::Fan(mid)));
            out.push((format!("{base}.fc2.b"), vec![cu], Init::Zeros));
            if scale >= 2 {
                out.push((
                    format!("pfaa.proj.s{scale}.w"),
                    vec![c(scale), c(scale - 1)],
                    Init::Fan(c(scale - 1)),
                ));
                out.push((format!("pfaa.proj.s{scale}.b"), vec![c(scale)], Init::Zeros));
            }
        }

        // Depth heads.
        for scale in 1..=s {
            out.push((
                format!("head.s{scale}.w"),
                vec![1, c(scale), 3, 3],
                Init::Fan(c(scale) * 9),
            ));
            out.push((format!("head.s{scale}.b"), vec![1], Init::Const(HEAD_BIAS_INIT)));
        }
        out
    }

    /// Fresh parameters, deterministically seeded from the config.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut store = ParamStore::default();
        for (name, shape, init) in self.param_specs() {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::Fan(fan_in) => {
                    let a = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(v) => vec![v; n],
            };
            store.push(&name, shape, values);
        }
        store
    }

    /// Shape manifest `(name, shape)` in storage order (sorted by name).
    pub fn manifest(&self) -> BTreeMap<String, Vec<usize>> {
        self.param_specs()
            .into_iter()
            .map(|(name, shape, _)| (name, shape))
            .collect()
    }

    /// Binds every parameter as a tape leaf.
    pub fn bind_params(&self, tape: &mut Tape, params: &ParamStore) -> Result<BoundParams> {
        let mut map = BTreeMap::new();
        for (name, t) in params.iter() {
            let var = tape.leaf(&t.shape, &t.values)?;
            map.insert(name.to_string(), var);
        }
        Ok(BoundParams { map })
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        base: &str,
        x: Var,
    ) -> Result<Var> {
        let y = tape.conv3x3_erp(x, p.get(&format!("{base}.conv.w")))?;
        let y = tape.add_channel_bias(y, p.get(&format!("{base}.conv.b")))?;
        let y = tape.switchable_norm(
            y,
            p.get(&format!("{base}.sn.mean_logits")),
            p.get(&format!("{base}.sn.var_logits")),
            p.get(&format!("{base}.sn.gamma")),
            p.get(&format!("{base}.sn.beta")),
            false,
        )?;
        Ok(tape.silu(y))
    }

    /// Encoder pyramid: `F^ERP_s` for s = 1..S, coarsest first.
    pub fn encoder(&self, tape: &mut Tape, p: &BoundParams, image: Var) -> Result<Vec<Var>> {
        let s = self.config.scales;
        let mut feats = vec![None; s];
        let fine = self.conv_block(tape, p, &format!("enc.s{s}"), image)?;
        feats[s - 1] = Some(fine);
        for scale in (1..s).rev() {
            let finer = feats[scale].unwrap();
            let conv = self.conv_block(tape, p, &format!("enc.s{scale}"), finer)?;
            feats[scale - 1] = Some(tape.avg_pool2(conv)?);
        }
        Ok(feats.into_iter().map(|f| f.unwrap()).collect())
    }

    /// One cross-projection alignment stage at `scale` (1-based):
    /// tangent-patch tokens from `query_grid` self-attend, then cross-attend
    /// into the flattened `erp_feat`, and the aligned tokens are stitched
    /// back to the ERP layout.
    #[allow(clippy::too_many_arguments)]
    pub fn cpfa_stage(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        scale: usize,
        query_grid: Var,
        erp_feat: Var,
        gather_plan: Arc<SamplePlan>,
        scatter_plan: Arc<SamplePlan>,
    ) -> Result<(Var, usize)> {
        let base = format!("cpfa.s{scale}");
        let d = self.config.scale_channels(scale);
        let (h, w) = self.config.scale_size(scale);
        if tape.shape(erp_feat) != [d, h, w] {
            return Err(Error::Config(format!(
                "cpfa scale {scale}: erp feature is {:?}, want [{d}, {h}, {w}]",
                tape.shape(erp_feat)
            )));
        }

        let tokens = tape.gather_tokens(query_grid, gather_plan)?;
        let n_tok = tape.shape(tokens)[0];
        let emb = tape.linear(
            tokens,
            p.get(&format!("{base}.embed.w")),
            Some(p.get(&format!("{base}.embed.b"))),
        )?;
        let attn_cfg = AttentionConfig::new(self.config.heads, d)?;
        let t_tp = tape.mhsa(
            emb,
            p.get(&format!("{base}.mhsa.wq")),
            p.get(&format!("{base}.mhsa.wk")),
            p.get(&format!("{base}.mhsa.wv")),
            p.get(&format!("{base}.mhsa.wo")),
            attn_cfg,
        )?;
        let t_norm = tape.switchable_norm(
            t_tp,
            p.get(&format!("{base}.sn_tp.mean_logits")),
            p.get(&format!("{base}.sn_tp.var_logits")),
            p.get(&format!("{base}.sn_tp.gamma")),
            p.get(&format!("{base}.sn_tp.beta")),
            true,
        )?;
        let erp_norm = tape.switchable_norm(
            erp_feat,
            p.get(&format!("{base}.sn_erp.mean_logits")),
            p.get(&format!("{base}.sn_erp.var_logits")),
            p.get(&format!("{base}.sn_erp.gamma")),
            p.get(&format!("{base}.sn_erp.beta")),
            false,
        )?;
        let kv_rows = tape.chw_to_rows(erp_norm)?;
        let ca_tokens = tape.cross_attention(
            t_norm,
            kv_rows,
            p.get(&format!("{base}.ca.wq")),
            p.get(&format!("{base}.ca.wk")),
            p.get(&format!("{base}.ca.wv")),
            self.config.attention_scaling,
        )?;
        let aligned = tape.scatter_tokens(ca_tokens, scatter_plan, h, w)?;
        Ok((aligned, n_tok))
    }

    /// Decoder stage: concat(aligned, skip) → conv block.
    pub fn decoder_stage(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        scale: usize,
        aligned: Var,
        skip_erp: Var,
    ) -> Result<Var> {
        let cat = tape.concat_channels(aligned, skip_erp)?;
        self.conv_block(tape, p, &format!("dec.s{scale}"), cat)
    }

    /// Channel-attention weights in `(0, 1)`, shape `[1, c]`.
    pub fn acs_block(&self, tape: &mut Tape, p: &BoundParams, scale: usize, x: Var) -> Result<Var> {
        let base = format!("pfaa.acs.s{scale}");
        let g = tape.global_avg_pool(x)?;
        let mid = tape.linear(
            g,
            p.get(&format!("{base}.fc1.w")),
            Some(p.get(&format!("{base}.fc1.b"))),
        )?;
        let mid = tape.silu(mid);
        let out = tape.linear(
            mid,
            p.get(&format!("{base}.fc2.w")),
            Some(p.get(&format!("{base}.fc2.b"))),
        )?;
        Ok(tape.sigmoid_op(out))
    }

    /// Progressive aggregation: `F^ACS_1 = 𝓕(F^D_1)⊙F^D_1`, then
    /// `F^ACS_s = 𝓕(u)⊙u` with `u = F^D_s + proj(upsample(F^ACS_{s−1}))`.
    /// Returns all per-scale aggregates, finest last.
    pub fn pfaa(&self, tape: &mut Tape, p: &BoundParams, decoded: &[Var]) -> Result<Vec<Var>> {
        if decoded.len() != self.config.scales {
            return Err(Error::Config(format!(
                "pfaa expects {} decoded scales, got {}",
                self.config.scales,
                decoded.len()
            )));
        }
        let mut aggregated = Vec::with_capacity(decoded.len());
        let w1 = self.acs_block(tape, p, 1, decoded[0])?;
        aggregated.push(tape.mul_channels(decoded[0], w1)?);
        for scale in 2..=self.config.scales {
            let up = tape.upsample2x(aggregated[scale - 2])?;
            let proj = tape.conv1x1(
                up,
                p.get(&format!("pfaa.proj.s{scale}.w")),
                Some(p.get(&format!("pfaa.proj.s{scale}.b"))),
            )?;
            let u = tape.add(decoded[scale - 1], proj)?;
            let w = self.acs_block(tape, p, scale, u)?;
            aggregated.push(tape.mul_channels(u, w)?);
        }
        Ok(aggregated)
    }

    /// Per-scale depth heads: conv + softplus on `F^D_s` for s < S and on
    /// `F^ACS_S` at the finest scale.
    pub fn depth_heads(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        decoded: &[Var],
        aggregated_final: Var,
    ) -> Result<Vec<Var>> {
        let s = self.config.scales;
        let mut depths = Vec::with_capacity(s);
        for scale in 1..=s {
            let src = if scale < s {
                decoded[scale - 1]
            } else {
                aggregated_final
            };
            let y = tape.conv3x3_erp(src, p.get(&format!("head.s{scale}.w")))?;
            let y = tape.add_channel_bias(y, p.get(&format!("head.s{scale}.b")))?;
            depths.push(tape.softplus(y));
        }
        Ok(depths)
    }

    /// Per-call plans honoring the input's validity mask; falls back to the
    /// cached unmasked plans when no mask is present.
    fn plans_for(
        &self,
        image: &Grid,
    ) -> Result<(Vec<Arc<SamplePlan>>, Vec<Arc<SamplePlan>>)> {
        if image.mask.is_none() {
            return Ok((self.gather_plans.clone(), self.scatter_plans.clone()));
        }
        let mask = image.mask.as_ref().unwrap();
        let s = self.config.scales;
        let mut gather = Vec::with_capacity(s - 1);
        let mut scatter = Vec::with_capacity(s - 1);
        for scale in 1..s {
            let (h, w) = self.config.scale_size(scale);
            let sp = &self.specs[scale - 1];
            let src_mask = if scale == 1 {
                mask.clone()
            } else {
                downsample_mask(mask, self.config.height, self.config.width, h, w)
            };
            let g = plan_erp_to_patches(
                if scale == 1 { self.config.height } else { h },
                if scale == 1 { self.config.width } else { w },
                Some(&src_mask),
                sp,
            );
            let res = self.config.patch_resolutions[scale - 1];
            let patch_px = res * res;
            let token_valid = g.valid_mask().to_vec();
            let patch_masks: Vec<Option<&[bool]>> = (0..sp.len())
                .map(|pi| Some(&token_valid[pi * patch_px..(pi + 1) * patch_px]))
                .collect();
            scatter.push(Arc::new(plan_patches_to_erp(sp, Some(&patch_masks), h, w)));
            gather.push(Arc::new(g));
        }
        Ok((gather, scatter))
    }

    /// Full forward pass. The image must match the configured size; a
    /// validity mask, when present, restricts patch sampling.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        image: &Grid,
    ) -> Result<ForwardOutputs> {
        let cfg = &self.config;
        if image.channels != 3 || image.height != cfg.height || image.width != cfg.width {
            return Err(Error::Config(format!(
                "input image is {}x{}x{}, config wants 3x{}x{}",
                image.channels, image.height, image.width, cfg.height, cfg.width
            )));
        }
        let (gather_plans, scatter_plans) = self.plans_for(image)?;
        let s = cfg.scales;
        let image_var = tape.leaf_grid(image);

        let erp = self.encoder(tape, p, image_var)?;

        let mut aligned = Vec::with_capacity(s - 1);
        let mut decoded = Vec::with_capacity(s);
        let mut coverage = Vec::with_capacity(s - 1);
        let mut token_counts = Vec::with_capacity(s - 1);
        for scale in 1..s {
            let query_grid = if scale == 1 {
                image_var
            } else {
                let prev = match cfg.query_source {
                    QuerySource::Decoded => decoded[scale - 2],
                    QuerySource::Aligned => aligned[scale - 2],
                };
                tape.upsample2x(prev)?
            };
            let (f_ca, n_tok) = self.cpfa_stage(
                tape,
                p,
                scale,
                query_grid,
                erp[scale - 1],
                gather_plans[scale - 1].clone(),
                scatter_plans[scale - 1].clone(),
            )?;
            coverage.push(scatter_plans[scale - 1].valid_mask().to_vec());
            token_counts.push(n_tok);
            aligned.push(f_ca);
            let dec = self.decoder_stage(tape, p, scale, f_ca, erp[scale - 1])?;
            decoded.push(dec);
        }

        // Finest scale: no CPFA, concat(upsampled previous decoder, skip).
        let up = tape.upsample2x(decoded[s - 2])?;
        let cat = tape.concat_channels(up, erp[s - 1])?;
        let fine = self.conv_block(tape, p, &format!("dec.s{s}"), cat)?;
        decoded.push(fine);

        let aggregated = self.pfaa(tape, p, &decoded)?;
        let depths = self.depth_heads(tape, p, &decoded, aggregated[s - 1])?;

        Ok(ForwardOutputs {
            erp,
            aligned,
            decoded,
            aggregated,
            depths,
            coverage,
            cpfa_invocations: s - 1,
            token_counts,
        })
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

/// Majority-vote downsampling of a validity mask to `oh × ow`.
fn downsample_mask(mask: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    let (fy, fx) = (h / oh, w / ow);
    let mut out = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut n = 0usize;
            for dy in 0..fy {
                for dx in 0..fx {
                    if mask[(y * fy + dy) * w + x * fx + dx] {
                        n += 1;
                    }
                }
            }
            out[y * ow + x] = 2 * n >= fy * fx;
        }
    }
    out
}

/// Analytic multiply-accumulate count of one forward pass. Resampling taps
/// are counted at their 4-tap bilinear cost; normalization and activations
/// count one MAC per element.
pub fn estimate_flops(config: &ModelConfig) -> Result<f64> {
    config.validate()?;
    let layout_cfg = config.layout_config()?;
    let n_patches = layout_cfg.patch_count() as f64;
    let s = config.scales;
    let c = |scale: usize| config.scale_channels(scale) as f64;
    let px = |scale: usize| {
        let (h, w) = config.scale_size(scale);
        (h * w) as f64
    };
    let full_px = (config.height * config.width) as f64;

    let mut macs = 0.0;
    // Encoder.
    macs += 9.0 * 3.0 * c(s) * full_px + 2.0 * c(s) * full_px;
    for scale in (1..s).rev() {
        let src_px = px(scale + 1);
        macs += 9.0 * c(scale + 1) * c(scale) * src_px + 2.0 * c(scale) * src_px;
        macs += c(scale) * px(scale); // pooling
    }
    // CPFA stages.
    for scale in 1..s {
        let d = c(scale);
        let res = config.patch_resolutions[scale - 1] as f64;
        let n_tok = n_patches * res * res;
        let n_kv = px(scale);
        let qc = if scale == 1 { 3.0 } else { c(scale - 1) };
        macs += n_tok * 4.0 * qc; // gather taps
        macs += n_tok * qc * d; // embed
        macs += 4.0 * n_tok * d * d + 2.0 * n_tok * n_tok * d; // mhsa
        macs += 2.0 * (n_tok + n_kv) * d; // norms
        macs += n_tok * d * d + 2.0 * n_kv * d * d + 2.0 * n_tok * n_kv * d; // cross-attention
        macs += n_kv * 4.0 * d; // scatter taps
        // Decoder stage.
        macs += 9.0 * 2.0 * d * d * n_kv + 2.0 * d * n_kv;
        if scale >= 2 {
            macs += 4.0 * px(scale) * qc; // query upsample
        }
    }
    // Finest decoder.
    macs += 9.0 * (c(s - 1) + c(s)) * c(s) * full_px + 2.0 * c(s) * full_px;
    macs += 4.0 * full_px * c(s - 1);
    // PFAA.
    for scale in 1..=s {
        let cu = c(scale);
        let mid = (config.scale_channels(scale) / 4).max(1) as f64;
        macs += cu * px(scale); // pool
        macs += cu * mid * 2.0; // fc1 + fc2
        macs += cu * px(scale); // channel scale
        if scale >= 2 {
            macs += 4.0 * px(scale) * c(scale - 1); // upsample
            macs += c(scale - 1) * cu * px(scale); // projection
        }
    }
    // Heads.
    for scale in 1..=s {
        macs += 9.0 * c(scale) * px(scale) + 2.0 * px(scale);
    }
    Ok(macs)
}
