//! Central finite-difference verification of every differentiable op, plus a
//! whole-model check on a small input.
//!
//! Each check projects the op output to a scalar with fixed random weights,
//! runs the reverse pass, and compares against `(f(x+h) − f(x−h)) / 2h` at
//! every input element. The full-model check probes sampled entries of every
//! parameter tensor.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::Grid;
use crate::layout::{build_layout, LayoutConfig, LayoutRow};
use crate::loss::{self, LossMode};
use crate::model::{Model, ModelConfig};
use crate::nn::{AttentionConfig, PadMode, Tape, Var};
use crate::resample::{plan_erp_to_patches, plan_patches_to_erp, SamplePlan};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Tolerance for elementwise and linear-map ops.
pub const TOL_SIMPLE: f64 = 1e-6;
/// Tolerance for composite ops (attention, normalization, convolution).
pub const TOL_COMPOSITE: f64 = 1e-5;
/// Tolerance for the loss functions on 5×5 inputs.
pub const TOL_LOSS: f64 = 1e-5;
/// Tolerance for the full-model objective on a 16×32 input.
pub const TOL_MODEL: f64 = 1e-3;

#[derive(Clone, Debug, serde::Serialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub fd_step: f64,
    pub checks: Vec<OpCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Random values bounded away from zero so kinked ops (abs) stay off their
/// corners under the FD step.
fn gen_inputs(rng: &mut ChaCha8Rng, shapes: &[Vec<usize>]) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| {
                    let mag = rng.random_range(0.05..1.0);
                    if rng.random_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()
        })
        .collect()
}

/// Checks one op. `build` consumes leaves (one per shape) and returns the op
/// output; the harness handles scalar projection, the reverse pass and FD.
fn check_op<F>(
    name: &str,
    shapes: &[Vec<usize>],
    tol: f64,
    seed: u64,
    corrupt: bool,
    build: F,
) -> Result<OpCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = gen_inputs(&mut rng, shapes);

    // Probe run to learn the output size, then fix projection weights.
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, v)| tape.leaf(s, v))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &vars)?;
        tape.value(out).len()
    };
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.leaf(s, v))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let w = tape.leaf(&shape, &weights)?;
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        Ok(tape.value_scalar(loss))
    };

    // Analytic gradients.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, v)| tape.leaf(s, v))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &vars)?;
        let shape = tape.shape(out).to_vec();
        let w = tape.leaf(&shape, &weights)?;
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        vars.iter()
            .map(|&v| {
                let mut g = tape.grad(v).to_vec();
                if corrupt {
                    for x in &mut g {
                        *x *= 1.01;
                        *x += 1e-3;
                    }
                }
                g
            })
            .collect()
    };

    let mut max_err = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let mut plus = inputs.clone();
            plus[ti][ei] += FD_STEP;
            let mut minus = inputs.clone();
            minus[ti][ei] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[ti][ei], numeric));
        }
    }
    Ok(OpCheck {
        op: name.to_string(),
        max_rel_err: max_err,
        tolerance: tol,
        pass: max_err < tol,
    })
}

/// Small four-patch layout plans used by the resampling-op checks.
fn tiny_plans() -> (Arc<SamplePlan>, Arc<SamplePlan>) {
    let cfg = LayoutConfig {
        name: "tiny".into(),
        rows: vec![LayoutRow { lat: 0.0, count: 4 }],
        fov: 100f64.to_radians(),
        lon_offset: 0.3,
    };
    let specs = build_layout(&cfg, 3).unwrap();
    let gather = Arc::new(plan_erp_to_patches(8, 16, None, &specs));
    let scatter = Arc::new(plan_patches_to_erp(&specs, None, 8, 16));
    (gather, scatter)
}

fn loss_check<F>(name: &str, seed: u64, corrupt: bool, build: F) -> Result<OpCheck>
where
    F: Fn(&mut Tape, Var, &[Grid]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10ca1);
    let gt_data: Vec<f64> = (0..25).map(|_| rng.random_range(1.0..4.0)).collect();
    let gt = Grid::from_data(1, 5, 5, gt_data, None).unwrap();
    let gts = [gt];
    check_op(name, &[vec![1, 5, 5]], TOL_LOSS, seed, corrupt, |tape, vars| {
        // Keep predictions positive and away from the ground truth.
        let shifted = tape.scale(vars[0], 0.5);
        let two = tape.leaf(&[1, 5, 5], &vec![2.0; 25])?;
        let pred = tape.add(shifted, two)?;
        build(tape, pred, &gts)
    })
}

/// Runs every per-op suite plus the full-model check. `corrupt` perturbs the
/// analytic gradient of the named op so the negative path is testable.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<GradCheckReport> {
    let mut checks = Vec::new();
    let c = |name: &str| corrupt == Some(name);

    checks.push(check_op("add", &[vec![3, 4], vec![3, 4]], TOL_SIMPLE, seed, c("add"),
        |t, v| t.add(v[0], v[1]))?);
    checks.push(check_op("sub", &[vec![3, 4], vec![3, 4]], TOL_SIMPLE, seed, c("sub"),
        |t, v| t.sub(v[0], v[1]))?);
    checks.push(check_op("mul", &[vec![3, 4], vec![3, 4]], TOL_SIMPLE, seed, c("mul"),
        |t, v| t.mul(v[0], v[1]))?);
    checks.push(check_op("scale", &[vec![2, 5]], TOL_SIMPLE, seed, c("scale"),
        |t, v| Ok(t.scale(v[0], -1.7)))?);
    checks.push(check_op("matmul", &[vec![3, 4], vec![4, 2]], TOL_SIMPLE, seed, c("matmul"),
        |t, v| t.matmul(v[0], v[1]))?);
    checks.push(check_op("linear", &[vec![3, 4], vec![4, 5], vec![5]], TOL_SIMPLE, seed,
        c("linear"), |t, v| t.linear(v[0], v[1], Some(v[2])))?);
    checks.push(check_op("softmax_rows", &[vec![4, 6]], TOL_SIMPLE, seed, c("softmax_rows"),
        |t, v| t.softmax_rows(v[0]))?);
    checks.push(check_op("conv3x3", &[vec![2, 5, 7], vec![3, 2, 3, 3]], TOL_COMPOSITE, seed,
        c("conv3x3"), |t, v| t.conv3x3(v[0], v[1], (PadMode::Replicate, PadMode::Wrap)))?);
    checks.push(check_op("conv1x1", &[vec![3, 4, 5], vec![2, 3], vec![2]], TOL_SIMPLE, seed,
        c("conv1x1"), |t, v| t.conv1x1(v[0], v[1], Some(v[2])))?);
    checks.push(check_op("add_channel_bias", &[vec![2, 3, 4], vec![2]], TOL_SIMPLE, seed,
        c("add_channel_bias"), |t, v| t.add_channel_bias(v[0], v[1]))?);
    checks.push(check_op("avg_pool2", &[vec![2, 4, 6]], TOL_SIMPLE, seed, c("avg_pool2"),
        |t, v| t.avg_pool2(v[0]))?);
    checks.push(check_op("upsample2x", &[vec![2, 3, 4]], TOL_SIMPLE, seed, c("upsample2x"),
        |t, v| t.upsample2x(v[0]))?);
    checks.push(check_op("silu", &[vec![3, 5]], TOL_SIMPLE, seed, c("silu"),
        |t, v| Ok(t.silu(v[0])))?);
    checks.push(check_op("sigmoid", &[vec![3, 5]], TOL_SIMPLE, seed, c("sigmoid"),
        |t, v| Ok(t.sigmoid_op(v[0])))?);
    checks.push(check_op("softplus", &[vec![3, 5]], TOL_SIMPLE, seed, c("softplus"),
        |t, v| Ok(t.softplus(v[0])))?);
    checks.push(check_op("abs", &[vec![3, 5]], TOL_SIMPLE, seed, c("abs"),
        |t, v| Ok(t.abs(v[0])))?);
    checks.push(check_op("sum", &[vec![3, 5]], TOL_SIMPLE, seed, c("sum"),
        |t, v| Ok(t.sum(v[0])))?);
    let mask: Arc<Vec<bool>> = Arc::new((0..15).map(|i| i % 3 != 1).collect());
    checks.push(check_op("mean_masked", &[vec![3, 5]], TOL_SIMPLE, seed, c("mean_masked"),
        move |t, v| t.mean_masked(v[0], mask.clone()))?);
    checks.push(check_op("concat_channels", &[vec![2, 3, 4], vec![1, 3, 4]], TOL_SIMPLE, seed,
        c("concat_channels"), |t, v| t.concat_channels(v[0], v[1]))?);
    checks.push(check_op("chw_to_rows", &[vec![3, 2, 4]], TOL_SIMPLE, seed, c("chw_to_rows"),
        |t, v| t.chw_to_rows(v[0]))?);
    checks.push(check_op("global_avg_pool", &[vec![3, 2, 4]], TOL_SIMPLE, seed,
        c("global_avg_pool"), |t, v| t.global_avg_pool(v[0]))?);
    checks.push(check_op("mul_channels", &[vec![3, 2, 4], vec![1, 3]], TOL_SIMPLE, seed,
        c("mul_channels"), |t, v| t.mul_channels(v[0], v[1]))?);
    checks.push(check_op(
        "switchable_norm",
        &[vec![3, 4, 4], vec![3], vec![3], vec![3], vec![3]],
        TOL_COMPOSITE, seed, c("switchable_norm"),
        |t, v| t.switchable_norm(v[0], v[1], v[2], v[3], v[4], false))?);
    checks.push(check_op(
        "switchable_norm_tokens",
        &[vec![6, 4], vec![3], vec![3], vec![4], vec![4]],
        TOL_COMPOSITE, seed, c("switchable_norm_tokens"),
        |t, v| t.switchable_norm(v[0], v[1], v[2], v[3], v[4], true))?);
    checks.push(check_op(
        "cross_attention",
        &[vec![4, 6], vec![5, 6], vec![6, 6], vec![6, 6], vec![6, 6]],
        TOL_COMPOSITE, seed, c("cross_attention"),
        |t, v| t.cross_attention(v[0], v[1], v[2], v[3], v[4], true))?);
    checks.push(check_op(
        "mhsa",
        &[vec![5, 8], vec![8, 8], vec![8, 8], vec![8, 8], vec![8, 8]],
        TOL_COMPOSITE, seed, c("mhsa"),
        |t, v| t.mhsa(v[0], v[1], v[2], v[3], v[4], AttentionConfig::new(2, 8)?))?);

    let (gather, scatter) = tiny_plans();
    let g2 = gather.clone();
    checks.push(check_op("gather_tokens", &[vec![2, 8, 16]], TOL_COMPOSITE, seed,
        c("gather_tokens"), move |t, v| t.gather_tokens(v[0], g2.clone()))?);
    let s2 = scatter.clone();
    let n_tok = scatter.src_len;
    checks.push(check_op("scatter_tokens", &[vec![n_tok, 2]], TOL_COMPOSITE, seed,
        c("scatter_tokens"), move |t, v| t.scatter_tokens(v[0], s2.clone(), 8, 16))?);
    checks.push(check_op("sobel", &[vec![1, 5, 6]], TOL_SIMPLE, seed, c("sobel"),
        |t, v| t.sobel(v[0]))?);

    checks.push(loss_check("mse_loss", seed, c("mse_loss"), |t, pred, gts| {
        let terms = loss::build_mse_terms(t, &[pred], gts)?;
        Ok(terms[0])
    })?);
    checks.push(loss_check("gradient_loss", seed, c("gradient_loss"), |t, pred, gts| {
        let terms = loss::build_gradient_terms(t, &[pred], gts)?;
        Ok(terms[0].expect("5x5 has interior"))
    })?);
    checks.push(loss_check("berhu_loss", seed, c("berhu_loss"), |t, pred, gts| {
        let terms = loss::build_berhu_terms(t, &[pred], gts)?;
        Ok(terms[0])
    })?);

    checks.push(check_full_model(seed, c("full_model"))?);

    Ok(GradCheckReport {
        seed,
        fd_step: FD_STEP,
        checks,
    })
}

/// Small but structurally complete model config for the whole-graph check.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        scales: 5,
        channels: vec![8, 8, 8, 8, 4],
        layout: "full-26".into(),
        patch_resolutions: vec![2, 2, 3, 4],
        heads: 2,
        height: 16,
        width: 32,
        seed,
        ..ModelConfig::default()
    }
}

/// FD check of d(L_total)/d(θ) on a 16×32 input, probing three entries of
/// every parameter tensor.
fn check_full_model(seed: u64, corrupt: bool) -> Result<OpCheck> {
    let model = Model::new(tiny_model_config(seed))?;
    let mut params = model.init_params();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    let image = Grid::from_data(
        3,
        16,
        32,
        (0..3 * 16 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
        None,
    )
    .unwrap();
    let gt = Grid::from_data(
        1,
        16,
        32,
        (0..16 * 32).map(|_| rng.random_range(1.0..4.0)).collect(),
        None,
    )
    .unwrap();
    let gts = loss::multiscale_ground_truth(&gt, model.config.scales);

    let eval = |params: &crate::model::ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.bind_params(&mut tape, params)?;
        let out = model.forward(&mut tape, &bound, &image)?;
        let loss = loss::build_total_loss(&mut tape, &out.depths, &gts, LossMode::Standard)?;
        Ok(loss.breakdown.total)
    };

    // Analytic gradients for every parameter.
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut tape = Tape::new();
        let bound = model.bind_params(&mut tape, &params)?;
        let out = model.forward(&mut tape, &bound, &image)?;
        let loss = loss::build_total_loss(&mut tape, &out.depths, &gts, LossMode::Standard)?;
        tape.backward(loss.total)?;
        params
            .iter()
            .map(|(name, _)| {
                let mut g = tape.grad(bound.get(name)).to_vec();
                if corrupt {
                    for x in &mut g {
                        *x = *x * 1.05 + 1e-3;
                    }
                }
                (name.to_string(), g)
            })
            .collect()
    };

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut max_err = 0.0f64;
    for (name, grads) in names.iter().zip(analytic.iter().map(|(_, g)| g)) {
        let len = grads.len();
        let probes = [0, len / 2, len - 1];
        let mut seen = Vec::new();
        for &i in &probes {
            if seen.contains(&i) {
                continue;
            }
            seen.push(i);
            let original = params.get(name).unwrap().values[i];
            params.get_mut(name).unwrap().values[i] = original + FD_STEP;
            let plus = eval(&params)?;
            params.get_mut(name).unwrap().values[i] = original - FD_STEP;
            let minus = eval(&params)?;
            params.get_mut(name).unwrap().values[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(grads[i], numeric));
        }
    }
    Ok(OpCheck {
        op: "full_model".to_string(),
        max_rel_err: max_err,
        tolerance: TOL_MODEL,
        pass: max_err < TOL_MODEL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_rule_fails_with_the_op_named() {
        let report = run_gradcheck(7, Some("linear")).unwrap();
        let failing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.op.as_str())
            .collect();
        assert_eq!(failing, vec!["linear"]);
    }
}
