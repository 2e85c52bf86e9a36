//! Toy training driver: full-batch gradient descent on one synthetic scene.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::{build_total_loss, multiscale_ground_truth, LossBreakdown, LossMode};
use crate::metrics::{depth_metrics, DepthMetricsReport, DEFAULT_BIN_EDGES};
use crate::model::{Model, ParamStore};
use crate::nn::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Heavy-ball momentum; 0 is plain gradient descent.
    pub momentum: f64,
    pub berhu: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            iterations: 200,
            learning_rate: 1e-3,
            momentum: 0.0,
            berhu: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyTrainReport {
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub mode: String,
    /// Loss at the starting parameters.
    pub initial_loss: LossBreakdown,
    /// Loss after the last update.
    pub final_loss: LossBreakdown,
    /// Loss at the start of each iteration; length = `iterations`.
    pub series: Vec<IterationRecord>,
    pub final_metrics: DepthMetricsReport,
    pub wall_clock_seconds: f64,
}

/// One forward + loss evaluation; returns the depth prediction at the finest
/// scale alongside the loss nodes.
fn evaluate(
    model: &Model,
    params: &ParamStore,
    image: &Grid,
    gts: &[Grid],
    mode: LossMode,
) -> Result<(Tape, crate::nn::Var, LossBreakdown, Grid)> {
    let mut tape = Tape::new();
    let bound = model.bind_params(&mut tape, params)?;
    let out = model.forward(&mut tape, &bound, image)?;
    let loss = build_total_loss(&mut tape, &out.depths, gts, mode)?;
    let depth = tape.value_grid(out.depths[model.config.scales - 1], None);
    Ok((tape, loss.total, loss.breakdown, depth))
}

/// Runs `settings.iterations` steps of full-batch gradient descent on the
/// multi-scale objective and reports the loss series plus final metrics on
/// the training image.
pub fn train_toy(
    model: &Model,
    params: &mut ParamStore,
    image: &Grid,
    gt: &Grid,
    settings: &TrainSettings,
) -> Result<(ToyTrainReport, Grid)> {
    let start = Instant::now();
    let mode = if settings.berhu {
        LossMode::BerHu
    } else {
        LossMode::Standard
    };
    let gts = multiscale_ground_truth(gt, model.config.scales);

    let mut velocity: Vec<(String, Vec<f64>)> = if settings.momentum != 0.0 {
        params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![0.0; t.values.len()]))
            .collect()
    } else {
        Vec::new()
    };

    let mut series = Vec::with_capacity(settings.iterations);
    let mut initial_loss = None;
    for iteration in 0..settings.iterations {
        let mut tape = Tape::new();
        let bound = model.bind_params(&mut tape, params)?;
        let out = model.forward(&mut tape, &bound, image)?;
        let loss = build_total_loss(&mut tape, &out.depths, &gts, mode)?;
        if !loss.breakdown.total.is_finite() {
            return Err(Error::Diverged(iteration));
        }
        if initial_loss.is_none() {
            initial_loss = Some(loss.breakdown.clone());
        }
        series.push(IterationRecord {
            iteration,
            loss: loss.breakdown.clone(),
        });
        tape.backward(loss.total)?;

        if settings.momentum != 0.0 {
            for (i, (name, t)) in params.iter_mut().enumerate() {
                let g = tape.grad(bound.get(name));
                let vel = &mut velocity[i].1;
                for ((p, v), &gv) in t.values.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = settings.momentum * *v + gv;
                    *p -= settings.learning_rate * *v;
                }
            }
        } else {
            for (name, t) in params.iter_mut() {
                let g = tape.grad(bound.get(name));
                for (p, &gv) in t.values.iter_mut().zip(g) {
                    *p -= settings.learning_rate * gv;
                }
            }
        }
    }

    let (_, _, final_loss, depth) = evaluate(model, params, image, &gts, mode)?;
    if !final_loss.total.is_finite() {
        return Err(Error::Diverged(settings.iterations));
    }
    let initial_loss = initial_loss.unwrap_or_else(|| final_loss.clone());
    let final_metrics = depth_metrics(&depth, gt, None, 10.0, &DEFAULT_BIN_EDGES)?;

    let report = ToyTrainReport {
        seed: model.config.seed,
        iterations: settings.iterations,
        learning_rate: settings.learning_rate,
        momentum: settings.momentum,
        mode: if settings.berhu { "berhu" } else { "standard" }.to_string(),
        initial_loss,
        final_loss,
        series,
        final_metrics,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, depth))
}
