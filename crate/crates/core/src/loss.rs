//! Multi-scale depth losses: MSE, Sobel gradient, and reverse Huber, each a
//! mean over valid pixels summed over scales.
//!
//! Tape builders (`build_*`) attach the loss to an existing graph for
//! training; the plain functions evaluate on grids through a scratch tape and
//! are what the CLI and tests consume.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// MSE + gradient.
    Standard,
    /// Reverse Huber + gradient (small-dataset regime).
    BerHu,
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub grad: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub berhu: Option<f64>,
    pub total: f64,
    /// Per-scale (pixel term, gradient term) pairs, coarsest first.
    pub per_scale: Vec<(f64, f64)>,
}

/// Loss nodes on a live tape, plus the evaluated breakdown.
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn check_pair(op: &'static str, pred_shape: &[usize], gt: &Grid) -> Result<(usize, usize)> {
    if pred_shape != [1, gt.height, gt.width] {
        return Err(Error::shape(
            op,
            format!(
                "prediction {pred_shape:?} vs ground truth [1, {}, {}]",
                gt.height, gt.width
            ),
        ));
    }
    Ok((gt.height, gt.width))
}

fn valid_mask(gt: &Grid) -> Arc<Vec<bool>> {
    Arc::new(match &gt.mask {
        Some(m) => m.clone(),
        None => vec![true; gt.pixels()],
    })
}

/// Per-scale mean squared error over valid pixels.
pub fn build_mse_terms(tape: &mut Tape, preds: &[Var], gts: &[Grid]) -> Result<Vec<Var>> {
    if preds.len() != gts.len() {
        return Err(Error::shape("mse_loss", "scale count mismatch".to_string()));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (&pred, gt) in preds.iter().zip(gts) {
        check_pair("mse_loss", tape.shape(pred), gt)?;
        let gt_var = tape.leaf_grid(gt);
        let e = tape.sub(pred, gt_var)?;
        let sq = tape.mul(e, e)?;
        let term = tape.mean_masked(sq, valid_mask(gt))?;
        terms.push(term);
    }
    Ok(terms)
}

/// Interior pixels whose full 3×3 neighborhood is valid, as a mask over the
/// two Sobel response channels. `None` when the grid is too small for any
/// interior window.
fn interior_mask(gt: &Grid) -> Option<Vec<bool>> {
    if gt.height < 3 || gt.width < 3 {
        return None;
    }
    let (oh, ow) = (gt.height - 2, gt.width - 2);
    let mut m = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut ok = true;
            'win: for dy in 0..3 {
                for dx in 0..3 {
                    if !gt.is_valid(y + dy, x + dx) {
                        ok = false;
                        break 'win;
                    }
                }
            }
            m[y * ow + x] = ok;
        }
    }
    let mut doubled = m.clone();
    doubled.extend_from_slice(&m);
    Some(doubled)
}

/// Per-scale Sobel gradient terms: mean over valid interior pixels of
/// `||∇D| − |∇D̂||`, the x and y responses averaged. Scales with no interior
/// window (spatial size under 3×3) contribute `None`.
pub fn build_gradient_terms(
    tape: &mut Tape,
    preds: &[Var],
    gts: &[Grid],
) -> Result<Vec<Option<Var>>> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "gradient_loss",
            "scale count mismatch".to_string(),
        ));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (&pred, gt) in preds.iter().zip(gts) {
        check_pair("gradient_loss", tape.shape(pred), gt)?;
        let Some(mask) = interior_mask(gt) else {
            terms.push(None);
            continue;
        };
        let gt_var = tape.leaf_grid(gt);
        let sp = tape.sobel(pred)?;
        let sg = tape.sobel(gt_var)?;
        let asp = tape.abs(sp);
        let asg = tape.abs(sg);
        let diff = tape.sub(asp, asg)?;
        let adiff = tape.abs(diff);
        let term = tape.mean_masked(adiff, Arc::new(mask))?;
        terms.push(Some(term));
    }
    Ok(terms)
}

/// Per-scale reverse Huber terms with `c = 0.2·max|error|` per scale.
pub fn build_berhu_terms(tape: &mut Tape, preds: &[Var], gts: &[Grid]) -> Result<Vec<Var>> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "berhu_loss",
            "scale count mismatch".to_string(),
        ));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (&pred, gt) in preds.iter().zip(gts) {
        check_pair("berhu_loss", tape.shape(pred), gt)?;
        let term = tape.berhu(pred, Arc::new(gt.data.clone()), valid_mask(gt))?;
        terms.push(term);
    }
    Ok(terms)
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let mut acc = *it.next().expect("at least one scale");
    for &t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Builds the training objective on `tape`: pixel term (MSE or BerHu by
/// `mode`) plus the gradient term, summed over scales.
pub fn build_total_loss(
    tape: &mut Tape,
    preds: &[Var],
    gts: &[Grid],
    mode: LossMode,
) -> Result<LossVars> {
    if preds.is_empty() {
        return Err(Error::shape("total_loss", "no scales".to_string()));
    }
    let mse_terms = build_mse_terms(tape, preds, gts)?;
    let grad_terms = build_gradient_terms(tape, preds, gts)?;
    let pixel_terms = match mode {
        LossMode::Standard => mse_terms.clone(),
        LossMode::BerHu => build_berhu_terms(tape, preds, gts)?,
    };

    let pixel_total = sum_terms(tape, &pixel_terms)?;
    let grad_vars: Vec<Var> = grad_terms.iter().flatten().copied().collect();
    let total = if grad_vars.is_empty() {
        pixel_total
    } else {
        let grad_total = sum_terms(tape, &grad_vars)?;
        tape.add(pixel_total, grad_total)?
    };

    let mse: f64 = mse_terms.iter().map(|&t| tape.value_scalar(t)).sum();
    let grad: f64 = grad_vars.iter().map(|&t| tape.value_scalar(t)).sum();
    let berhu = match mode {
        LossMode::BerHu => Some(pixel_terms.iter().map(|&t| tape.value_scalar(t)).sum()),
        LossMode::Standard => None,
    };
    let per_scale = pixel_terms
        .iter()
        .zip(&grad_terms)
        .map(|(&p, gterm)| {
            (
                tape.value_scalar(p),
                gterm.map_or(0.0, |t| tape.value_scalar(t)),
            )
        })
        .collect();
    let total_value = tape.value_scalar(total);
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            mse,
            grad,
            berhu,
            total: total_value,
            per_scale,
        },
    })
}

fn grids_to_vars(tape: &mut Tape, preds: &[Grid]) -> Vec<Var> {
    preds.iter().map(|g| tape.leaf_grid(g)).collect()
}

/// Mean squared error over valid pixels, summed over scales.
pub fn mse_loss(preds: &[Grid], gts: &[Grid]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = grids_to_vars(&mut tape, preds);
    let terms = build_mse_terms(&mut tape, &vars, gts)?;
    Ok(terms.iter().map(|&t| tape.value_scalar(t)).sum())
}

/// Sobel gradient loss over valid interior pixels, summed over scales.
pub fn gradient_loss(preds: &[Grid], gts: &[Grid]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = grids_to_vars(&mut tape, preds);
    let terms = build_gradient_terms(&mut tape, &vars, gts)?;
    Ok(terms
        .iter()
        .flatten()
        .map(|&t| tape.value_scalar(t))
        .sum())
}

/// Reverse Huber loss over valid pixels, summed over scales.
pub fn berhu_loss(preds: &[Grid], gts: &[Grid]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = grids_to_vars(&mut tape, preds);
    let terms = build_berhu_terms(&mut tape, &vars, gts)?;
    Ok(terms.iter().map(|&t| tape.value_scalar(t)).sum())
}

/// Full objective on grids.
pub fn total_loss(preds: &[Grid], gts: &[Grid], mode: LossMode) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = grids_to_vars(&mut tape, preds);
    Ok(build_total_loss(&mut tape, &vars, gts, mode)?.breakdown)
}

/// Downsamples a depth map by an integer factor with masked area averaging:
/// each coarse pixel averages the valid fine pixels of its block and is valid
/// when at least half the block is.
pub fn downsample_depth(gt: &Grid, factor: usize) -> Grid {
    assert_eq!(gt.channels, 1, "depth maps are single-channel");
    if factor == 1 {
        return gt.clone();
    }
    let (oh, ow) = (gt.height / factor, gt.width / factor);
    let mut data = vec![0.0; oh * ow];
    let mut mask = vec![false; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            let mut n = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    let (sy, sx) = (y * factor + dy, x * factor + dx);
                    if gt.is_valid(sy, sx) {
                        acc += gt.get(0, sy, sx);
                        n += 1;
                    }
                }
            }
            let block = factor * factor;
            if 2 * n >= block {
                data[y * ow + x] = acc / n as f64;
                mask[y * ow + x] = true;
            }
        }
    }
    Grid {
        channels: 1,
        height: oh,
        width: ow,
        data,
        mask: Some(mask),
    }
}

/// Ground-truth pyramid for `scales` levels, coarsest first; level `s`
/// (1-based) has size `(h/2^(scales-s), w/2^(scales-s))`.
pub fn multiscale_ground_truth(gt: &Grid, scales: usize) -> Vec<Grid> {
    (1..=scales)
        .map(|s| downsample_depth(gt, 1 << (scales - s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn depth_grid(h: usize, w: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.random_range(0.5..5.0)).collect();
        Grid::from_data(1, h, w, data, None).unwrap()
    }

    #[test]
    fn mse_zero_when_equal_and_one_for_unit_offset() {
        let gt = depth_grid(4, 8, 1);
        assert_eq!(mse_loss(&[gt.clone()], &[gt.clone()]).unwrap(), 0.0);
        let mut pred = gt.clone();
        for v in &mut pred.data {
            *v += 1.0;
        }
        let l = mse_loss(&[pred], &[gt]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_direct_oracle() {
        let gt = depth_grid(4, 8, 2);
        let pred = depth_grid(4, 8, 3);
        let got = mse_loss(&[pred.clone()], &[gt.clone()]).unwrap();
        // Independent direct sum.
        let want: f64 = pred
            .data
            .iter()
            .zip(&gt.data)
            .map(|(p, g)| (p - g) * (p - g))
            .sum::<f64>()
            / 32.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_loss_vanishes_on_constants_and_equal_inputs() {
        let a = Grid::constant(1, 5, 5, 3.0);
        let b = Grid::constant(1, 5, 5, -7.0);
        assert_eq!(gradient_loss(&[a.clone()], &[b]).unwrap(), 0.0);
        let g = depth_grid(5, 5, 4);
        assert_eq!(gradient_loss(&[g.clone()], &[g]).unwrap(), 0.0);
    }

    #[test]
    fn gradient_loss_of_ramp_matches_hand_stencil() {
        // pred(x) = x along columns, gt flat. Sobel-x of the ramp is 8
        // everywhere in the interior (stencil weights sum 8 per unit slope),
        // Sobel-y is 0; the loss averages the two direction responses.
        let mut pred = Grid::new(1, 5, 5);
        for y in 0..5 {
            for x in 0..5 {
                pred.set(0, y, x, x as f64);
            }
        }
        let gt = Grid::constant(1, 5, 5, 2.0);
        let got = gradient_loss(&[pred], &[gt]).unwrap();
        assert!((got - 4.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn berhu_closed_forms() {
        let gt = depth_grid(4, 8, 5);
        assert_eq!(berhu_loss(&[gt.clone()], &[gt.clone()]).unwrap(), 0.0);

        // Single-pixel error e: c = 0.2|e| < |e|, so the quadratic branch
        // applies everywhere it matters.
        let gt1 = Grid::constant(1, 1, 1, 2.0);
        let pred1 = Grid::constant(1, 1, 1, 3.0);
        let e: f64 = 1.0;
        let c = 0.2 * e;
        let want = (e * e + c * c) / (2.0 * c);
        let got = berhu_loss(&[pred1], &[gt1]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn berhu_matches_direct_oracle() {
        let gt = depth_grid(4, 8, 6);
        let pred = depth_grid(4, 8, 7);
        let got = berhu_loss(&[pred.clone()], &[gt.clone()]).unwrap();
        let c = 0.2
            * pred
                .data
                .iter()
                .zip(&gt.data)
                .map(|(p, g)| (p - g).abs())
                .fold(0.0f64, f64::max);
        let want: f64 = pred
            .data
            .iter()
            .zip(&gt.data)
            .map(|(p, g)| {
                let e = p - g;
                if e.abs() <= c {
                    e.abs()
                } else {
                    (e * e + c * c) / (2.0 * c)
                }
            })
            .sum::<f64>()
            / 32.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_bookkeeping() {
        let gt = depth_grid(5, 6, 8);
        let pred = depth_grid(5, 6, 9);
        let b = total_loss(&[pred.clone()], &[gt.clone()], LossMode::Standard).unwrap();
        assert!((b.total - (b.mse + b.grad)).abs() < 1e-12);
        assert!(b.berhu.is_none());

        let bb = total_loss(&[pred], &[gt], LossMode::BerHu).unwrap();
        // Mode switch changes only the pixel term.
        assert_eq!(bb.grad.to_bits(), b.grad.to_bits());
        assert!((bb.total - (bb.berhu.unwrap() + bb.grad)).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_zero_all_fields() {
        let gt = depth_grid(5, 6, 10);
        let b = total_loss(&[gt.clone()], &[gt], LossMode::Standard).unwrap();
        assert_eq!(b.mse, 0.0);
        assert_eq!(b.grad, 0.0);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn masked_pixels_never_influence_losses() {
        let mut gt = depth_grid(6, 6, 11);
        let pred = depth_grid(6, 6, 12);
        let mask: Vec<bool> = (0..36).map(|i| i % 7 != 0).collect();
        gt.mask = Some(mask.clone());
        let base = total_loss(&[pred.clone()], &[gt.clone()], LossMode::Standard).unwrap();

        // Corrupt masked-out ground truth; nothing may change.
        let mut gt2 = gt.clone();
        for (i, v) in gt2.data.iter_mut().enumerate() {
            if !mask[i] {
                *v = 999.0;
            }
        }
        // Interior windows touching corrupted pixels are masked out too, so
        // the gradient term is also unaffected.
        let again = total_loss(&[pred], &[gt2], LossMode::Standard).unwrap();
        assert_eq!(base.mse.to_bits(), again.mse.to_bits());
        assert_eq!(base.grad.to_bits(), again.grad.to_bits());
    }

    #[test]
    fn empty_valid_set_is_degenerate() {
        let mut gt = depth_grid(4, 4, 13);
        gt.mask = Some(vec![false; 16]);
        let pred = depth_grid(4, 4, 14);
        assert!(matches!(
            mse_loss(&[pred], &[gt]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn downsample_preserves_scale_and_majority_mask() {
        let mut gt = Grid::new(1, 4, 4);
        for i in 0..16 {
            gt.data[i] = i as f64;
        }
        let half = downsample_depth(&gt, 2);
        assert_eq!(half.height, 2);
        assert!((half.get(0, 0, 0) - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);

        let mut masked = gt.clone();
        let mut m = vec![true; 16];
        m[0] = false;
        m[1] = false;
        m[4] = false; // 3 of 4 invalid in the top-left block
        masked.mask = Some(m);
        let half = downsample_depth(&masked, 2);
        let hm = half.mask.as_ref().unwrap();
        assert!(!hm[0]);
        assert!(hm[1]);
    }

    #[test]
    fn pyramid_sizes_follow_the_ladder() {
        let gt = depth_grid(32, 64, 15);
        let pyr = multiscale_ground_truth(&gt, 5);
        let sizes: Vec<(usize, usize)> = pyr.iter().map(|g| (g.height, g.width)).collect();
        assert_eq!(sizes, vec![(2, 4), (4, 8), (8, 16), (16, 32), (32, 64)]);
    }
}
