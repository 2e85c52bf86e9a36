//! Depth evaluation metrics over valid pixels, with distance-binned
//! breakdowns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Default distance bin edges in meters.
pub const DEFAULT_BIN_EDGES: [f64; 6] = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0];

/// Metrics over one distance bin `[lo, hi)`. Empty bins report `None`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinReport {
    pub range_m: (f64, f64),
    /// Share of valid pixels whose ground truth lies in this bin.
    pub pixel_fraction: f64,
    pub abs_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub delta1: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DepthMetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    /// δ accuracies in percent.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub bins: Vec<BinReport>,
    pub valid_pixels: usize,
}

fn check_depth_pair(pred: &Grid, gt: &Grid) -> Result<()> {
    if pred.channels != 1 || gt.channels != 1 || pred.height != gt.height || pred.width != gt.width
    {
        return Err(Error::shape(
            "depth_metrics",
            format!(
                "pred {}x{}x{} vs gt {}x{}x{}",
                pred.channels, pred.height, pred.width, gt.channels, gt.height, gt.width
            ),
        ));
    }
    Ok(())
}

/// Indices of pixels that count: externally masked in, positive ground truth,
/// and within `max_depth`. Predictions are never clamped.
fn valid_indices(gt: &Grid, mask: Option<&[bool]>, max_depth: f64) -> Vec<usize> {
    (0..gt.pixels())
        .filter(|&i| {
            let masked_in = mask.map_or(true, |m| m[i]) && gt.mask.as_ref().map_or(true, |m| m[i]);
            masked_in && gt.data[i] > 0.0 && gt.data[i] <= max_depth
        })
        .collect()
}

struct Accum {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    d1: usize,
    d2: usize,
    d3: usize,
    n: usize,
}

fn accumulate(pred: &Grid, gt: &Grid, idx: &[usize]) -> Accum {
    let mut a = Accum {
        abs_rel: 0.0,
        sq_rel: 0.0,
        sq: 0.0,
        d1: 0,
        d2: 0,
        d3: 0,
        n: idx.len(),
    };
    for &i in idx {
        let d = pred.data[i];
        let g = gt.data[i];
        let e = d - g;
        a.abs_rel += e.abs() / g;
        a.sq_rel += e * e / g;
        a.sq += e * e;
        let ratio = (d / g).max(g / d);
        if ratio < 1.25 {
            a.d1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            a.d2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            a.d3 += 1;
        }
    }
    a
}

/// Per-bin AbsRel / RMSE / δ1 over pixels whose ground truth falls in
/// `[edges[k], edges[k+1])`; `pixel_fraction` is relative to all valid pixels.
pub fn binned_metrics(
    pred: &Grid,
    gt: &Grid,
    mask: Option<&[bool]>,
    bin_edges: &[f64],
) -> Result<Vec<BinReport>> {
    check_depth_pair(pred, gt)?;
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "bin edges must be ascending, got {bin_edges:?}"
        )));
    }
    let max_depth = *bin_edges.last().unwrap();
    let idx = valid_indices(gt, mask, max_depth);
    let total = idx.len().max(1);
    let mut bins = Vec::with_capacity(bin_edges.len() - 1);
    for w in bin_edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let in_bin: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| gt.data[i] >= lo && gt.data[i] < hi)
            .collect();
        let a = accumulate(pred, gt, &in_bin);
        let report = if a.n == 0 {
            BinReport {
                range_m: (lo, hi),
                pixel_fraction: 0.0,
                abs_rel: None,
                rmse: None,
                delta1: None,
            }
        } else {
            BinReport {
                range_m: (lo, hi),
                pixel_fraction: a.n as f64 / total as f64,
                abs_rel: Some(a.abs_rel / a.n as f64),
                rmse: Some((a.sq / a.n as f64).sqrt()),
                delta1: Some(100.0 * a.d1 as f64 / a.n as f64),
            }
        };
        bins.push(report);
    }
    Ok(bins)
}

/// Full metric suite over valid pixels: AbsRel, SqRel, RMSE, δ1/δ2/δ3 (in
/// percent) plus the distance-binned breakdown.
///
/// Valid pixels have `mask` true (when given), ground truth mask true (when
/// present), and ground truth in `(0, max_depth]`.
pub fn depth_metrics(
    pred: &Grid,
    gt: &Grid,
    mask: Option<&[bool]>,
    max_depth: f64,
    bin_edges: &[f64],
) -> Result<DepthMetricsReport> {
    check_depth_pair(pred, gt)?;
    let idx = valid_indices(gt, mask, max_depth);
    if idx.is_empty() {
        return Err(Error::Degenerate(
            "no valid pixels for depth metrics".into(),
        ));
    }
    let a = accumulate(pred, gt, &idx);
    let n = a.n as f64;
    let bins = binned_metrics(pred, gt, mask, bin_edges)?;
    Ok(DepthMetricsReport {
        abs_rel: a.abs_rel / n,
        sq_rel: a.sq_rel / n,
        rmse: (a.sq / n).sqrt(),
        delta1: 100.0 * a.d1 as f64 / n,
        delta2: 100.0 * a.d2 as f64 / n,
        delta3: 100.0 * a.d3 as f64 / n,
        bins,
        valid_pixels: a.n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn depth_grid(h: usize, w: usize, lo: f64, hi: f64, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.random_range(lo..hi)).collect();
        Grid::from_data(1, h, w, data, None).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = depth_grid(4, 8, 0.5, 9.0, 1);
        let r = depth_metrics(&gt, &gt, None, 10.0, &DEFAULT_BIN_EDGES).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        assert_eq!(r.sq_rel, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.delta1, 100.0);
        assert_eq!(r.delta2, 100.0);
        assert_eq!(r.delta3, 100.0);
        assert_eq!(r.valid_pixels, 32);
    }

    #[test]
    fn uniform_thirty_percent_overshoot() {
        let gt = depth_grid(4, 8, 0.5, 9.0, 2);
        let mut pred = gt.clone();
        for v in &mut pred.data {
            *v *= 1.3;
        }
        let r = depth_metrics(&pred, &gt, None, 10.0, &DEFAULT_BIN_EDGES).unwrap();
        assert!((r.abs_rel - 0.3).abs() < 1e-12);
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 100.0); // 1.25 < 1.3 < 1.5625
        assert_eq!(r.delta3, 100.0);
    }

    #[test]
    fn matches_independent_oracle() {
        let gt = depth_grid(4, 8, 0.5, 9.5, 3);
        let pred = depth_grid(4, 8, 0.5, 9.5, 4);
        let r = depth_metrics(&pred, &gt, None, 10.0, &DEFAULT_BIN_EDGES).unwrap();

        // Independently coded metric computation.
        let n = 32.0;
        let mut abs_rel = 0.0;
        let mut sq_rel = 0.0;
        let mut sq = 0.0;
        let mut d1 = 0.0;
        for i in 0..32 {
            let (d, g) = (pred.data[i], gt.data[i]);
            abs_rel += (d - g).abs() / g;
            sq_rel += (d - g).powi(2) / g;
            sq += (d - g).powi(2);
            if (d / g).max(g / d) < 1.25 {
                d1 += 1.0;
            }
        }
        assert!((r.abs_rel - abs_rel / n).abs() < 1e-12);
        assert!((r.sq_rel - sq_rel / n).abs() < 1e-12);
        assert!((r.rmse - (sq / n).sqrt()).abs() < 1e-12);
        assert!((r.delta1 - 100.0 * d1 / n).abs() < 1e-12);
    }

    #[test]
    fn delta_is_symmetric_in_pred_and_gt() {
        let gt = depth_grid(4, 8, 0.5, 9.5, 5);
        let pred = depth_grid(4, 8, 0.5, 9.5, 6);
        // Swapping roles keeps the gt-validity set identical here (both in
        // range), so the deltas must match; the error metrics must not.
        let a = depth_metrics(&pred, &gt, None, 10.0, &DEFAULT_BIN_EDGES).unwrap();
        let b = depth_metrics(&gt, &pred, None, 10.0, &DEFAULT_BIN_EDGES).unwrap();
        assert_eq!(a.delta1, b.delta1);
        assert_eq!(a.delta2, b.delta2);
        assert_eq!(a.delta3, b.delta3);
        assert!((a.abs_rel - b.abs_rel).abs() > 1e-9);
    }

    #[test]
    fn delta_ordering_invariant() {
        let gt = depth_grid(6, 6, 0.5, 9.5, 7);
        let pred = depth_grid(6, 6, 0.5, 9.5, 8);
        let r = depth_metrics(&pred, &gt, None, 10.0, &DEFAULT_BIN_EDGES).unwrap();
        assert!(r.delta1 <= r.delta2);
        assert!(r.delta2 <= r.delta3);
        assert!(r.delta3 <= 100.0);
    }

    #[test]
    fn bins_hand_case() {
        // Six pixels with known bin membership.
        let gt = Grid::from_data(1, 1, 6, vec![1.0, 1.5, 3.0, 5.0, 9.0, 9.5], None).unwrap();
        let pred = Grid::from_data(1, 1, 6, vec![1.1, 1.5, 3.3, 4.0, 9.0, 19.0], None).unwrap();
        let bins = binned_metrics(&pred, &gt, None, &DEFAULT_BIN_EDGES).unwrap();
        let fractions: Vec<f64> = bins.iter().map(|b| b.pixel_fraction).collect();
        assert_eq!(fractions, vec![2.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.0, 2.0 / 6.0]);
        assert!(bins[3].abs_rel.is_none());
        // Bin [0,2): errors 0.1/1.0 and 0.0 -> abs_rel 0.05.
        assert!((bins[0].abs_rel.unwrap() - 0.05).abs() < 1e-12);
        // Bin [8,10): 9.0 exact, 19.0 vs 9.5 misses delta1.
        assert!((bins[4].delta1.unwrap() - 50.0).abs() < 1e-12);
        let total: f64 = fractions.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_gt_is_excluded() {
        let gt = Grid::from_data(1, 1, 4, vec![1.0, -0.5, 0.0, 12.0], None).unwrap();
        let pred = Grid::constant(1, 1, 4, 1.0);
        let r = depth_metrics(&pred, &gt, None, 10.0, &DEFAULT_BIN_EDGES).unwrap();
        assert_eq!(r.valid_pixels, 1);
    }

    #[test]
    fn degenerate_when_nothing_valid() {
        let gt = Grid::constant(1, 2, 2, -1.0);
        let pred = Grid::constant(1, 2, 2, 1.0);
        assert!(matches!(
            depth_metrics(&pred, &gt, None, 10.0, &DEFAULT_BIN_EDGES),
            Err(Error::Degenerate(_))
        ));
    }
}
