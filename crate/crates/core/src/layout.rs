//! Non-uniform tangent-patch layouts and spherical coverage checks.
//!
//! The default layout samples 26 patches at five latitudes with a 72° field
//! of view; a clipped 20-patch variant drops the polar rows for panoramas
//! with missing caps. Ablation presets trade patch count against FoV.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::sphere::{self, LatLon};

/// One tangent patch: center, field of view and square pixel resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentPlaneSpec {
    pub center: LatLon,
    /// Field of view in radians, within `(0, π)`.
    pub fov: f64,
    pub resolution: usize,
}

impl TangentPlaneSpec {
    /// Half-extent of the patch on the tangent plane, `tan(fov/2)`.
    pub fn tangent_half_extent(&self) -> f64 {
        (self.fov * 0.5).tan()
    }

    /// Whether a tangent-plane point falls within the patch extent.
    pub fn contains(&self, t: sphere::TangentXY) -> bool {
        let half = self.tangent_half_extent();
        t.x.abs() <= half && t.y.abs() <= half
    }
}

/// One latitude row of a layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayoutRow {
    /// Row latitude in radians.
    pub lat: f64,
    /// Number of patches, equally spaced in longitude.
    pub count: usize,
}

/// A named patch layout: rows of equally spaced centers sharing one FoV,
/// optionally rotated in longitude.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutConfig {
    pub name: String,
    /// Rows sorted by latitude.
    pub rows: Vec<LayoutRow>,
    /// Shared field of view in radians.
    pub fov: f64,
    /// Longitude rotation applied to every center, in radians.
    pub lon_offset: f64,
}

/// JSON form of a layout, all angles in degrees:
/// `{name, fov_deg, rows: [{lat_deg, count}], lon_offset_deg}`.
#[derive(Serialize, Deserialize)]
struct LayoutConfigJson {
    name: String,
    fov_deg: f64,
    rows: Vec<LayoutRowJson>,
    lon_offset_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct LayoutRowJson {
    lat_deg: f64,
    count: usize,
}

impl LayoutConfig {
    fn from_rows(name: &str, fov_deg: f64, rows: &[(f64, usize)]) -> Self {
        LayoutConfig {
            name: name.to_string(),
            rows: rows
                .iter()
                .map(|&(lat_deg, count)| LayoutRow {
                    lat: lat_deg.to_radians(),
                    count,
                })
                .collect(),
            fov: fov_deg.to_radians(),
            lon_offset: 0.0,
        }
    }

    /// The 26-patch layout: latitudes −72°…72° with 3, 6, 8, 6, 3 patches
    /// and a 72° FoV.
    pub fn full26() -> Self {
        Self::from_rows(
            "full-26",
            72.0,
            &[(-72.0, 3), (-36.0, 6), (0.0, 8), (36.0, 6), (72.0, 3)],
        )
    }

    /// The 20-patch layout for vertically clipped panoramas: latitudes
    /// ±31.2° and 0° with 6, 8, 6 patches.
    pub fn clipped20() -> Self {
        Self::from_rows("clipped-20", 72.0, &[(-31.2, 6), (0.0, 8), (31.2, 6)])
    }

    /// Looks up a preset by name: `full-26`, `clipped-20`, or an ablation
    /// preset `ablation-{10,18,26,46}`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full-26" => Ok(Self::full26()),
            "clipped-20" => Ok(Self::clipped20()),
            "ablation-10" => Ok(ablation_presets()[&10].clone()),
            "ablation-18" => Ok(ablation_presets()[&18].clone()),
            "ablation-26" => Ok(ablation_presets()[&26].clone()),
            "ablation-46" => Ok(ablation_presets()[&46].clone()),
            other => Err(Error::Config(format!(
                "unknown layout preset '{other}'; available: full-26, clipped-20, \
                 ablation-10, ablation-18, ablation-26, ablation-46"
            ))),
        }
    }

    /// Total number of patches.
    pub fn patch_count(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn with_lon_offset(mut self, lon_offset: f64) -> Self {
        self.lon_offset = lon_offset;
        self
    }

    pub fn to_json(&self) -> String {
        let j = LayoutConfigJson {
            name: self.name.clone(),
            fov_deg: self.fov.to_degrees(),
            rows: self
                .rows
                .iter()
                .map(|r| LayoutRowJson {
                    lat_deg: r.lat.to_degrees(),
                    count: r.count,
                })
                .collect(),
            lon_offset_deg: self.lon_offset.to_degrees(),
        };
        serde_json::to_string_pretty(&j).expect("layout serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: LayoutConfigJson = serde_json::from_str(text)?;
        let cfg = LayoutConfig {
            name: j.name,
            rows: j
                .rows
                .iter()
                .map(|r| LayoutRow {
                    lat: r.lat_deg.to_radians(),
                    count: r.count,
                })
                .collect(),
            fov: j.fov_deg.to_radians(),
            lon_offset: j.lon_offset_deg.to_radians(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("layout has no rows".into()));
        }
        if !(self.fov > 0.0 && self.fov < PI) {
            return Err(Error::Config(format!(
                "layout fov {} rad outside (0, pi)",
                self.fov
            )));
        }
        for row in &self.rows {
            if row.count == 0 {
                return Err(Error::Config(format!(
                    "layout row at {:.2} deg has zero patches",
                    row.lat.to_degrees()
                )));
            }
        }
        Ok(())
    }
}

/// Expands a layout into per-patch specs: each row's centers equally spaced
/// in longitude starting at `lon_offset`, all sharing the layout's FoV and
/// the given resolution.
pub fn build_layout(config: &LayoutConfig, resolution: usize) -> Result<Vec<TangentPlaneSpec>> {
    config.validate()?;
    if resolution == 0 {
        return Err(Error::Config("patch resolution must be positive".into()));
    }
    let mut specs = Vec::with_capacity(config.patch_count());
    for row in &config.rows {
        for k in 0..row.count {
            let lon = config.lon_offset + TAU * k as f64 / row.count as f64;
            specs.push(TangentPlaneSpec {
                center: LatLon::new(row.lat, lon),
                fov: config.fov,
                resolution,
            });
        }
    }
    Ok(specs)
}

/// The patch-count ablation presets, keyed by N. Pairs (N, FoV°):
/// (10, 120), (18, 90), (26, 72), (46, 60). Row splits for 10/18/46 keep
/// fewer patches near the poles and full sphere coverage at the given FoV.
pub fn ablation_presets() -> BTreeMap<usize, LayoutConfig> {
    let mut m = BTreeMap::new();
    m.insert(
        10,
        LayoutConfig::from_rows("ablation-10", 120.0, &[(-60.0, 3), (0.0, 4), (60.0, 3)]),
    );
    m.insert(
        18,
        LayoutConfig::from_rows("ablation-18", 90.0, &[(-45.0, 5), (0.0, 8), (45.0, 5)]),
    );
    m.insert(26, {
        let mut c = LayoutConfig::full26();
        c.name = "ablation-26".into();
        c
    });
    m.insert(
        46,
        LayoutConfig::from_rows(
            "ablation-46",
            60.0,
            &[(-72.0, 5), (-36.0, 10), (0.0, 16), (36.0, 10), (72.0, 5)],
        ),
    );
    m
}

/// Fraction of the sphere's area covered by at least one patch, estimated on
/// a cell-centered lat/lon grid weighted by `cos(lat)`.
///
/// A point is covered when its gnomonic projection onto some spec lands
/// within that spec's tangent extent.
pub fn coverage_fraction(layout: &[TangentPlaneSpec], grid_step: f64) -> f64 {
    assert!(grid_step > 0.0, "grid step must be positive");
    let n_lat = (PI / grid_step).round().max(1.0) as usize;
    let n_lon = (TAU / grid_step).round().max(1.0) as usize;

    // Per-latitude-row (covered weight, total weight), combined in row order.
    let rows: Vec<(f64, f64)> = exec::map_indexed(n_lat, |i| {
        let lat = -PI / 2.0 + (i as f64 + 0.5) * PI / n_lat as f64;
        let weight = lat.cos();
        let mut covered = 0usize;
        for j in 0..n_lon {
            let lon = -PI + (j as f64 + 0.5) * TAU / n_lon as f64;
            let p = LatLon::new(lat, lon);
            let hit = layout.iter().any(|spec| {
                sphere::gnomonic_forward(p, spec.center)
                    .map_or(false, |t| spec.contains(t))
            });
            if hit {
                covered += 1;
            }
        }
        (weight * covered as f64, weight * n_lon as f64)
    });

    let (covered, total) = rows
        .iter()
        .fold((0.0, 0.0), |(c, t), &(rc, rt)| (c + rc, t + rt));
    covered / total
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEG: f64 = PI / 180.0;

    #[test]
    fn full26_matches_published_rows() {
        let cfg = LayoutConfig::full26();
        let lats: Vec<f64> = cfg.rows.iter().map(|r| r.lat.to_degrees()).collect();
        let counts: Vec<usize> = cfg.rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![3, 6, 8, 6, 3]);
        for (got, want) in lats.iter().zip([-72.0, -36.0, 0.0, 36.0, 72.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((cfg.fov - 72.0 * DEG).abs() < 1e-12);
        assert_eq!(cfg.patch_count(), 26);
    }

    #[test]
    fn clipped20_matches_published_rows() {
        let cfg = LayoutConfig::clipped20();
        let lats: Vec<f64> = cfg.rows.iter().map(|r| r.lat.to_degrees()).collect();
        let counts: Vec<usize> = cfg.rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![6, 8, 6]);
        for (got, want) in lats.iter().zip([-31.2, 0.0, 31.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(cfg.patch_count(), 20);
    }

    #[test]
    fn single_row_equal_spacing() {
        let cfg = LayoutConfig {
            name: "row".into(),
            rows: vec![LayoutRow { lat: 0.0, count: 4 }],
            fov: 1.0,
            lon_offset: 0.0,
        };
        let specs = build_layout(&cfg, 8).unwrap();
        let lons: Vec<f64> = specs.iter().map(|s| s.center.lon()).collect();
        for (got, want_deg) in lons.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            let want = sphere::normalize_lon(want_deg * DEG);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_count_row_is_config_error() {
        let cfg = LayoutConfig {
            name: "bad".into(),
            rows: vec![LayoutRow { lat: 0.0, count: 0 }],
            fov: 1.0,
            lon_offset: 0.0,
        };
        assert!(matches!(build_layout(&cfg, 8), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_preset_table() {
        let presets = ablation_presets();
        let expect = [(10usize, 120.0), (18, 90.0), (26, 72.0), (46, 60.0)];
        for (n, fov_deg) in expect {
            let cfg = &presets[&n];
            assert_eq!(cfg.patch_count(), n, "preset {n}");
            assert!((cfg.fov - fov_deg * DEG).abs() < 1e-12, "preset {n} fov");
        }
    }

    #[test]
    fn single_patch_wide_fov_approaches_hemisphere() {
        let layout = vec![TangentPlaneSpec {
            center: LatLon::new(0.0, 0.0),
            // Near the half-sphere limit; the square extent overshoots the
            // inscribed disc, so compare loosely from below and above.
            fov: 178.0 * DEG,
            resolution: 4,
        }];
        let f = coverage_fraction(&layout, 1.0 * DEG);
        assert!((f - 0.5).abs() < 0.02, "fraction {f}");
    }

    #[test]
    fn full26_covers_everything_and_clipped_does_not() {
        let full = build_layout(&LayoutConfig::full26(), 8).unwrap();
        let clipped = build_layout(&LayoutConfig::clipped20(), 8).unwrap();
        let f_full = coverage_fraction(&full, 1.0 * DEG);
        let f_clipped = coverage_fraction(&clipped, 1.0 * DEG);
        assert_eq!(f_full, 1.0);
        assert!(f_clipped < 1.0);
        assert!(f_full >= f_clipped);

        // The clipped gap sits at the poles.
        let pole = LatLon::new(89.0 * DEG, 0.3);
        let pole_covered = clipped.iter().any(|s| {
            sphere::gnomonic_forward(pole, s.center).map_or(false, |t| s.contains(t))
        });
        assert!(!pole_covered);
    }

    #[test]
    fn ablation_presets_cover_fully_at_their_fov() {
        for (n, cfg) in ablation_presets() {
            let layout = build_layout(&cfg, 4).unwrap();
            let f = coverage_fraction(&layout, 1.0 * DEG);
            assert_eq!(f, 1.0, "preset {n} coverage {f}");
        }
    }

    #[test]
    fn row_rotation_permutes_centers() {
        let cfg = LayoutConfig::full26();
        let base = build_layout(&cfg, 4).unwrap();
        // Rotating by one equator slot (2pi/8) must permute the equator row.
        let rotated = build_layout(&cfg.clone().with_lon_offset(TAU / 8.0), 4).unwrap();
        let equator_base: Vec<f64> = base
            .iter()
            .filter(|s| s.center.lat().abs() < 1e-9)
            .map(|s| s.center.lon())
            .collect();
        let equator_rot: Vec<f64> = rotated
            .iter()
            .filter(|s| s.center.lat().abs() < 1e-9)
            .map(|s| s.center.lon())
            .collect();
        for lon in &equator_rot {
            assert!(
                equator_base
                    .iter()
                    .any(|b| sphere::normalize_lon(b - lon).abs() < 1e-9),
                "rotated lon {lon} not in base set"
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let cfg = LayoutConfig::clipped20().with_lon_offset(0.25);
        let text = cfg.to_json();
        let back = LayoutConfig::from_json(&text).unwrap();
        assert_eq!(back.name, cfg.name);
        assert_eq!(back.rows.len(), cfg.rows.len());
        assert!((back.fov - cfg.fov).abs() < 1e-12);
        assert!((back.lon_offset - cfg.lon_offset).abs() < 1e-12);
        // Schema keys are fixed.
        assert!(text.contains("fov_deg"));
        assert!(text.contains("lat_deg"));
        assert!(text.contains("lon_offset_deg"));
    }
}
