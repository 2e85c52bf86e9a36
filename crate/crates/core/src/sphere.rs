//! Coordinate mathematics between equirectangular pixel space, the unit
//! sphere, and tangent planes via gnomonic projection.
//!
//! Conventions fixed here and relied on everywhere else:
//!
//! - Pixel centers sit at integer coordinates after the `+0.5` shift, i.e.
//!   ERP pixel `(row, col)` maps to the sphere point of the cell center, and
//!   fractional pixel coordinates returned by [`latlon_to_erp_pixel`] have
//!   integer values exactly at pixel centers.
//! - Latitude is positive toward the north pole and rows grow southward;
//!   longitude grows with columns and is normalized to `[-π, π)`.
//! - Tangent-plane `y` is positive toward the projection of the north pole.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::layout::TangentPlaneSpec;

/// Hemisphere guard: gnomonic projection rejects points with
/// `cos(angular distance) <= EPS_HEMI` where the projection diverges.
pub const EPS_HEMI: f64 = 1e-6;

/// A point on the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatLon {
    lat: f64,
    lon: f64,
}

impl LatLon {
    /// Builds a point with latitude clamped to `[-π/2, π/2]` and longitude
    /// normalized to `[-π, π)`.
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon {
            lat: lat.clamp(-FRAC_PI_2, FRAC_PI_2),
            lon: normalize_lon(lon),
        }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64) -> Self {
        LatLon::new(lat_deg.to_radians(), lon_deg.to_radians())
    }

    /// Latitude in radians, within `[-π/2, π/2]`.
    pub fn lat(&self) -> f64 {
        self.lat
    }

    /// Longitude in radians, within `[-π, π)`.
    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Unit direction vector `(x, y, z)` with `y` toward the north pole and
    /// `z` toward `(lat=0, lon=0)`.
    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (sin_lat, cos_lat) = self.lat.sin_cos();
        let (sin_lon, cos_lon) = self.lon.sin_cos();
        [cos_lat * sin_lon, sin_lat, cos_lat * cos_lon]
    }
}

/// Point on a tangent plane in dimensionless gnomonic coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentXY {
    pub x: f64,
    pub y: f64,
}

/// Wraps a longitude into `[-π, π)`.
pub fn normalize_lon(lon: f64) -> f64 {
    let mut l = (lon + PI).rem_euclid(TAU) - PI;
    // rem_euclid can land exactly on π through rounding.
    if l >= PI {
        l -= TAU;
    }
    l
}

/// Angular distance between two sphere points, in radians.
///
/// Uses the atan2 form, which stays accurate for very small separations
/// where `acos` of a dot product loses about half the mantissa.
pub fn angular_distance(a: LatLon, b: LatLon) -> f64 {
    let va = a.to_unit_vector();
    let vb = b.to_unit_vector();
    let dot = va[0] * vb[0] + va[1] * vb[1] + va[2] * vb[2];
    let cross = [
        va[1] * vb[2] - va[2] * vb[1],
        va[2] * vb[0] - va[0] * vb[2],
        va[0] * vb[1] - va[1] * vb[0],
    ];
    let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    cross_norm.atan2(dot)
}

/// Sphere point at the center of ERP pixel `(row, col)`.
///
/// Panics if `row >= height` or `col >= width`.
pub fn erp_pixel_to_latlon(row: usize, col: usize, height: usize, width: usize) -> LatLon {
    assert!(
        row < height && col < width,
        "pixel index ({row}, {col}) out of range for {height}x{width} grid"
    );
    let lat = FRAC_PI_2 - PI * (row as f64 + 0.5) / height as f64;
    let lon = TAU * (col as f64 + 0.5) / width as f64 - PI;
    LatLon::new(lat, lon)
}

/// Fractional ERP pixel coordinates of a sphere point; exact inverse of
/// [`erp_pixel_to_latlon`] at pixel centers. The column may fall outside
/// `[0, width)`; samplers interpret it modulo `width`.
pub fn latlon_to_erp_pixel(p: LatLon, height: usize, width: usize) -> (f64, f64) {
    let row = (FRAC_PI_2 - p.lat()) * height as f64 / PI - 0.5;
    let col = (p.lon() + PI) * width as f64 / TAU - 0.5;
    (row, col)
}

/// Gnomonic projection of `p` onto the plane tangent at `center`.
///
/// Returns `None` when `p` lies outside the open hemisphere around `center`
/// (`cos c <= EPS_HEMI`), where the central projection diverges.
pub fn gnomonic_forward(p: LatLon, center: LatLon) -> Option<TangentXY> {
    let (sin_lat, cos_lat) = p.lat().sin_cos();
    let (sin_lat0, cos_lat0) = center.lat().sin_cos();
    let (sin_dlon, cos_dlon) = (p.lon() - center.lon()).sin_cos();
    let cos_c = sin_lat0 * sin_lat + cos_lat0 * cos_lat * cos_dlon;
    if cos_c <= EPS_HEMI {
        return None;
    }
    Some(TangentXY {
        x: cos_lat * sin_dlon / cos_c,
        y: (cos_lat0 * sin_lat - sin_lat0 * cos_lat * cos_dlon) / cos_c,
    })
}

/// Inverse gnomonic projection; exact inverse of [`gnomonic_forward`] on the
/// open hemisphere around `center`.
pub fn gnomonic_inverse(t: TangentXY, center: LatLon) -> LatLon {
    let rho_sq = t.x * t.x + t.y * t.y;
    if rho_sq == 0.0 {
        return center;
    }
    let (sin_lat0, cos_lat0) = center.lat().sin_cos();
    // With rho = tan c: sin c = rho/sqrt(1+rho²), cos c = 1/sqrt(1+rho²).
    let inv_hyp = 1.0 / (1.0 + rho_sq).sqrt();
    let lat = ((sin_lat0 + t.y * cos_lat0) * inv_hyp).clamp(-1.0, 1.0).asin();
    let lon = center.lon() + t.x.atan2(cos_lat0 - t.y * sin_lat0);
    LatLon::new(lat, lon)
}

/// Sphere point at the center of pixel `(row, col)` of a tangent patch.
///
/// The patch pixel grid spans `[-tan(fov/2), tan(fov/2)]²` on the tangent
/// plane with the pixel-center convention, row 0 at the top (toward the
/// projected north direction).
pub fn patch_pixel_to_latlon(row: usize, col: usize, spec: &TangentPlaneSpec) -> LatLon {
    let t = patch_pixel_to_tangent(row, col, spec);
    gnomonic_inverse(t, spec.center)
}

/// Tangent-plane coordinates of patch pixel `(row, col)`.
pub fn patch_pixel_to_tangent(row: usize, col: usize, spec: &TangentPlaneSpec) -> TangentXY {
    let half = (spec.fov * 0.5).tan();
    let res = spec.resolution as f64;
    TangentXY {
        x: -half + (col as f64 + 0.5) * 2.0 * half / res,
        y: half - (row as f64 + 0.5) * 2.0 * half / res,
    }
}

/// Fractional patch pixel coordinates of a tangent-plane point (inverse of
/// [`patch_pixel_to_tangent`], unclamped).
pub fn tangent_to_patch_pixel(t: TangentXY, spec: &TangentPlaneSpec) -> (f64, f64) {
    let half = (spec.fov * 0.5).tan();
    let res = spec.resolution as f64;
    let col = (t.x + half) * res / (2.0 * half) - 0.5;
    let row = (half - t.y) * res / (2.0 * half) - 0.5;
    (row, col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const DEG: f64 = PI / 180.0;

    #[test]
    fn erp_pixel_center_of_2x4() {
        let p = erp_pixel_to_latlon(1, 2, 2, 4);
        assert!((p.lat() - (-PI / 4.0)).abs() < 1e-15);
        assert!((p.lon() - PI / 4.0).abs() < 1e-15);
    }

    #[test]
    fn erp_pixel_boundary() {
        let p = erp_pixel_to_latlon(0, 0, 180, 360);
        assert!((p.lat() - (FRAC_PI_2 - PI * 0.5 / 180.0)).abs() < 1e-15);
        assert!((p.lon() - (-PI + TAU * 0.5 / 360.0)).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn erp_pixel_out_of_range_panics() {
        erp_pixel_to_latlon(2, 0, 2, 4);
    }

    #[test]
    fn erp_round_trip_exhaustive_16x32() {
        for row in 0..16 {
            for col in 0..32 {
                let p = erp_pixel_to_latlon(row, col, 16, 32);
                let (r, c) = latlon_to_erp_pixel(p, 16, 32);
                assert!((r - row as f64).abs() < 1e-12, "row {row} -> {r}");
                assert!((c - col as f64).abs() < 1e-12, "col {col} -> {c}");
            }
        }
    }

    #[test]
    fn latlon_to_pixel_center_and_pole() {
        let (r, c) = latlon_to_erp_pixel(LatLon::new(0.0, 0.0), 64, 128);
        assert!((r - 31.5).abs() < 1e-12);
        assert!((c - 63.5).abs() < 1e-12);
        let (r, _) = latlon_to_erp_pixel(LatLon::new(FRAC_PI_2, 1.0), 64, 128);
        assert!((r - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn latlon_pixel_random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = LatLon::new(
                rng.random_range(-FRAC_PI_2..FRAC_PI_2),
                rng.random_range(-PI..PI),
            );
            let (r, c) = latlon_to_erp_pixel(p, 90, 180);
            let lat = FRAC_PI_2 - PI * (r + 0.5) / 90.0;
            let lon = TAU * (c + 0.5) / 180.0 - PI;
            assert!((lat - p.lat()).abs() < 1e-12);
            assert!((lon - p.lon()).abs() < 1e-12);
        }
    }

    #[test]
    fn gnomonic_center_is_origin_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let c = LatLon::new(
                rng.random_range(-1.4..1.4),
                rng.random_range(-PI..PI),
            );
            let t = gnomonic_forward(c, c).unwrap();
            assert_eq!(t.x, 0.0);
            assert_eq!(t.y, 0.0);
            assert_eq!(gnomonic_inverse(t, c), c);
        }
    }

    #[test]
    fn gnomonic_meridian_closed_form() {
        let center = LatLon::new(0.0, 0.0);
        let p = LatLon::new(36.0 * DEG, 0.0);
        let t = gnomonic_forward(p, center).unwrap();
        assert!(t.x.abs() < 1e-15);
        assert!((t.y - (36.0 * DEG).tan()).abs() < 1e-12);
        assert!((t.y - 0.72654).abs() < 1e-4);

        let back = gnomonic_inverse(TangentXY { x: 0.0, y: (36.0 * DEG).tan() }, center);
        assert!((back.lat() - 36.0 * DEG).abs() < 1e-12);
        assert!(back.lon().abs() < 1e-12);
    }

    #[test]
    fn gnomonic_antipodal_rejected() {
        let c = LatLon::new(0.3, 0.7);
        let p = LatLon::new(-0.3, 0.7 - PI);
        assert!(gnomonic_forward(p, c).is_none());
    }

    #[test]
    fn gnomonic_round_trip_random_in_fov() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut max_err = 0.0f64;
        for _ in 0..20 {
            let c = LatLon::new(
                rng.random_range(-FRAC_PI_2..FRAC_PI_2),
                rng.random_range(-PI..PI),
            );
            for _ in 0..500 {
                // Random point within 80 degrees of the center.
                let dist = rng.random_range(0.0..80.0 * DEG);
                let bearing = rng.random_range(0.0..TAU);
                let p = offset_point(c, dist, bearing);
                let t = gnomonic_forward(p, c).unwrap();
                let back = gnomonic_inverse(t, c);
                max_err = max_err.max(angular_distance(p, back));
            }
        }
        assert!(max_err < 1e-9, "max angular error {max_err}");
    }

    /// Point at angular distance `dist` from `c` along `bearing` (clockwise
    /// from north); standard direct geodesic on the sphere.
    fn offset_point(c: LatLon, dist: f64, bearing: f64) -> LatLon {
        let (sin_lat0, cos_lat0) = c.lat().sin_cos();
        let (sin_d, cos_d) = dist.sin_cos();
        let lat = (sin_lat0 * cos_d + cos_lat0 * sin_d * bearing.cos()).asin();
        let lon = c.lon()
            + (bearing.sin() * sin_d * cos_lat0).atan2(cos_d - sin_lat0 * lat.sin());
        LatLon::new(lat, lon)
    }

    #[test]
    fn patch_center_pixel_maps_to_spec_center() {
        let spec = TangentPlaneSpec {
            center: LatLon::new(0.4, -1.1),
            fov: 72.0 * DEG,
            resolution: 5,
        };
        let p = patch_pixel_to_latlon(2, 2, &spec);
        assert!(angular_distance(p, spec.center) < 1e-15);
    }

    #[test]
    fn patch_corner_angular_distance_closed_form() {
        for res in [4usize, 8, 16, 24] {
            let spec = TangentPlaneSpec {
                center: LatLon::new(0.2, 0.5),
                fov: 72.0 * DEG,
                resolution: res,
            };
            let frac = (res as f64 - 1.0) / res as f64;
            let expected = (std::f64::consts::SQRT_2 * (36.0 * DEG).tan() * frac).atan();
            for (r, c) in [(0, 0), (0, res - 1), (res - 1, 0), (res - 1, res - 1)] {
                let p = patch_pixel_to_latlon(r, c, &spec);
                let d = angular_distance(p, spec.center);
                assert!((d - expected).abs() < 1e-12, "corner ({r},{c}): {d} vs {expected}");
            }
        }
    }

    #[test]
    fn lon_normalization_range() {
        for lon in [-7.0, -PI, PI, 3.5, 100.0, -100.0, TAU, -TAU] {
            let l = normalize_lon(lon);
            assert!((-PI..PI).contains(&l), "normalize_lon({lon}) = {l}");
        }
        assert_eq!(normalize_lon(PI), -PI);
    }
}
