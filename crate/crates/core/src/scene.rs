//! Analytic test scene: a planar box room rendered to ERP with exact
//! ground-truth depth. Used by the toy trainer and by end-to-end tests in
//! place of full-scale datasets.

use crate::grid::Grid;
use crate::sphere;

/// Room half-extents in meters, (x, y, z); y is up.
const HALF: [f64; 3] = [4.0, 2.0, 3.0];
/// Camera position, off-center so every wall sits at a distinct depth.
const CAM: [f64; 3] = [0.6, -0.3, -0.4];

/// Ray length from the camera to the first room wall along `dir`.
fn wall_distance(dir: [f64; 3]) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut face = 0;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-12 {
            continue;
        }
        let target = if dir[axis] > 0.0 { HALF[axis] } else { -HALF[axis] };
        let t = (target - CAM[axis]) / dir[axis];
        if t > 0.0 {
            // Reject intersections outside the face rectangle.
            let mut inside = true;
            for other in 0..3 {
                if other == axis {
                    continue;
                }
                let coord = CAM[other] + t * dir[other];
                if coord.abs() > HALF[other] + 1e-9 {
                    inside = false;
                    break;
                }
            }
            if inside && t < best {
                best = t;
                face = axis * 2 + usize::from(dir[axis] < 0.0);
            }
        }
    }
    (best, face)
}

/// Renders the analytic room at ERP resolution `height × width`.
/// Returns `(rgb image in [0,1], depth in meters)`; both fully valid.
pub fn room_scene(height: usize, width: usize) -> (Grid, Grid) {
    let mut image = Grid::new(3, height, width);
    let mut depth = Grid::new(1, height, width);

    // Distinct base colors per face, smooth in-plane shading on top.
    let albedo: [[f64; 3]; 6] = [
        [0.85, 0.35, 0.30],
        [0.30, 0.65, 0.85],
        [0.80, 0.80, 0.55],
        [0.45, 0.45, 0.50],
        [0.35, 0.75, 0.45],
        [0.75, 0.50, 0.75],
    ];

    for r in 0..height {
        for c in 0..width {
            let p = sphere::erp_pixel_to_latlon(r, c, height, width);
            let dir = p.to_unit_vector();
            let (t, face) = wall_distance(dir);
            depth.set(0, r, c, t);

            let hit = [
                CAM[0] + t * dir[0],
                CAM[1] + t * dir[1],
                CAM[2] + t * dir[2],
            ];
            // In-plane coordinates of the hit point drive a smooth stripe
            // texture; distance attenuates brightness.
            let axis = face / 2;
            let (u, v) = match axis {
                0 => (hit[1], hit[2]),
                1 => (hit[0], hit[2]),
                _ => (hit[0], hit[1]),
            };
            let stripes = 0.5 + 0.25 * (1.3 * u).sin() + 0.25 * (1.7 * v).cos();
            let falloff = 1.0 / (1.0 + 0.08 * t * t);
            for ch in 0..3 {
                let val = (albedo[face][ch] * stripes * falloff).clamp(0.0, 1.0);
                image.set(ch, r, c, val);
            }
        }
    }
    (image, depth)
}
