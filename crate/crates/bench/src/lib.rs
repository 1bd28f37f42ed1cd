//! Fixtures shared by the benchmarks.

use cubefield::geometry::erp_pixel_to_sphere;
use cubefield::{CubicField, DepthPlaneSet, ErpGrid, Image, Mpi, Pose, PosedView};
use nalgebra::{Rotation3, Vector3};

pub fn smooth_pano(width: usize, phase: f64) -> Image {
    let grid = ErpGrid::new(width, width / 2).unwrap();
    Image::from_fn(width, width / 2, 3, |x, y, c| {
        let q = erp_pixel_to_sphere(x as f64 + 0.5, y as f64 + 0.5, &grid).q;
        0.5 + 0.35 * (2.0 * q.x + 1.5 * q.y * (c as f64 + 1.0) + q.z + phase).sin()
    })
}

/// Deterministic field with varied color and density on every plane.
pub fn field(w: usize, d: usize) -> CubicField {
    let planes = DepthPlaneSet::new(1.0, 8.0, d).unwrap();
    let mpis = std::array::from_fn(|f| {
        Mpi::from_fn(d, w, |b, x, y, c| {
            let v = ((f * 31 + b * 17 + x * 7 + y * 13 + c * 5) % 23) as f64 / 22.0;
            if c == 3 { 0.2 + v } else { v }
        })
    });
    CubicField::new(mpis, planes).unwrap()
}

pub fn pose() -> Pose {
    Pose::new(Rotation3::from_euler_angles(0.02, 0.15, -0.01).into_inner(), Vector3::new(0.1, -0.05, 0.2)).unwrap()
}

pub fn views(n: usize, width: usize) -> Vec<PosedView> {
    (0..n)
        .map(|k| PosedView {
            image: smooth_pano(width, 0.3 * (k + 1) as f64),
            pose: Pose::new(
                Rotation3::from_euler_angles(0.0, 0.1 * k as f64, 0.0).into_inner(),
                Vector3::new(0.05 * k as f64, 0.0, -0.1),
            )
            .unwrap(),
        })
        .collect()
}
