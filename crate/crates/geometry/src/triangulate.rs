//! Multi-view linear triangulation.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Vector2, Vector3};

use crate::camera::{project, Intrinsics, Pose, Projection};
use crate::error::GeometryError;
use crate::types::Point3D;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationOptions {
    /// Maximum reprojection error in any observing view, pixels.
    pub reproj_tol: f64,
    /// Minimum angle between any two observing rays, degrees.
    pub min_angle_deg: f64,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            reproj_tol: 2.0,
            min_angle_deg: 0.5,
        }
    }
}

/// One pixel observation of a track.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub view: usize,
    pub pixel: Vector2<f64>,
}

/// Homogeneous DLT least-squares point from `observations`.
///
/// `poses` and `intrinsics` are indexed by view id. The point is returned
/// invalid when it projects behind any observing camera, reprojects worse
/// than `reproj_tol`, or the widest ray pair is narrower than `min_angle_deg`.
pub fn triangulate_dlt(
    id: u32,
    observations: &[Observation],
    poses: &[Pose],
    intrinsics: &[Intrinsics],
    opts: &TriangulationOptions,
) -> Result<Point3D, GeometryError> {
    let views: BTreeSet<usize> = observations.iter().map(|o| o.view).collect();
    if views.len() < 2 {
        return Err(GeometryError::TooFew {
            what: "distinct views",
            needed: 2,
            got: views.len(),
        });
    }
    for o in observations {
        if o.view >= poses.len() || o.view >= intrinsics.len() {
            return Err(GeometryError::UnknownView(o.view));
        }
    }

    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, o) in observations.iter().enumerate() {
        let pose = &poses[o.view];
        let n = intrinsics[o.view].normalize(&o.pixel);
        let r = &pose.rotation;
        let t = &pose.translation;
        for c in 0..3 {
            a[(2 * i, c)] = n.x * r[(2, c)] - r[(0, c)];
            a[(2 * i + 1, c)] = n.y * r[(2, c)] - r[(1, c)];
        }
        a[(2 * i, 3)] = n.x * t.z - t.x;
        a[(2 * i + 1, 3)] = n.y * t.z - t.y;
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested v_t");
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("four singular values");
    let h = vt.row(min_idx);
    if h[3].abs() < 1e-14 {
        return Ok(Point3D::invalid(id));
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    if !x.iter().all(|v| v.is_finite()) {
        return Ok(Point3D::invalid(id));
    }

    for o in observations {
        match project(&poses[o.view], &intrinsics[o.view], &x) {
            Projection::BehindCamera => return Ok(Point3D::invalid(id)),
            Projection::Pixel(p) => {
                if (p - o.pixel).norm() > opts.reproj_tol {
                    return Ok(Point3D::invalid(id));
                }
            }
        }
    }

    let rays: Vec<Vector3<f64>> = views
        .iter()
        .map(|&v| (x - poses[v].center()).normalize())
        .collect();
    let mut widest: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            let ang = rays[i].cross(&rays[j]).norm().atan2(rays[i].dot(&rays[j]));
            widest = widest.max(ang);
        }
    }
    if widest.to_degrees() < opts.min_angle_deg {
        return Ok(Point3D::invalid(id));
    }

    Ok(Point3D {
        id,
        position: x,
        valid: true,
    })
}
