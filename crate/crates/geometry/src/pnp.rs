//! Perspective-n-point: linear initialization plus Gauss-Newton refinement
//! of the reprojection error on SE(3).

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};

use crate::camera::{nearest_rotation, Intrinsics, Pose, Z_MIN};
use crate::error::GeometryError;
use crate::types::Correspondence;

pub const MIN_CORRESPONDENCES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnpOptions {
    pub max_iterations: usize,
    /// Stop once the update norm falls below this.
    pub step_tol: f64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tol: 1e-10,
        }
    }
}

/// Linear pose from at least six correspondences.
///
/// Works in normalized image coordinates with centered, scaled world points,
/// then projects the left 3x3 block onto the rotation group.
pub fn pnp_dlt(corrs: &[Correspondence], k: &Intrinsics) -> Result<Pose, GeometryError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(GeometryError::TooFew {
            what: "correspondences",
            needed: MIN_CORRESPONDENCES,
            got: corrs.len(),
        });
    }
    let n = corrs.len() as f64;
    let centroid = corrs.iter().map(|c| c.world).sum::<Vector3<f64>>() / n;
    let scale = corrs.iter().map(|c| (c.world - centroid).norm()).sum::<f64>() / n;
    if scale < 1e-12 {
        return Err(GeometryError::Degenerate("all world points coincide".into()));
    }

    let mut a = DMatrix::<f64>::zeros(2 * corrs.len(), 12);
    for (i, c) in corrs.iter().enumerate() {
        let x = (c.world - centroid) / scale;
        let m = k.normalize(&c.pixel);
        let xh = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -m.x * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -m.y * xh[j];
        }
    }
    let svd = a.svd(false, true);
    let (sv, vt) = (svd.singular_values, svd.v_t.expect("requested v_t"));
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let largest = sv[order[0]];
    let second_smallest = sv[order[order.len() - 2]];
    if largest <= 0.0 || second_smallest / largest < 1e-10 {
        return Err(GeometryError::Degenerate(
            "rank-deficient PnP design matrix".into(),
        ));
    }
    let h = vt.row(order[order.len() - 1]);
    let mut m = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = h[4 * r + c];
        }
    }
    let tail = Vector3::new(h[3], h[7], h[11]);
    // m = alpha * scale * R; the sign of det(m) is the sign of alpha
    let sign = m.determinant().signum();
    let (m, tail) = (m * sign, tail * sign);
    let svd = m.svd(false, false);
    let mean_sv = svd.singular_values.mean();
    if mean_sv <= 0.0 {
        return Err(GeometryError::Degenerate("vanishing PnP solution".into()));
    }
    let rotation = nearest_rotation(&m);
    let alpha = mean_sv / scale;
    // tail = alpha * (R centroid + t)
    let translation = tail / alpha - rotation * centroid;
    Ok(Pose::new(rotation, translation))
}

/// Sum of squared reprojection residuals; `None` if any point is behind.
fn residuals(pose: &Pose, corrs: &[Correspondence], k: &Intrinsics) -> Option<f64> {
    let mut cost = 0.0;
    for c in corrs {
        let p = pose.transform(&c.world);
        if p.z <= Z_MIN {
            return None;
        }
        let du = k.fx * p.x / p.z + k.cx - c.pixel.x;
        let dv = k.fy * p.y / p.z + k.cy - c.pixel.y;
        cost += du * du + dv * dv;
    }
    Some(cost)
}

/// Gauss-Newton refinement of `init` on the reprojection error.
pub fn refine_pose(
    init: Pose,
    corrs: &[Correspondence],
    k: &Intrinsics,
    opts: &PnpOptions,
) -> Pose {
    let mut pose = init;
    let Some(mut cost) = residuals(&pose, corrs, k) else {
        return pose;
    };
    for _ in 0..opts.max_iterations {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corrs {
            let p = pose.transform(&c.world);
            let iz = 1.0 / p.z;
            let ru = k.fx * p.x * iz + k.cx - c.pixel.x;
            let rv = k.fy * p.y * iz + k.cy - c.pixel.y;
            // d(u,v)/dp
            let du = Vector3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz);
            let dv = Vector3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz);
            // dp/domega = -[p]x, dp/dv = I; row = d/dp · [ -[p]x | I ]
            let ju = Vector6::new(
                du.z * p.y - du.y * p.z,
                du.x * p.z - du.z * p.x,
                du.y * p.x - du.x * p.y,
                du.x,
                du.y,
                du.z,
            );
            let jv = Vector6::new(
                dv.z * p.y - dv.y * p.z,
                dv.x * p.z - dv.z * p.x,
                dv.y * p.x - dv.x * p.y,
                dv.x,
                dv.y,
                dv.z,
            );
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let Some(delta) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else {
            break;
        };
        let mut step = delta;
        let mut accepted = false;
        for _ in 0..8 {
            let omega = Vector3::new(step[0], step[1], step[2]);
            let v = Vector3::new(step[3], step[4], step[5]);
            let cand = pose.perturbed(&omega, &v);
            if let Some(c) = residuals(&cand, corrs, k) {
                if c <= cost {
                    pose = cand;
                    cost = c;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < opts.step_tol {
            break;
        }
    }
    pose.rotation = nearest_rotation(&pose.rotation);
    pose
}

/// Pose from at least six correspondences.
pub fn pnp_solve(
    corrs: &[Correspondence],
    k: &Intrinsics,
    opts: &PnpOptions,
) -> Result<Pose, GeometryError> {
    let init = pnp_dlt(corrs, k)?;
    Ok(refine_pose(init, corrs, k, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{pose_error, project, so3_exp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, pose: &Pose, n: usize) -> Vec<Correspondence> {
        let mut out = Vec::new();
        while out.len() < n {
            let x = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(3.0..7.0),
            );
            let world = pose.rotation.transpose() * (x - pose.translation);
            if let Some(px) = project(pose, &k(), &world).pixel() {
                out.push(Correspondence::new(px, world, 1.0));
            }
        }
        out
    }

    #[test]
    fn noiseless_twelve_points_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let truth = Pose::from_center(
                so3_exp(&Vector3::new(0.2, -0.4, 0.1)),
                Vector3::new(rng.random_range(-1.0..1.0), 0.5, -1.0),
            );
            let corrs = scene(&mut rng, &truth, 12);
            let est = pnp_solve(&corrs, &k(), &PnpOptions::default()).unwrap();
            let (t, r) = pose_error(&est, &truth);
            assert!(t < 1e-6, "center error {t}");
            assert!(r.to_radians() < 1e-6, "angle error {r}");
            assert!(est.is_valid(1e-9));
        }
    }

    #[test]
    fn five_points_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corrs = scene(&mut rng, &Pose::identity(), 5);
        assert!(matches!(
            pnp_solve(&corrs, &k(), &PnpOptions::default()),
            Err(GeometryError::TooFew { needed: 6, got: 5, .. })
        ));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let corrs: Vec<Correspondence> = (0..8)
            .map(|i| {
                let w = Vector3::new(i as f64 * 0.3, 0.0, 5.0);
                let px = project(&Pose::identity(), &k(), &w).pixel().unwrap();
                Correspondence::new(px, w, 1.0)
            })
            .collect();
        assert!(matches!(
            pnp_solve(&corrs, &k(), &PnpOptions::default()),
            Err(GeometryError::Degenerate(_))
        ));
    }
}
