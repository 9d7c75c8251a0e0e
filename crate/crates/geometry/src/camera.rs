//! Camera poses, intrinsics and pinhole projection.
//!
//! Poses are camera-from-world: `x_cam = R · x_world + t`. The camera looks
//! down +z with +x to the right and +y down the image.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};

use crate::error::GeometryError;

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const Z_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Pose of a camera at `center` looking at `target`; `up` fixes the roll
    /// (image -y points along the projection of `up`).
    pub fn look_at(
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let z = target - center;
        if z.norm() < 1e-12 {
            return Err(GeometryError::Degenerate("look_at target equals center".into()));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(GeometryError::Degenerate("look_at up vector parallel to view".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self::from_center(rotation, center))
    }

    /// Builds the pose from a rotation and the camera center `C` (`t = -R C`).
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation: -rotation * center,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `RᵀR = I` and `det R = 1` within `tol`, finite center.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.center().iter().all(|v| v.is_finite())
    }

    /// Left-multiplies by `exp(omega)` and then adds `v` to the translation.
    pub fn perturbed(&self, omega: &Vector3<f64>, v: &Vector3<f64>) -> Self {
        let dr = so3_exp(omega);
        Self {
            rotation: dr * self.rotation,
            translation: dr * self.translation + v,
        }
    }
}

/// Rotation matrix of the axis-angle vector `omega`.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let angle = omega.norm();
    if angle < 1e-300 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_unchecked(omega / angle), angle).into_inner()
}

/// Nearest rotation (in Frobenius norm) to an arbitrary 3x3 matrix.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Pixel to normalized image-plane coordinates.
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    pub fn contains(&self, px: &Vector2<f64>, margin: f64) -> bool {
        px.x >= margin
            && px.y >= margin
            && px.x <= self.width as f64 - margin
            && px.y <= self.height as f64 - margin
    }
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Pixel(Vector2<f64>),
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<Vector2<f64>> {
        match self {
            Projection::Pixel(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

pub fn project(pose: &Pose, k: &Intrinsics, x: &Vector3<f64>) -> Projection {
    let p = pose.transform(x);
    if p.z <= Z_MIN {
        return Projection::BehindCamera;
    }
    Projection::Pixel(Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// World-frame ray `(origin, unit direction)` through a pixel.
pub fn back_project(pose: &Pose, k: &Intrinsics, px: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let n = k.normalize(px);
    let dir_cam = Vector3::new(n.x, n.y, 1.0);
    let dir = (pose.rotation.transpose() * dir_cam).normalize();
    (pose.center(), dir)
}

/// Camera-center distance (meters) and rotation angle (degrees) between an
/// estimate and the truth.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let translation = (estimate.center() - truth.center()).norm();
    let rel = truth.rotation.transpose() * estimate.rotation;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // sin from the skew part keeps precision near 0 and 180 degrees
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    let angle = sin.atan2(cos).to_degrees().clamp(0.0, 180.0);
    (translation, angle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn optical_axis_and_hand_arithmetic() {
        let id = Pose::identity();
        assert_eq!(
            project(&id, &k100(), &Vector3::new(0.0, 0.0, 1.0)),
            Projection::Pixel(Vector2::new(50.0, 50.0))
        );
        assert_eq!(
            project(&id, &k100(), &Vector3::new(1.0, 0.0, 1.0)),
            Projection::Pixel(Vector2::new(150.0, 50.0))
        );
        assert_eq!(
            project(&id, &k100(), &Vector3::new(0.0, 0.0, -1.0)),
            Projection::BehindCamera
        );
        assert_eq!(
            project(&id, &k100(), &Vector3::new(0.0, 0.0, 0.0)),
            Projection::BehindCamera
        );
    }

    #[test]
    fn project_back_project_ray_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = Intrinsics::new(520.0, 515.0, 320.0, 240.0, 640, 480).unwrap();
        for _ in 0..200 {
            let omega = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pose = Pose::from_center(so3_exp(&omega), Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
            let depth = rng.random_range(1.0..10.0);
            let dir_cam = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.4..0.4), 1.0);
            let x = pose.rotation.transpose() * (dir_cam * depth - pose.translation);
            let px = project(&pose, &k, &x).pixel().unwrap();
            let (o, d) = back_project(&pose, &k, &px);
            let along = (x - o).dot(&d);
            let reproj = project(&pose, &k, &(o + d * along)).pixel().unwrap();
            assert!((reproj - px).norm() < 1e-9);
        }
    }

    #[test]
    fn pose_error_cases() {
        let a = Pose::identity();
        assert_eq!(pose_error(&a, &a), (0.0, 0.0));
        let yaw = Pose::new(so3_exp(&Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0)), Vector3::zeros());
        let (t, r) = pose_error(&yaw, &a);
        assert!(t.abs() < 1e-12);
        assert!((r - 90.0).abs() < 1e-12);
    }

    #[test]
    fn pose_error_matches_quaternion_oracle() {
        use nalgebra::UnitQuaternion;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut draw = || Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (w1, w2, c1, c2) = (draw(), draw(), draw(), draw());
            let p1 = Pose::from_center(so3_exp(&w1), c1);
            let p2 = Pose::from_center(so3_exp(&w2), c2);
            let q1 = UnitQuaternion::from_matrix(&p1.rotation);
            let q2 = UnitQuaternion::from_matrix(&p2.rotation);
            // oracle: 2 acos |<q1, q2>|
            let dot = q1.coords.dot(&q2.coords).abs().min(1.0);
            let oracle = (2.0 * dot.acos()).to_degrees();
            let (t, r) = pose_error(&p1, &p2);
            assert!((r - oracle).abs() < 1e-9, "{r} vs {oracle}");
            assert!((t - (c1 - c2).norm()).abs() < 1e-12);
            let (t2, r2) = pose_error(&p2, &p1);
            assert!((t - t2).abs() < 1e-12 && (r - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let pose = Pose::look_at(Vector3::new(5.0, 1.0, 2.0), Vector3::new(0.0, 0.0, 0.0), Vector3::z()).unwrap();
        assert!(pose.is_valid(1e-12));
        let px = project(&pose, &k100(), &Vector3::zeros()).pixel().unwrap();
        assert!((px - Vector2::new(50.0, 50.0)).norm() < 1e-9);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 2, 2).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.0, 1.0, 2, 2).is_err());
    }
}
