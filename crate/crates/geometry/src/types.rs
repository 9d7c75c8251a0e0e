use nalgebra::{Vector2, Vector3};

/// A scene point produced by triangulation. `position` is meaningful only
/// when `valid` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3D {
    pub id: u32,
    pub position: Vector3<f64>,
    pub valid: bool,
}

impl Point3D {
    pub fn invalid(id: u32) -> Self {
        Self {
            id,
            position: Vector3::zeros(),
            valid: false,
        }
    }

    pub fn valid_position(&self) -> Option<Vector3<f64>> {
        self.valid.then_some(self.position)
    }
}

/// A 2D-3D match used for pose estimation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub pixel: Vector2<f64>,
    pub world: Vector3<f64>,
    pub confidence: f64,
}

impl Correspondence {
    pub fn new(pixel: Vector2<f64>, world: Vector3<f64>, confidence: f64) -> Self {
        Self {
            pixel,
            world,
            confidence: confidence.clamp(0.0, 1.0),
        }
    }
}
