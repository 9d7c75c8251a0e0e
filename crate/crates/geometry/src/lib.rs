//! Multi-view geometry for camera localization: SE(3) poses, pinhole
//! projection, linear triangulation, PnP with Gauss-Newton refinement and a
//! seeded RANSAC wrapper.

pub mod camera;
pub mod error;
pub mod pnp;
pub mod ransac;
pub mod triangulate;
pub mod types;

pub use camera::{
    back_project, nearest_rotation, pose_error, project, so3_exp, Intrinsics, Pose, Projection,
    Z_MIN,
};
pub use error::GeometryError;
pub use pnp::{pnp_dlt, pnp_solve, refine_pose, PnpOptions, MIN_CORRESPONDENCES};
pub use ransac::{ransac_pnp, reprojection_error, RansacOptions, RansacOutcome};
pub use triangulate::{triangulate_dlt, Observation, TriangulationOptions};
pub use types::{Correspondence, Point3D};
