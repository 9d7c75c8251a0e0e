//! Seeded RANSAC around the PnP solver.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{Intrinsics, Pose, Z_MIN};
use crate::error::GeometryError;
use crate::pnp::{pnp_dlt, pnp_solve, refine_pose, PnpOptions, MIN_CORRESPONDENCES};
use crate::types::Correspondence;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacOptions {
    /// Inlier reprojection threshold, pixels.
    pub inlier_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Gauss-Newton iterations spent on each minimal-sample hypothesis.
    pub hypothesis_refine_iters: usize,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            inlier_tol: 3.0,
            max_iters: 1000,
            seed: 0,
            hypothesis_refine_iters: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RansacOutcome {
    Localized { pose: Pose, inliers: Vec<bool> },
    /// No hypothesis reached the minimum consensus.
    Failed { best_inliers: usize },
}

impl RansacOutcome {
    pub fn pose(&self) -> Option<&Pose> {
        match self {
            RansacOutcome::Localized { pose, .. } => Some(pose),
            RansacOutcome::Failed { .. } => None,
        }
    }

    pub fn num_inliers(&self) -> usize {
        match self {
            RansacOutcome::Localized { inliers, .. } => inliers.iter().filter(|b| **b).count(),
            RansacOutcome::Failed { .. } => 0,
        }
    }
}

/// Reprojection error in pixels, or `None` when the point is behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, c: &Correspondence) -> Option<f64> {
    let p = pose.transform(&c.world);
    if p.z <= Z_MIN {
        return None;
    }
    let du = k.fx * p.x / p.z + k.cx - c.pixel.x;
    let dv = k.fy * p.y / p.z + k.cy - c.pixel.y;
    Some((du * du + dv * dv).sqrt())
}

fn inlier_mask(pose: &Pose, k: &Intrinsics, corrs: &[Correspondence], tol: f64) -> Vec<bool> {
    corrs
        .iter()
        .map(|c| reprojection_error(pose, k, c).is_some_and(|e| e <= tol))
        .collect()
}

fn subset(corrs: &[Correspondence], mask: &[bool]) -> Vec<Correspondence> {
    corrs
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| *c)
        .collect()
}

/// Robust pose from correspondences that may contain outliers.
///
/// Trials run in order; a hypothesis replaces the incumbent only with a
/// strictly larger consensus, so ties go to the earliest trial. The winner is
/// refit on its inliers and the returned mask is recomputed under the
/// returned pose.
pub fn ransac_pnp(
    corrs: &[Correspondence],
    k: &Intrinsics,
    opts: &RansacOptions,
) -> Result<RansacOutcome, GeometryError> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(GeometryError::TooFew {
            what: "correspondences",
            needed: MIN_CORRESPONDENCES,
            got: corrs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let hyp_opts = PnpOptions {
        max_iterations: opts.hypothesis_refine_iters,
        ..PnpOptions::default()
    };
    let mut best: Option<(Pose, usize)> = None;
    for _ in 0..opts.max_iters {
        let idx = sample(&mut rng, corrs.len(), MIN_CORRESPONDENCES);
        let minimal: Vec<Correspondence> = idx.iter().map(|i| corrs[i]).collect();
        let Ok(init) = pnp_dlt(&minimal, k) else {
            continue;
        };
        let pose = refine_pose(init, &minimal, k, &hyp_opts);
        let count = inlier_mask(&pose, k, corrs, opts.inlier_tol)
            .iter()
            .filter(|b| **b)
            .count();
        if best.as_ref().is_none_or(|(_, c)| count > *c) {
            best = Some((pose, count));
        }
    }
    let Some((mut pose, mut count)) = best else {
        return Ok(RansacOutcome::Failed { best_inliers: 0 });
    };
    if count < MIN_CORRESPONDENCES {
        return Ok(RansacOutcome::Failed { best_inliers: count });
    }

    let mut mask = inlier_mask(&pose, k, corrs, opts.inlier_tol);
    for _ in 0..4 {
        let Ok(refit) = pnp_solve(&subset(corrs, &mask), k, &PnpOptions::default()) else {
            break;
        };
        let refit_mask = inlier_mask(&refit, k, corrs, opts.inlier_tol);
        let refit_count = refit_mask.iter().filter(|b| **b).count();
        if refit_count < count {
            break;
        }
        let stable = refit_mask == mask;
        pose = refit;
        mask = refit_mask;
        count = refit_count;
        if stable {
            break;
        }
    }
    Ok(RansacOutcome::Localized {
        pose,
        inliers: mask,
    })
}
