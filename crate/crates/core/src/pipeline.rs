//! Query localization (retrieval, voxel activation, decoding, confidence
//! filter, PnP+RANSAC), benchmark evaluation and attention heatmaps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use neumap_diff::Tensor;
use neumap_geometry::{pose_error, ransac_pnp, Correspondence, Intrinsics, Pose, RansacOptions, RansacOutcome, MIN_CORRESPONDENCES};
use serde::{Deserialize, Serialize};

use crate::decoder::{attention_scores, decode, encode_features, AttentionScores, DecoderParams, CONFIDENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::scene::{BankDims, SceneRepresentation, VoxelId};
use crate::synthworld::{Keypoints, ReferenceDataset, View};
use crate::training::{membership, supervision};

/// Accuracy thresholds: (meters, degrees), tightest first.
pub const DEFAULT_THRESHOLDS: [(f64, f64); 3] = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeOptions {
    pub top_k: usize,
    /// Decode every voxel instead of the retrieved ones.
    pub bypass_retrieval: bool,
    pub confidence_threshold: f64,
    pub inlier_tol: f64,
    pub ransac_iters: usize,
    pub ransac_seed: u64,
}

impl Default for LocalizeOptions {
    fn default() -> Self {
        let r = RansacOptions::default();
        Self {
            top_k: 10,
            bypass_retrieval: false,
            confidence_threshold: CONFIDENCE_THRESHOLD,
            inlier_tol: r.inlier_tol,
            ransac_iters: r.max_iters,
            ransac_seed: r.seed,
        }
    }
}

impl LocalizeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.inlier_tol > 0.0) || self.ransac_iters < 1 {
            return Err(Error::Config("need inlier_tol > 0 and ransac_iters >= 1".into()));
        }
        Ok(())
    }

    pub fn ransac(&self) -> RansacOptions {
        RansacOptions {
            inlier_tol: self.inlier_tol,
            max_iters: self.ransac_iters,
            seed: self.ransac_seed,
            ..RansacOptions::default()
        }
    }
}

/// Builds the scene for a reference dataset: voxelize, fresh banks,
/// coverage, then drop voxels that no view covers. Returns the dropped ids.
pub fn build_scene(
    dataset: &ReferenceDataset,
    side_length: f64,
    dims: BankDims,
    min_points: usize,
    seed: u64,
) -> Result<(SceneRepresentation, Vec<VoxelId>)> {
    let mut scene = SceneRepresentation::build(&dataset.points, side_length, dims, seed)?;
    scene.assign_coverage(dataset, min_points);
    let dropped = scene.drop_uncovered();
    if scene.voxels.is_empty() {
        return Err(Error::Invariant("no voxel is covered by any view".into()));
    }
    Ok((scene, dropped))
}

/// Mean raw descriptor of every reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    means: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl RetrievalIndex {
    /// View `i` of `dataset.views` must have id `i`.
    pub fn new(dataset: &ReferenceDataset) -> Self {
        Self {
            means: dataset.views.iter().map(|v| v.keypoints.mean_descriptor()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Cosine similarity of the query's mean descriptor to every view.
    pub fn similarities(&self, query: &Keypoints) -> Vec<f64> {
        let q = query.mean_descriptor();
        self.means.iter().map(|m| cosine(&q, m)).collect()
    }
}

/// Reference views ranked by similarity (ties by ascending id), at most
/// `top_k` of them. Empty for an empty query.
pub fn retrieve_views(query: &Keypoints, index: &RetrievalIndex, top_k: usize) -> Result<Vec<usize>> {
    if top_k < 1 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let sims = index.similarities(query);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|a, b| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b)));
    order.truncate(top_k);
    Ok(order)
}

/// Voxels covered by any of the retrieved views.
pub fn activate_voxels(retrieved: &[usize], scene: &SceneRepresentation) -> BTreeSet<VoxelId> {
    let wanted: BTreeSet<usize> = retrieved.iter().copied().collect();
    scene
        .voxels
        .values()
        .filter(|v| !v.covering_views.is_disjoint(&wanted))
        .map(|v| v.id)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    NoKeypoints,
    NoActiveVoxels,
    TooFewConfident,
    NoConsensus,
}

impl Failure {
    pub fn name(self) -> &'static str {
        match self {
            Failure::NoKeypoints => "no_keypoints",
            Failure::NoActiveVoxels => "no_active_voxels",
            Failure::TooFewConfident => "too_few_confident",
            Failure::NoConsensus => "no_consensus",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub pose: std::result::Result<Pose, Failure>,
    pub num_activated_voxels: usize,
    pub num_candidate_points: usize,
    pub num_confident_points: usize,
    pub num_inliers: usize,
    pub wall_time: Duration,
}

impl LocalizationResult {
    fn failed(f: Failure, start: Instant) -> Self {
        Self {
            pose: Err(f),
            num_activated_voxels: 0,
            num_candidate_points: 0,
            num_confident_points: 0,
            num_inliers: 0,
            wall_time: start.elapsed(),
        }
    }

    /// Same fields apart from wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_time: Duration::ZERO,
            ..self.clone()
        } == Self {
            wall_time: Duration::ZERO,
            ..other.clone()
        }
    }
}

/// Correspondences from every activated voxel with confidence at or above
/// the threshold, in (voxel id, keypoint index) order.
pub fn candidates(
    query: &Keypoints,
    features: &Tensor,
    scene: &SceneRepresentation,
    params: &DecoderParams,
    active: &BTreeSet<VoxelId>,
    threshold: f64,
) -> Result<(usize, Vec<Correspondence>)> {
    let mut total = 0;
    let mut kept = Vec::new();
    for id in active {
        let out = decode(params, features, scene.voxel(*id)?)?;
        total += out.predictions.len();
        for (p, px) in out.predictions.iter().zip(&query.pixels) {
            if p.confidence >= threshold {
                kept.push(Correspondence::new(*px, p.world, p.confidence));
            }
        }
    }
    Ok((total, kept))
}

pub fn localize(
    query: &Keypoints,
    intrinsics: &Intrinsics,
    scene: &SceneRepresentation,
    params: &DecoderParams,
    index: &RetrievalIndex,
    opts: &LocalizeOptions,
) -> Result<LocalizationResult> {
    let start = Instant::now();
    opts.validate()?;
    params.dims.check_bank(scene.dims)?;
    if query.is_empty() {
        return Ok(LocalizationResult::failed(Failure::NoKeypoints, start));
    }
    let active = if opts.bypass_retrieval {
        scene.voxels.keys().copied().collect()
    } else {
        activate_voxels(&retrieve_views(query, index, opts.top_k)?, scene)
    };
    if active.is_empty() {
        return Ok(LocalizationResult::failed(Failure::NoActiveVoxels, start));
    }
    let features = encode_features(params, &query.descriptors)?;
    let (num_candidates, corrs) =
        candidates(query, &features, scene, params, &active, opts.confidence_threshold)?;
    let mut result = LocalizationResult {
        pose: Err(Failure::TooFewConfident),
        num_activated_voxels: active.len(),
        num_candidate_points: num_candidates,
        num_confident_points: corrs.len(),
        num_inliers: 0,
        wall_time: Duration::ZERO,
    };
    if corrs.len() >= MIN_CORRESPONDENCES {
        match ransac_pnp(&corrs, intrinsics, &opts.ransac())? {
            RansacOutcome::Localized { pose, inliers } => {
                result.num_inliers = inliers.iter().filter(|b| **b).count();
                result.pose = Ok(pose);
            }
            RansacOutcome::Failed { .. } => result.pose = Err(Failure::NoConsensus),
        }
    }
    result.wall_time = start.elapsed();
    Ok(result)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryError {
    pub translation: f64,
    pub rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Medians over localized queries; `None` when every query failed.
    pub median_translation: Option<f64>,
    pub median_rotation_deg: Option<f64>,
    /// ((meters, degrees), fraction of all queries within both).
    pub accuracies: Vec<((f64, f64), f64)>,
    pub failures: usize,
    pub map_size_bytes: usize,
    pub per_query: Vec<Option<QueryError>>,
    pub counts: Vec<(usize, usize, usize, usize)>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Failures count against every threshold and are left out of the medians.
pub fn evaluate(
    results: &[LocalizationResult],
    truth: &[Pose],
    thresholds: &[(f64, f64)],
    map_size_bytes: usize,
) -> Result<EvalReport> {
    if results.len() != truth.len() {
        return Err(Error::Length(format!(
            "{} results for {} ground-truth poses",
            results.len(),
            truth.len()
        )));
    }
    let per_query: Vec<Option<QueryError>> = results
        .iter()
        .zip(truth)
        .map(|(r, t)| {
            r.pose.as_ref().ok().map(|p| {
                let (translation, rotation_deg) = pose_error(p, t);
                QueryError {
                    translation,
                    rotation_deg,
                }
            })
        })
        .collect();
    let ok: Vec<&QueryError> = per_query.iter().flatten().collect();
    let n = results.len().max(1) as f64;
    let accuracies = thresholds
        .iter()
        .map(|&(d, a)| {
            let hits = ok.iter().filter(|e| e.translation <= d && e.rotation_deg <= a).count();
            ((d, a), hits as f64 / n)
        })
        .collect();
    Ok(EvalReport {
        median_translation: median(ok.iter().map(|e| e.translation).collect()),
        median_rotation_deg: median(ok.iter().map(|e| e.rotation_deg).collect()),
        accuracies,
        failures: per_query.iter().filter(|e| e.is_none()).count(),
        map_size_bytes,
        counts: results
            .iter()
            .map(|r| {
                (
                    r.num_activated_voxels,
                    r.num_candidate_points,
                    r.num_confident_points,
                    r.num_inliers,
                )
            })
            .collect(),
        per_query,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into())
}

impl EvalReport {
    /// Fraction within the given threshold pair, if it was evaluated.
    pub fn accuracy_at(&self, meters: f64, degrees: f64) -> Option<f64> {
        self.accuracies
            .iter()
            .find(|((d, a), _)| *d == meters && *a == degrees)
            .map(|(_, v)| *v)
    }

    /// One row per query.
    pub fn queries_csv(&self) -> String {
        let mut s = String::from(
            "query,localized,translation_m,rotation_deg,activated_voxels,candidates,confident,inliers\n",
        );
        for (i, (e, c)) in self.per_query.iter().zip(&self.counts).enumerate() {
            let (t, r) = match e {
                Some(e) => (e.translation.to_string(), e.rotation_deg.to_string()),
                None => ("nan".into(), "nan".into()),
            };
            s.push_str(&format!(
                "{i},{},{t},{r},{},{},{},{}\n",
                e.is_some() as u8,
                c.0,
                c.1,
                c.2,
                c.3
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("median_translation_m,{}\n", opt(self.median_translation)));
        s.push_str(&format!("median_rotation_deg,{}\n", opt(self.median_rotation_deg)));
        for ((d, a), v) in &self.accuracies {
            s.push_str(&format!("accuracy@{d}m_{a}deg,{v}\n"));
        }
        s.push_str(&format!("failures,{}\n", self.failures));
        s.push_str(&format!("queries,{}\n", self.per_query.len()));
        s.push_str(&format!("map_size_bytes,{}\n", self.map_size_bytes));
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "queries {}  failures {}  median error {} m / {} deg  map {} bytes\n",
            self.per_query.len(),
            self.failures,
            opt(self.median_translation.map(|v| (v * 1e4).round() / 1e4)),
            opt(self.median_rotation_deg.map(|v| (v * 1e3).round() / 1e3)),
            self.map_size_bytes
        );
        for ((d, a), v) in &self.accuracies {
            s.push_str(&format!("  ({d} m, {a} deg): {:.1}%\n", v * 100.0));
        }
        s
    }
}

/// Localizes every query of a dataset in order.
pub fn localize_all(
    queries: &[(Keypoints, Intrinsics)],
    scene: &SceneRepresentation,
    params: &DecoderParams,
    index: &RetrievalIndex,
    opts: &LocalizeOptions,
) -> Result<Vec<LocalizationResult>> {
    queries
        .iter()
        .map(|(kp, k)| localize(kp, k, scene, params, index, opts))
        .collect()
}

/// Confusion counts of the `c >= threshold` in-voxel classifier over every
/// (keypoint, voxel) pair of `views`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
    pub false_pos: usize,
}

impl Confusion {
    pub fn balanced_accuracy(&self) -> f64 {
        let tpr = self.true_pos as f64 / (self.true_pos + self.false_neg).max(1) as f64;
        let tnr = self.true_neg as f64 / (self.true_neg + self.false_pos).max(1) as f64;
        (tpr + tnr) / 2.0
    }
}

pub fn membership_confusion(
    views: &[View],
    dataset: &ReferenceDataset,
    scene: &SceneRepresentation,
    params: &DecoderParams,
    threshold: f64,
) -> Result<Confusion> {
    let members = membership(scene);
    let mut c = Confusion::default();
    for view in views {
        let features = encode_features(params, &view.keypoints.descriptors)?;
        for v in scene.voxels.values() {
            let sup = supervision(view, v.id, dataset, &members);
            let out = decode(params, &features, v)?;
            for (p, y) in out.predictions.iter().zip(&sup.indicators) {
                match (*y == 1.0, p.confidence >= threshold) {
                    (true, true) => c.true_pos += 1,
                    (true, false) => c.false_neg += 1,
                    (false, false) => c.true_neg += 1,
                    (false, true) => c.false_pos += 1,
                }
            }
        }
    }
    Ok(c)
}

/// Paths written by [`export_heatmap`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: Option<PathBuf>,
}

/// Grid shape `(columns, rows)` when the pixels form a complete lattice.
pub fn lattice_shape(pixels: &[nalgebra::Vector2<f64>]) -> Option<(Vec<f64>, Vec<f64>)> {
    if pixels.is_empty() {
        return None;
    }
    let mut xs: Vec<f64> = pixels.iter().map(|p| p.x).collect();
    let mut ys: Vec<f64> = pixels.iter().map(|p| p.y).collect();
    for v in [&mut xs, &mut ys] {
        v.sort_by(|a, b| a.total_cmp(b));
        v.dedup();
    }
    if xs.len() * ys.len() != pixels.len() {
        return None;
    }
    let cells: BTreeSet<(u64, u64)> = pixels.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
    (cells.len() == pixels.len()).then_some((xs, ys))
}

/// Binary 8-bit PGM of normalized scores laid out on the lattice.
pub fn heatmap_pgm(pixels: &[nalgebra::Vector2<f64>], normalized: &[f64]) -> Option<Vec<u8>> {
    let (xs, ys) = lattice_shape(pixels)?;
    let mut grid = vec![0u8; xs.len() * ys.len()];
    let col: BTreeMap<u64, usize> = xs.iter().enumerate().map(|(i, x)| (x.to_bits(), i)).collect();
    let row: BTreeMap<u64, usize> = ys.iter().enumerate().map(|(i, y)| (y.to_bits(), i)).collect();
    for (p, s) in pixels.iter().zip(normalized) {
        grid[row[&p.y.to_bits()] * xs.len() + col[&p.x.to_bits()]] = (s.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    let mut out = format!("P5\n{} {}\n255\n", xs.len(), ys.len()).into_bytes();
    out.extend(grid);
    Some(out)
}

pub fn heatmap_csv(scores: &AttentionScores) -> String {
    let mut s = String::from("feature,s,s_norm\n");
    for (i, (a, b)) in scores.raw.iter().zip(&scores.normalized).enumerate() {
        s.push_str(&format!("{i},{a},{b}\n"));
    }
    s
}

/// Writes `<prefix>.csv` and, for lattice keypoints, `<prefix>.pgm`.
pub fn export_heatmap(
    view: &Keypoints,
    scene: &SceneRepresentation,
    params: &DecoderParams,
    voxel: VoxelId,
    block: usize,
    code: usize,
    prefix: &Path,
) -> Result<HeatmapFiles> {
    let features = encode_features(params, &view.descriptors)?;
    let scores = attention_scores(params, &features, scene.voxel(voxel)?, block, code)?;
    let csv = prefix.with_extension("csv");
    std::fs::write(&csv, heatmap_csv(&scores))?;
    let pgm = match heatmap_pgm(&view.pixels, &scores.normalized) {
        Some(bytes) => {
            let p = prefix.with_extension("pgm");
            std::fs::write(&p, bytes)?;
            Some(p)
        }
        None => None,
    };
    Ok(HeatmapFiles { csv, pgm })
}
