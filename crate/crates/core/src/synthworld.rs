//! Procedural multi-view worlds: points in a box, orbiting reference cameras,
//! novel query cameras, noisy keypoints and descriptors, and the triangulated
//! reference dataset built from them.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use neumap_diff::Tensor;
use neumap_geometry::{
    project, triangulate_dlt, Intrinsics, Observation, Point3D, Pose, Projection,
    TriangulationOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::container::{Reader, Writer};

/// Seed of the appearance field. Fixed across worlds so a decoder trained on
/// one world sees the same position-to-appearance law in the next.
pub const APPEARANCE_FIELD_SEED: u64 = 1234;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_points: usize,
    /// Box size per axis, meters; points fill `[0, extent)`.
    pub extent: [f64; 3],
    pub num_ref_views: usize,
    pub num_query_views: usize,
    /// Reference-style views kept out of training.
    pub num_holdout_views: usize,
    /// Pixel noise standard deviation.
    pub pixel_noise: f64,
    pub descriptor_dim: usize,
    /// Expected norm of the per-observation descriptor noise.
    pub descriptor_noise: f64,
    /// Expected norm of the per-view descriptor bias.
    pub illumination_shift: f64,
    /// Share of each descriptor taken by the smooth appearance field; the
    /// rest is a per-point random signature.
    pub field_weight: f64,
    /// Spatial frequency scale of the appearance field, radians per meter.
    pub field_frequency: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Keypoints closer than this to the image border are dropped, pixels.
    pub frustum_margin: f64,
    pub focal: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Horizontal distance of reference cameras from the box center.
    pub orbit_radius: f64,
    pub orbit_jitter: f64,
    pub camera_height: [f64; 2],
    /// Look-at target jitter around the centroid, per axis.
    pub target_jitter: [f64; 3],
    /// Minimum distance between a query center and every reference center.
    pub query_baseline: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_points: 2000,
            extent: [10.0, 10.0, 4.0],
            num_ref_views: 100,
            num_query_views: 20,
            num_holdout_views: 10,
            pixel_noise: 0.5,
            descriptor_dim: 64,
            descriptor_noise: 0.05,
            illumination_shift: 0.03,
            field_weight: 0.9,
            field_frequency: 0.5,
            min_depth: 0.5,
            max_depth: 12.0,
            frustum_margin: 2.0,
            focal: 500.0,
            image_width: 320,
            image_height: 240,
            orbit_radius: 8.0,
            orbit_jitter: 1.0,
            camera_height: [0.5, 4.5],
            target_jitter: [2.5, 2.5, 1.0],
            query_baseline: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad("extent must be positive on every axis");
        }
        if self.num_points == 0 || self.num_ref_views == 0 || self.num_query_views == 0 {
            return bad("num_points, num_ref_views and num_query_views must be >= 1");
        }
        if self.descriptor_dim < 4 {
            return bad("descriptor_dim must be >= 4");
        }
        for (name, v) in [
            ("pixel_noise", self.pixel_noise),
            ("descriptor_noise", self.descriptor_noise),
            ("illumination_shift", self.illumination_shift),
            ("frustum_margin", self.frustum_margin),
            ("query_baseline", self.query_baseline),
            ("orbit_jitter", self.orbit_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.field_weight) {
            return bad("field_weight must lie in [0, 1]");
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return bad("need 0 < min_depth < max_depth");
        }
        if !(self.camera_height[1] >= self.camera_height[0]) {
            return bad("camera_height must be [low, high]");
        }
        if self.orbit_radius <= 0.0 {
            return bad("orbit_radius must be positive");
        }
        self.intrinsics().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn intrinsics(&self) -> std::result::Result<Intrinsics, neumap_geometry::GeometryError> {
        Intrinsics::new(
            self.focal,
            self.focal,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            self.image_width,
            self.image_height,
        )
    }

    pub fn centroid(&self) -> Vector3<f64> {
        Vector3::new(self.extent[0], self.extent[1], self.extent[2]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViewKind {
    Reference,
    Query,
    Holdout,
}

impl ViewKind {
    fn stream(self) -> u64 {
        match self {
            ViewKind::Reference => 2,
            ViewKind::Query => 3,
            ViewKind::Holdout => 4,
        }
    }
}

/// Independent random stream for one (purpose, index) pair.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | index);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Smooth position-dependent appearance: random Fourier features of the
/// position, unit norm.
pub struct AppearanceField {
    directions: Vec<Vector3<f64>>,
    phases: Vec<f64>,
}

impl AppearanceField {
    pub fn new(num_frequencies: usize, frequency: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(APPEARANCE_FIELD_SEED);
        let mut directions = Vec::with_capacity(num_frequencies);
        let mut phases = Vec::with_capacity(num_frequencies);
        for _ in 0..num_frequencies {
            let d = gaussian_vec(&mut rng, 3, frequency);
            directions.push(Vector3::new(d[0], d[1], d[2]));
            phases.push(rng.random_range(0.0..TAU));
        }
        Self { directions, phases }
    }

    pub fn dim(&self) -> usize {
        2 * self.directions.len()
    }

    pub fn eval(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .directions
            .iter()
            .zip(&self.phases)
            .map(|(d, p)| (d.dot(x) + p).sin())
            .collect();
        out.extend(
            self.directions
                .iter()
                .zip(&self.phases)
                .map(|(d, p)| (d.dot(x) + p).cos()),
        );
        normalize(&mut out);
        out
    }
}

/// Ground truth of a generated world.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub intrinsics: Intrinsics,
    pub points: Vec<Vector3<f64>>,
    /// Unit-norm descriptor of every point.
    pub descriptors: Vec<Vec<f64>>,
    pub reference_poses: Vec<Pose>,
    pub query_poses: Vec<Pose>,
    pub holdout_poses: Vec<Pose>,
}

impl World {
    pub fn poses(&self, kind: ViewKind) -> &[Pose] {
        match kind {
            ViewKind::Reference => &self.reference_poses,
            ViewKind::Query => &self.query_poses,
            ViewKind::Holdout => &self.holdout_poses,
        }
    }
}

fn orbit_pose(
    cfg: &WorldConfig,
    rng: &mut ChaCha8Rng,
    angle: f64,
    radius: f64,
) -> Result<Pose> {
    let c = cfg.centroid();
    let height = rng.random_range(cfg.camera_height[0]..=cfg.camera_height[1]);
    let center = Vector3::new(c.x + radius * angle.cos(), c.y + radius * angle.sin(), height);
    let mut target = c;
    for (a, j) in cfg.target_jitter.iter().enumerate() {
        if *j > 0.0 {
            target[a] += rng.random_range(-j..=*j);
        }
    }
    Ok(Pose::look_at(center, target, Vector3::z())?)
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let intrinsics = cfg.intrinsics()?;

    let mut rng = stream_rng(cfg.seed, 0, 0);
    let points: Vec<Vector3<f64>> = (0..cfg.num_points)
        .map(|_| {
            Vector3::new(
                rng.random_range(0.0..cfg.extent[0]),
                rng.random_range(0.0..cfg.extent[1]),
                rng.random_range(0.0..cfg.extent[2]),
            )
        })
        .collect();

    let field = AppearanceField::new(cfg.descriptor_dim / 4, cfg.field_frequency);
    let signature_dim = cfg.descriptor_dim - field.dim();
    let alpha = cfg.field_weight;
    let beta = (1.0 - alpha * alpha).sqrt();
    let mut rng = stream_rng(cfg.seed, 1, 0);
    let descriptors = points
        .iter()
        .map(|p| {
            let mut sig = gaussian_vec(&mut rng, signature_dim, 1.0);
            normalize(&mut sig);
            let mut d: Vec<f64> = field.eval(p).into_iter().map(|v| alpha * v).collect();
            d.extend(sig.into_iter().map(|v| beta * v));
            normalize(&mut d);
            d
        })
        .collect();

    let n_ref = cfg.num_ref_views;
    let reference_poses = (0..n_ref)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, ViewKind::Reference.stream(), i as u64);
            let angle = TAU * i as f64 / n_ref as f64 + rng.random_range(-0.5..=0.5) * TAU / n_ref as f64;
            let radius = cfg.orbit_radius + rng.random_range(-1.0..=1.0) * cfg.orbit_jitter;
            orbit_pose(cfg, &mut rng, angle, radius)
        })
        .collect::<Result<Vec<_>>>()?;

    let holdout_poses = (0..cfg.num_holdout_views)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, ViewKind::Holdout.stream(), i as u64);
            let angle = rng.random_range(0.0..TAU);
            let radius = cfg.orbit_radius + rng.random_range(-1.0..=1.0) * cfg.orbit_jitter;
            orbit_pose(cfg, &mut rng, angle, radius)
        })
        .collect::<Result<Vec<_>>>()?;

    let ref_centers: Vec<Vector3<f64>> = reference_poses.iter().map(|p| p.center()).collect();
    let query_poses = (0..cfg.num_query_views)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, ViewKind::Query.stream(), i as u64);
            // novel viewpoints: wider radius band, rejected near reference centers
            for _ in 0..10_000 {
                let angle = rng.random_range(0.0..TAU);
                let radius = cfg.orbit_radius + rng.random_range(-1.5..=1.5) * cfg.orbit_jitter.max(0.1);
                let pose = orbit_pose(cfg, &mut rng, angle, radius)?;
                let c = pose.center();
                if ref_centers.iter().all(|r| (r - c).norm() >= cfg.query_baseline) {
                    return Ok(pose);
                }
            }
            Err(Error::Config(
                "query_baseline too large for the reference trajectory".into(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(World {
        config: cfg.clone(),
        intrinsics,
        points,
        descriptors,
        reference_poses,
        query_poses,
        holdout_poses,
    })
}

/// Keypoints of one view: pixels, unit-norm raw descriptors (one row each)
/// and the id of the world point each keypoint came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints {
    pub pixels: Vec<Vector2<f64>>,
    pub descriptors: Tensor,
    pub point_ids: Vec<u32>,
}

impl Keypoints {
    pub fn empty(descriptor_dim: usize) -> Self {
        Self {
            pixels: Vec::new(),
            descriptors: Tensor::zeros(0, descriptor_dim),
            point_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Mean raw descriptor, used for retrieval.
    pub fn mean_descriptor(&self) -> Vec<f64> {
        let d = self.descriptors.cols();
        let mut m = vec![0.0; d];
        for r in 0..self.len() {
            for (a, b) in m.iter_mut().zip(self.descriptors.row(r)) {
                *a += b;
            }
        }
        if !self.is_empty() {
            m.iter_mut().for_each(|v| *v /= self.len() as f64);
        }
        m
    }
}

/// Observes every visible world point from view `index` of `kind`.
pub fn observe(world: &World, kind: ViewKind, index: usize) -> Keypoints {
    let cfg = &world.config;
    let pose = &world.poses(kind)[index];
    let k = &world.intrinsics;
    let dim = cfg.descriptor_dim;
    let mut rng = stream_rng(cfg.seed, 10 + kind.stream(), index as u64);
    let per_component = 1.0 / (dim as f64).sqrt();
    let shift = gaussian_vec(&mut rng, dim, cfg.illumination_shift * per_component);

    let mut pixels = Vec::new();
    let mut point_ids = Vec::new();
    let mut data = Vec::new();
    for (id, x) in world.points.iter().enumerate() {
        let depth = pose.transform(x).z;
        if depth < cfg.min_depth || depth > cfg.max_depth {
            continue;
        }
        let Projection::Pixel(px) = project(pose, k, x) else {
            continue;
        };
        if !k.contains(&px, cfg.frustum_margin) {
            continue;
        }
        let noise = gaussian_vec(&mut rng, 2, cfg.pixel_noise);
        let px = px + Vector2::new(noise[0], noise[1]);
        let dn = gaussian_vec(&mut rng, dim, cfg.descriptor_noise * per_component);
        let mut d: Vec<f64> = world.descriptors[id]
            .iter()
            .zip(dn.iter().zip(&shift))
            .map(|(g, (n, s))| g + n + s)
            .collect();
        normalize(&mut d);
        pixels.push(px);
        point_ids.push(id as u32);
        data.extend(d);
    }
    let rows = pixels.len();
    Keypoints {
        pixels,
        descriptors: Tensor::from_vec(rows, dim, data).expect("row-major descriptor block"),
        point_ids,
    }
}

/// A posed view with its keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub id: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub keypoints: Keypoints,
}

/// A query: intrinsics and keypoints only. Its pose lives in [`GroundTruth`].
#[derive(Clone, Debug, PartialEq)]
pub struct QueryView {
    pub id: usize,
    pub intrinsics: Intrinsics,
    pub keypoints: Keypoints,
}

/// Training-facing data: posed reference views and triangulated points
/// indexed by point id.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDataset {
    pub descriptor_dim: usize,
    pub views: Vec<View>,
    pub points: Vec<Point3D>,
}

impl ReferenceDataset {
    pub fn num_valid_points(&self) -> usize {
        self.points.iter().filter(|p| p.valid).count()
    }

    pub fn point(&self, id: u32) -> Option<&Point3D> {
        self.points.get(id as usize)
    }
}

/// Evaluation-only truth.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub points: Vec<Vector3<f64>>,
    pub query_poses: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub reference: ReferenceDataset,
    /// Reference-style views excluded from training.
    pub holdout: Vec<View>,
    pub queries: Vec<QueryView>,
    pub truth: GroundTruth,
}

fn posed_views(world: &World, kind: ViewKind) -> Vec<View> {
    world
        .poses(kind)
        .iter()
        .enumerate()
        .map(|(i, pose)| View {
            id: i,
            pose: *pose,
            intrinsics: world.intrinsics,
            keypoints: observe(world, kind, i),
        })
        .collect()
}

/// Tracks points across reference views by shared id and triangulates every
/// track; points seen by fewer than two views are invalid.
pub fn triangulate_tracks(views: &[View], num_points: usize) -> Result<Vec<Point3D>> {
    let mut tracks: BTreeMap<u32, Vec<Observation>> = BTreeMap::new();
    for v in views {
        for (px, id) in v.keypoints.pixels.iter().zip(&v.keypoints.point_ids) {
            tracks.entry(*id).or_default().push(Observation {
                view: v.id,
                pixel: *px,
            });
        }
    }
    let poses: Vec<Pose> = views.iter().map(|v| v.pose).collect();
    let ks: Vec<Intrinsics> = views.iter().map(|v| v.intrinsics).collect();
    let opts = TriangulationOptions::default();
    (0..num_points as u32)
        .map(|id| match tracks.get(&id) {
            Some(obs) if obs.len() >= 2 => Ok(triangulate_dlt(id, obs, &poses, &ks, &opts)?),
            _ => Ok(Point3D::invalid(id)),
        })
        .collect()
}

pub fn build_dataset(world: &World) -> Result<Dataset> {
    let views = posed_views(world, ViewKind::Reference);
    let points = triangulate_tracks(&views, world.points.len())?;
    let queries = posed_views(world, ViewKind::Query)
        .into_iter()
        .map(|v| QueryView {
            id: v.id,
            intrinsics: v.intrinsics,
            keypoints: v.keypoints,
        })
        .collect();
    Ok(Dataset {
        config: world.config.clone(),
        reference: ReferenceDataset {
            descriptor_dim: world.config.descriptor_dim,
            views,
            points,
        },
        holdout: posed_views(world, ViewKind::Holdout),
        queries,
        truth: GroundTruth {
            points: world.points.clone(),
            query_poses: world.query_poses.clone(),
        },
    })
}

/// `generate_world` followed by `build_dataset`.
pub fn generate_dataset(cfg: &WorldConfig) -> Result<Dataset> {
    build_dataset(&generate_world(cfg)?)
}


pub const DATASET_MAGIC: [u8; 4] = *b"NMDS";
pub const DATASET_FORMAT_VERSION: u32 = 1;

mod io {
    use nalgebra::{Matrix3, Vector2, Vector3};
    use neumap_diff::Tensor;
    use neumap_geometry::{Intrinsics, Point3D, Pose};

    use crate::container::{Reader, Writer};
    use crate::error::FormatError;

    use super::Keypoints;

    pub fn pose(w: &mut Writer, p: &Pose) {
        p.rotation.iter().for_each(|v| w.f64(*v));
        p.translation.iter().for_each(|v| w.f64(*v));
    }

    pub fn read_pose(r: &mut Reader) -> Result<Pose, FormatError> {
        let mut m = [0.0; 9];
        for v in m.iter_mut() {
            *v = r.f64()?;
        }
        let rotation = Matrix3::from_column_slice(&m);
        let translation = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        Ok(Pose::new(rotation, translation))
    }

    pub fn intrinsics(w: &mut Writer, k: &Intrinsics) {
        for v in [k.fx, k.fy, k.cx, k.cy] {
            w.f64(v);
        }
        w.u32(k.width);
        w.u32(k.height);
    }

    pub fn read_intrinsics(r: &mut Reader) -> Result<Intrinsics, FormatError> {
        let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (width, height) = (r.u32()?, r.u32()?);
        Intrinsics::new(fx, fy, cx, cy, width, height).map_err(|e| r.invalid(e.to_string()))
    }

    pub fn keypoints(w: &mut Writer, kp: &Keypoints) {
        w.u32(kp.len() as u32);
        for i in 0..kp.len() {
            w.f64(kp.pixels[i].x);
            w.f64(kp.pixels[i].y);
            w.u32(kp.point_ids[i]);
            kp.descriptors.row(i).iter().for_each(|v| w.f64(*v));
        }
    }

    pub fn read_keypoints(r: &mut Reader, dim: usize) -> Result<Keypoints, FormatError> {
        let n = r.count(20 + 8 * dim)?;
        let mut pixels = Vec::with_capacity(n);
        let mut point_ids = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * dim);
        for _ in 0..n {
            pixels.push(Vector2::new(r.f64()?, r.f64()?));
            point_ids.push(r.u32()?);
            for _ in 0..dim {
                data.push(r.f64()?);
            }
        }
        Ok(Keypoints {
            pixels,
            descriptors: Tensor::from_vec(n, dim, data).expect("sized above"),
            point_ids,
        })
    }

    pub fn point(w: &mut Writer, p: &Point3D) {
        w.u32(p.id);
        w.u8(p.valid as u8);
        p.position.iter().for_each(|v| w.f64(*v));
    }

    pub fn read_point(r: &mut Reader) -> Result<Point3D, FormatError> {
        let id = r.u32()?;
        let valid = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(r.invalid(format!("validity flag {f}"))),
        };
        let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        Ok(Point3D { id, position, valid })
    }
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(&DATASET_MAGIC);
        w.u32(DATASET_FORMAT_VERSION);
        w.str(&serde_json::to_string(&self.config).expect("config serializes"));
        w.u32(self.reference.descriptor_dim as u32);
        w.u32(self.reference.points.len() as u32);
        self.reference.points.iter().for_each(|p| io::point(&mut w, p));
        for views in [&self.reference.views, &self.holdout] {
            w.u32(views.len() as u32);
            for v in views {
                w.u32(v.id as u32);
                io::pose(&mut w, &v.pose);
                io::intrinsics(&mut w, &v.intrinsics);
                io::keypoints(&mut w, &v.keypoints);
            }
        }
        w.u32(self.queries.len() as u32);
        for q in &self.queries {
            w.u32(q.id as u32);
            io::intrinsics(&mut w, &q.intrinsics);
            io::keypoints(&mut w, &q.keypoints);
        }
        w.u32(self.truth.points.len() as u32);
        self.truth.points.iter().for_each(|p| p.iter().for_each(|v| w.f64(*v)));
        w.u32(self.truth.query_poses.len() as u32);
        self.truth.query_poses.iter().for_each(|p| io::pose(&mut w, p));
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, crate::error::FormatError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&DATASET_MAGIC)?;
        r.expect_version(DATASET_FORMAT_VERSION)?;
        let text = r.str()?;
        let config: WorldConfig =
            serde_json::from_str(&text).map_err(|e| r.invalid(format!("config: {e}")))?;
        let dim = r.u32()? as usize;
        if dim != config.descriptor_dim {
            return Err(r.invalid("descriptor width disagrees with config"));
        }
        let n = r.count(29)?;
        let mut points = Vec::with_capacity(n);
        for i in 0..n {
            let p = io::read_point(&mut r)?;
            if p.id as usize != i {
                return Err(r.invalid("points must be stored in id order"));
            }
            points.push(p);
        }
        let mut view_lists = Vec::new();
        for _ in 0..2 {
            let n = r.count(4 + 96 + 40 + 4)?;
            let mut views = Vec::with_capacity(n);
            for i in 0..n {
                let id = r.u32()? as usize;
                if id != i {
                    return Err(r.invalid("views must be stored in id order"));
                }
                views.push(View {
                    id,
                    pose: io::read_pose(&mut r)?,
                    intrinsics: io::read_intrinsics(&mut r)?,
                    keypoints: io::read_keypoints(&mut r, dim)?,
                });
            }
            view_lists.push(views);
        }
        let n = r.count(4 + 40 + 4)?;
        let mut queries = Vec::with_capacity(n);
        for _ in 0..n {
            queries.push(QueryView {
                id: r.u32()? as usize,
                intrinsics: io::read_intrinsics(&mut r)?,
                keypoints: io::read_keypoints(&mut r, dim)?,
            });
        }
        let n = r.count(24)?;
        let mut truth_points = Vec::with_capacity(n);
        for _ in 0..n {
            truth_points.push(Vector3::new(r.f64()?, r.f64()?, r.f64()?));
        }
        let n = r.count(96)?;
        let mut query_poses = Vec::with_capacity(n);
        for _ in 0..n {
            query_poses.push(io::read_pose(&mut r)?);
        }
        if query_poses.len() != queries.len() {
            return Err(r.invalid("query pose count disagrees with query count"));
        }
        r.finish()?;
        let holdout = view_lists.pop().unwrap();
        let views = view_lists.pop().unwrap();
        Ok(Self {
            config,
            reference: ReferenceDataset {
                descriptor_dim: dim,
                views,
                points,
            },
            holdout,
            queries,
            truth: GroundTruth {
                points: truth_points,
                query_poses,
            },
        })
    }

    /// Human-readable summary written next to the binary container.
    pub fn manifest(&self) -> serde_json::Value {
        let kp = |views: &[View]| views.iter().map(|v| v.keypoints.len()).sum::<usize>();
        serde_json::json!({
            "format": "NMDS",
            "version": DATASET_FORMAT_VERSION,
            "seed": self.config.seed,
            "points": self.reference.points.len(),
            "valid_points": self.reference.num_valid_points(),
            "reference_views": self.reference.views.len(),
            "holdout_views": self.holdout.len(),
            "query_views": self.queries.len(),
            "reference_keypoints": kp(&self.reference.views),
            "holdout_keypoints": kp(&self.holdout),
            "query_keypoints": self.queries.iter().map(|q| q.keypoints.len()).sum::<usize>(),
            "config": self.config,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }

    /// Query keypoints paired with their intrinsics, in query order.
    pub fn query_inputs(&self) -> Vec<(Keypoints, Intrinsics)> {
        self.queries
            .iter()
            .map(|q| (q.keypoints.clone(), q.intrinsics))
            .collect()
    }
}
