//! Sparse voxel scene: per-voxel code banks with scaling factors, coverage
//! bookkeeping, pruning, size accounting and the `NMAP` file format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use neumap_diff::Tensor;
use neumap_geometry::Point3D;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::synthworld::ReferenceDataset;

pub const SCENE_MAGIC: [u8; 4] = *b"NMAP";
pub const SCENE_FORMAT_VERSION: u32 = 1;
/// magic, version, side length, (T, N, D), voxel count.
pub const FILE_HEADER_BYTES: usize = 4 + 4 + 8 + 3 * 4 + 4;
/// Voxel id (3 x i32) and origin (3 x f64).
pub const VOXEL_ID_ORIGIN_BYTES: usize = 3 * 4 + 3 * 8;
/// Standard deviation of freshly initialized codes.
pub const CODE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelId {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelId {
    pub fn new(ix: i32, iy: i32, iz: i32) -> Self {
        Self { ix, iy, iz }
    }

    /// Cell containing `p`; cells are half-open `[i l, (i+1) l)`.
    pub fn containing(p: &Vector3<f64>, l: f64) -> Self {
        let f = |v: f64| (v / l).floor() as i32;
        Self::new(f(p.x), f(p.y), f(p.z))
    }

    pub fn contains(&self, p: &Vector3<f64>, l: f64) -> bool {
        Self::containing(p, l) == *self
    }
}

impl fmt::Display for VoxelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.ix, self.iy, self.iz)
    }
}

impl std::str::FromStr for VoxelId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let parse = |p: &str| p.trim().parse::<i32>().map_err(|e| format!("voxel id {s:?}: {e}"));
        match parts.as_slice() {
            [a, b, c] => Ok(Self::new(parse(a)?, parse(b)?, parse(c)?)),
            _ => Err(format!("voxel id {s:?}: expected ix:iy:iz")),
        }
    }
}

/// Bank shape: `blocks` (T) x `codes` (N) codes of width `dim` (D).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankDims {
    pub blocks: usize,
    pub codes: usize,
    pub dim: usize,
}

impl BankDims {
    pub fn new(blocks: usize, codes: usize, dim: usize) -> Result<Self> {
        let d = Self { blocks, codes, dim };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.codes < 1 || self.dim < 2 {
            return Err(Error::Config(format!(
                "bank dims need T >= 1, N >= 1, D >= 2; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn total_codes(&self) -> usize {
        self.blocks * self.codes
    }
}

impl Default for BankDims {
    fn default() -> Self {
        Self {
            blocks: 6,
            codes: 16,
            dim: 32,
        }
    }
}

/// Codes, per-code scales and prune flags of one voxel.
///
/// `codes[t]` is N x D and `scales[t]` is N x 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeBank {
    pub dims: BankDims,
    pub codes: Vec<Tensor>,
    pub scales: Vec<Tensor>,
    pub pruned: Vec<Vec<bool>>,
}

impl CodeBank {
    /// Unit scales, codes drawn from N(0, `std`^2).
    pub fn random(dims: BankDims, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let codes = (0..dims.blocks)
            .map(|_| {
                let data = (0..dims.codes * dims.dim).map(|_| normal.sample(rng)).collect();
                Tensor::from_vec(dims.codes, dims.dim, data).expect("bank shape")
            })
            .collect();
        Self {
            dims,
            codes,
            scales: vec![Tensor::full(dims.codes, 1, 1.0); dims.blocks],
            pruned: vec![vec![false; dims.codes]; dims.blocks],
        }
    }

    /// Indices of unpruned codes in block `t`, ascending.
    pub fn retained(&self, t: usize) -> Vec<usize> {
        (0..self.dims.codes).filter(|j| !self.pruned[t][*j]).collect()
    }

    pub fn num_retained(&self) -> usize {
        self.pruned.iter().flatten().filter(|p| !**p).count()
    }

    pub fn scale(&self, t: usize, j: usize) -> f64 {
        self.scales[t].get(j, 0)
    }

    /// Marks code `j` of block `t` pruned: scale and stored values become 0.
    pub fn prune_code(&mut self, t: usize, j: usize) {
        self.pruned[t][j] = true;
        self.scales[t].set(j, 0, 0.0);
        self.codes[t].row_mut(j).fill(0.0);
    }

    /// Rounds every code and scale to the nearest 32-bit float.
    pub fn round_to_storage(&mut self) {
        for t in self.codes.iter_mut().chain(self.scales.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub id: VoxelId,
    /// Mean of the member positions.
    pub origin: Vector3<f64>,
    pub members: BTreeSet<u32>,
    pub bank: CodeBank,
    pub covering_views: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRepresentation {
    pub side_length: f64,
    pub dims: BankDims,
    pub voxels: BTreeMap<VoxelId, Voxel>,
}

/// Partitions valid points into half-open cells of side `l`; empty cells are
/// absent.
pub fn voxelize(points: &[Point3D], l: f64) -> Result<BTreeMap<VoxelId, BTreeSet<u32>>> {
    if !(l.is_finite() && l > 0.0) {
        return Err(Error::Config(format!("voxel side length must be > 0, got {l}")));
    }
    let mut out: BTreeMap<VoxelId, BTreeSet<u32>> = BTreeMap::new();
    for p in points.iter().filter(|p| p.valid) {
        out.entry(VoxelId::containing(&p.position, l))
            .or_default()
            .insert(p.id);
    }
    Ok(out)
}

/// Per-(voxel, block) retained counts and total bytes around a prune.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub rows: Vec<PruneRow>,
    pub bytes_before: usize,
    pub bytes_after: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneRow {
    pub voxel: VoxelId,
    pub block: usize,
    pub retained: usize,
    pub total: usize,
}

impl PruneReport {
    pub fn retained(&self) -> usize {
        self.rows.iter().map(|r| r.retained).sum()
    }

    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.total).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("voxel_id,block,retained,total\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.voxel, r.block, r.retained, r.total));
        }
        s
    }
}

fn point_position(points: &[Point3D], id: u32) -> Result<Vector3<f64>> {
    match points.get(id as usize) {
        Some(p) if p.valid && p.id == id => Ok(p.position),
        _ => Err(Error::Invariant(format!("member {id} is not a valid point"))),
    }
}

impl SceneRepresentation {
    /// Voxelizes the valid points and gives every voxel a fresh bank.
    ///
    /// `points` must be indexed by point id. Coverage is left empty.
    pub fn build(points: &[Point3D], side_length: f64, dims: BankDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let cells = voxelize(points, side_length)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let voxels = cells
            .into_iter()
            .map(|(id, members)| {
                let v = Voxel {
                    id,
                    origin: Vector3::zeros(),
                    members,
                    bank: CodeBank::random(dims, CODE_INIT_STD, &mut rng),
                    covering_views: BTreeSet::new(),
                };
                (id, v)
            })
            .collect();
        let mut scene = Self {
            side_length,
            dims,
            voxels,
        };
        scene.compute_origins(points)?;
        Ok(scene)
    }

    /// Sets each origin to the mean of its member positions.
    pub fn compute_origins(&mut self, points: &[Point3D]) -> Result<()> {
        for v in self.voxels.values_mut() {
            if v.members.is_empty() {
                return Err(Error::Invariant(format!("voxel {} has no members", v.id)));
            }
            let mut sum = Vector3::zeros();
            for id in &v.members {
                sum += point_position(points, *id)?;
            }
            v.origin = sum / v.members.len() as f64;
        }
        Ok(())
    }

    /// A view covers a voxel when it observes at least `min_points` of the
    /// voxel's valid members.
    pub fn assign_coverage(&mut self, dataset: &ReferenceDataset, min_points: usize) {
        let mut owner: BTreeMap<u32, VoxelId> = BTreeMap::new();
        for v in self.voxels.values_mut() {
            v.covering_views.clear();
            for id in &v.members {
                owner.insert(*id, v.id);
            }
        }
        for view in &dataset.views {
            let mut counts: BTreeMap<VoxelId, BTreeSet<u32>> = BTreeMap::new();
            for pid in &view.keypoints.point_ids {
                let valid = dataset.point(*pid).is_some_and(|p| p.valid);
                if let (true, Some(vid)) = (valid, owner.get(pid)) {
                    counts.entry(*vid).or_default().insert(*pid);
                }
            }
            for (vid, seen) in counts {
                if seen.len() >= min_points {
                    self.voxels.get_mut(&vid).unwrap().covering_views.insert(view.id);
                }
            }
        }
    }

    /// Voxels without a covering view.
    pub fn uncovered(&self) -> Vec<VoxelId> {
        self.voxels
            .values()
            .filter(|v| v.covering_views.is_empty())
            .map(|v| v.id)
            .collect()
    }

    /// Removes voxels no view covers and returns their ids. Their member
    /// points stay in the dataset but belong to no voxel.
    pub fn drop_uncovered(&mut self) -> Vec<VoxelId> {
        let gone = self.uncovered();
        for id in &gone {
            self.voxels.remove(id);
        }
        gone
    }

    pub fn require_coverage(&self) -> Result<()> {
        let missing = self.uncovered();
        if missing.is_empty() {
            Ok(())
        } else {
            let ids: Vec<String> = missing.iter().map(|v| v.to_string()).collect();
            Err(Error::Invariant(format!(
                "voxels without covering views: {}",
                ids.join(", ")
            )))
        }
    }

    pub fn voxel(&self, id: VoxelId) -> Result<&Voxel> {
        self.voxels
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no voxel {id} in scene")))
    }

    pub fn total_codes(&self) -> usize {
        self.voxels.len() * self.dims.total_codes()
    }

    pub fn retained_codes(&self) -> usize {
        self.voxels.values().map(|v| v.bank.num_retained()).sum()
    }

    /// Zeroes every code whose |scale| is below `threshold`.
    pub fn prune(&mut self, threshold: f64) -> Result<PruneReport> {
        if !(threshold >= 0.0) {
            return Err(Error::Config(format!("prune threshold must be >= 0, got {threshold}")));
        }
        let bytes_before = self.size_bytes(4);
        let mut rows = Vec::new();
        for v in self.voxels.values_mut() {
            for t in 0..self.dims.blocks {
                for j in 0..self.dims.codes {
                    if !v.bank.pruned[t][j] && v.bank.scale(t, j).abs() < threshold {
                        v.bank.prune_code(t, j);
                    }
                }
                rows.push(PruneRow {
                    voxel: v.id,
                    block: t,
                    retained: v.bank.retained(t).len(),
                    total: self.dims.codes,
                });
            }
        }
        Ok(PruneReport {
            rows,
            bytes_before,
            bytes_after: self.size_bytes(4),
        })
    }

    /// Fixed per-voxel header: id, origin, and one prune flag plus one scale
    /// per code.
    pub fn voxel_header_bytes(dims: BankDims, scalar_width: usize) -> usize {
        VOXEL_ID_ORIGIN_BYTES + dims.total_codes() * (1 + scalar_width)
    }

    /// Retained code values only.
    pub fn payload_bytes(&self, scalar_width: usize) -> usize {
        self.retained_codes() * self.dims.dim * scalar_width
    }

    /// Map size: code payload plus the fixed per-voxel headers.
    pub fn size_bytes(&self, scalar_width: usize) -> usize {
        self.payload_bytes(scalar_width)
            + self.voxels.len() * Self::voxel_header_bytes(self.dims, scalar_width)
    }

    /// Member and coverage lists stored after the voxel records.
    pub fn bookkeeping_bytes(&self) -> usize {
        self.voxels
            .values()
            .map(|v| 8 + 4 * v.members.len() + 4 * v.covering_views.len())
            .sum()
    }

    pub fn round_to_storage(&mut self) {
        for v in self.voxels.values_mut() {
            v.bank.round_to_storage();
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(&SCENE_MAGIC);
        w.u32(SCENE_FORMAT_VERSION);
        w.f64(self.side_length);
        w.u32(self.dims.blocks as u32);
        w.u32(self.dims.codes as u32);
        w.u32(self.dims.dim as u32);
        w.u32(self.voxels.len() as u32);
        for v in self.voxels.values() {
            w.i32(v.id.ix);
            w.i32(v.id.iy);
            w.i32(v.id.iz);
            for a in 0..3 {
                w.f64(v.origin[a]);
            }
            for t in 0..self.dims.blocks {
                for j in 0..self.dims.codes {
                    w.u8(v.bank.pruned[t][j] as u8);
                    w.f32(v.bank.scale(t, j) as f32);
                }
            }
            for t in 0..self.dims.blocks {
                for j in v.bank.retained(t) {
                    for x in v.bank.codes[t].row(j) {
                        w.f32(*x as f32);
                    }
                }
            }
        }
        for v in self.voxels.values() {
            w.u32(v.members.len() as u32);
            v.members.iter().for_each(|m| w.u32(*m));
            w.u32(v.covering_views.len() as u32);
            v.covering_views.iter().for_each(|c| w.u32(*c as u32));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&SCENE_MAGIC)?;
        r.expect_version(SCENE_FORMAT_VERSION)?;
        let side_length = r.f64()?;
        if !(side_length.is_finite() && side_length > 0.0) {
            return Err(r.invalid("side length must be positive"));
        }
        let dims = BankDims {
            blocks: r.u32()? as usize,
            codes: r.u32()? as usize,
            dim: r.u32()? as usize,
        };
        if dims.validate().is_err() {
            return Err(r.invalid(format!("bad bank dims {dims:?}")));
        }
        let count = r.count(VOXEL_ID_ORIGIN_BYTES + dims.total_codes() * 5)?;
        let mut order = Vec::with_capacity(count);
        let mut voxels = BTreeMap::new();
        for _ in 0..count {
            let id = VoxelId::new(r.i32()?, r.i32()?, r.i32()?);
            if order.last().is_some_and(|prev| *prev >= id) {
                return Err(r.invalid("voxel ids not strictly increasing"));
            }
            order.push(id);
            let origin = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            if !origin.iter().all(|v| v.is_finite()) {
                return Err(r.invalid("non-finite origin"));
            }
            let mut pruned = vec![vec![false; dims.codes]; dims.blocks];
            let mut scales = vec![Tensor::zeros(dims.codes, 1); dims.blocks];
            for t in 0..dims.blocks {
                for j in 0..dims.codes {
                    pruned[t][j] = match r.u8()? {
                        0 => false,
                        1 => true,
                        f => return Err(r.invalid(format!("prune flag {f}"))),
                    };
                    let s = r.f32()?;
                    if !s.is_finite() || (pruned[t][j] && s != 0.0) {
                        return Err(r.invalid("bad scale"));
                    }
                    scales[t].set(j, 0, s as f64);
                }
            }
            let mut codes = vec![Tensor::zeros(dims.codes, dims.dim); dims.blocks];
            for t in 0..dims.blocks {
                for j in 0..dims.codes {
                    if pruned[t][j] {
                        continue;
                    }
                    for c in 0..dims.dim {
                        let x = r.f32()?;
                        if !x.is_finite() {
                            return Err(r.invalid("non-finite code value"));
                        }
                        codes[t].set(j, c, x as f64);
                    }
                }
            }
            voxels.insert(
                id,
                Voxel {
                    id,
                    origin,
                    members: BTreeSet::new(),
                    bank: CodeBank {
                        dims,
                        codes,
                        scales,
                        pruned,
                    },
                    covering_views: BTreeSet::new(),
                },
            );
        }
        for id in &order {
            let v = voxels.get_mut(id).unwrap();
            let n = r.count(4)?;
            for _ in 0..n {
                if !v.members.insert(r.u32()?) {
                    return Err(r.invalid("duplicate member id"));
                }
            }
            if v.members.is_empty() {
                return Err(r.invalid(format!("voxel {id} has no members")));
            }
            let n = r.count(4)?;
            for _ in 0..n {
                if !v.covering_views.insert(r.u32()? as usize) {
                    return Err(r.invalid("duplicate covering view"));
                }
            }
        }
        r.finish()?;
        Ok(Self {
            side_length,
            dims,
            voxels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}
