//! Losses, voxel-sampling epochs, the two-stage train/prune/fine-tune
//! schedule and codes-only scene adaptation.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use neumap_diff::{
    halving_lr, DiffError, Graph, OptimKind, Optimizer, ParamId, ParamStore, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    decode_features, encode, BankVars, BlockCodes, DecoderDims, DecoderParams, DecoderVars,
};
use crate::error::{Error, Result};
use crate::scene::{PruneReport, SceneRepresentation, VoxelId};
use crate::synthworld::{stream_rng, ReferenceDataset, View};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-7;

const AGNOSTIC: usize = 0;
const CODES: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_x: f64,
    pub lambda_c: f64,
    pub lambda_l1: f64,
    pub lr_agnostic: f64,
    pub lr_codes: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_adapt: usize,
    /// Voxels per optimizer step.
    pub batch_voxels: usize,
    pub lr_halving_period: usize,
    pub prune_threshold: f64,
    pub seed: u64,
    /// Members a view must observe to cover a voxel.
    pub min_points: usize,
    /// Sweeps over all voxels per epoch.
    pub passes_per_epoch: usize,
    /// Let adaptation train scales (with the L1 term) as well as codes.
    pub adapt_scales: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            lambda_c: 1.0,
            lambda_l1: 1.0,
            lr_agnostic: 0.002,
            lr_codes: 0.002,
            epochs_stage1: 60,
            epochs_stage2: 30,
            epochs_adapt: 60,
            batch_voxels: 1,
            lr_halving_period: 15,
            prune_threshold: 0.00003,
            seed: 0,
            min_points: 20,
            passes_per_epoch: 10,
            adapt_scales: false,
        }
    }
}

impl TrainConfig {
    /// Schedule and rates as published for full-size scenes.
    pub fn full_schedule() -> Self {
        Self {
            lr_codes: 0.0001,
            epochs_stage1: 200,
            epochs_stage2: 100,
            batch_voxels: 8,
            lr_halving_period: 30,
            passes_per_epoch: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_x", self.lambda_x),
            ("lambda_c", self.lambda_c),
            ("lambda_l1", self.lambda_l1),
            ("lr_agnostic", self.lr_agnostic),
            ("lr_codes", self.lr_codes),
            ("prune_threshold", self.prune_threshold),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.batch_voxels < 1 || self.lr_halving_period < 1 || self.passes_per_epoch < 1 {
            return Err(Error::Config(
                "batch_voxels, lr_halving_period and passes_per_epoch must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over in-voxel keypoints of `|local + origin - target|`; zero when no
/// keypoint is in the voxel.
pub fn coordinate_loss(
    g: &mut Graph,
    local: Var,
    origin: &Vector3<f64>,
    targets: &Tensor,
    indicators: &[f64],
) -> Result<Var> {
    let count: f64 = indicators.iter().sum();
    if count == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0))?);
    }
    let o = g.constant(Tensor::row_vector(&[origin.x, origin.y, origin.z]))?;
    let world = g.add_row(local, o)?;
    let t = g.constant(targets.clone())?;
    let diff = g.sub(world, t)?;
    let dist = g.row_norm(diff)?;
    let w: Vec<f64> = indicators.iter().map(|y| y / count).collect();
    Ok(g.dot_const(dist, Tensor::column_vector(&w))?)
}

/// Mean binary cross-entropy over all keypoints.
pub fn confidence_loss(g: &mut Graph, confidence: Var, indicators: &[f64]) -> Result<Var> {
    let k = indicators.len() as f64;
    if indicators.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0))?);
    }
    let c = g.clamp(confidence, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_c = g.ln(c)?;
    let neg = g.mul_scalar(c, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let log_1c = g.ln(one_minus)?;
    let pos: Vec<f64> = indicators.iter().map(|y| -y / k).collect();
    let negw: Vec<f64> = indicators.iter().map(|y| -(1.0 - y) / k).collect();
    let a = g.dot_const(log_c, Tensor::column_vector(&pos))?;
    let b = g.dot_const(log_1c, Tensor::column_vector(&negw))?;
    Ok(g.add(a, b)?)
}

/// Sum of |w| over the given scale vectors divided by `num_voxels`.
pub fn sparsity_loss(g: &mut Graph, scales: &[Var], num_voxels: usize) -> Result<Var> {
    let mut total: Option<Var> = None;
    for s in scales {
        let a = g.abs(*s)?;
        let sum = g.sum(a)?;
        total = Some(match total {
            Some(t) => g.add(t, sum)?,
            None => sum,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    Ok(g.mul_scalar(total, 1.0 / num_voxels.max(1) as f64)?)
}

/// Values of the three loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub coord: f64,
    pub conf: f64,
    pub sparsity: f64,
}

impl LossTerms {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.lambda_x * self.coord + cfg.lambda_c * self.conf + cfg.lambda_l1 * self.sparsity
    }
}

/// One training sample: a voxel and one of its covering views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub voxel: VoxelId,
    pub view: usize,
}

/// A seeded permutation of all voxels chunked into batches of at most
/// `batch_voxels`, each voxel paired with a uniformly drawn covering view.
pub fn sample_epoch(
    scene: &SceneRepresentation,
    batch_voxels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Sample>>> {
    if batch_voxels == 0 {
        return Err(Error::Config("batch_voxels must be >= 1".into()));
    }
    scene.require_coverage()?;
    let mut ids: Vec<VoxelId> = scene.voxels.keys().copied().collect();
    ids.shuffle(rng);
    let samples: Vec<Sample> = ids
        .into_iter()
        .map(|id| {
            let views: Vec<usize> = scene.voxels[&id].covering_views.iter().copied().collect();
            Sample {
                voxel: id,
                view: views[rng.random_range(0..views.len())],
            }
        })
        .collect();
    Ok(samples.chunks(batch_voxels).map(|c| c.to_vec()).collect())
}

/// Supervision for one (voxel, view) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    /// Triangulated coordinate per keypoint (zero rows where unknown).
    pub targets: Tensor,
    /// 1.0 when the keypoint's valid triangulated point belongs to the voxel.
    pub indicators: Vec<f64>,
}

/// Maps every valid member point to its voxel.
pub fn membership(scene: &SceneRepresentation) -> BTreeMap<u32, VoxelId> {
    let mut m = BTreeMap::new();
    for v in scene.voxels.values() {
        for id in &v.members {
            m.insert(*id, v.id);
        }
    }
    m
}

pub fn supervision(
    view: &View,
    voxel: VoxelId,
    dataset: &ReferenceDataset,
    members: &BTreeMap<u32, VoxelId>,
) -> Supervision {
    let k = view.keypoints.len();
    let mut targets = Tensor::zeros(k, 3);
    let mut indicators = vec![0.0; k];
    for (i, pid) in view.keypoints.point_ids.iter().enumerate() {
        let Some(p) = dataset.point(*pid).filter(|p| p.valid) else {
            continue;
        };
        if members.get(pid) == Some(&voxel) {
            indicators[i] = 1.0;
            targets.row_mut(i).copy_from_slice(p.position.as_slice());
        }
    }
    Supervision {
        targets,
        indicators,
    }
}

/// Per-epoch record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: LossTerms,
    pub total: f64,
    pub lr_agnostic: f64,
    pub lr_codes: f64,
    pub retained_codes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Finetune,
    Adapt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Adapt => "adapt",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Train => 100,
            Stage::Finetune => 101,
            Stage::Adapt => 102,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn extend(&mut self, other: TrainingLog) {
        self.epochs.extend(other.epochs);
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("epoch,stage,L_x,L_c,L_L1,total,lr_agnostic,lr_codes,retained_codes\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.stage.name(),
                e.loss.coord,
                e.loss.conf,
                e.loss.sparsity,
                e.total,
                e.lr_agnostic,
                e.lr_codes,
                e.retained_codes
            ));
        }
        s
    }
}

/// Decoder and scene tensors registered in a parameter store.
pub struct Model {
    pub dims: DecoderDims,
    pub store: ParamStore,
    pub decoder: Vec<ParamId>,
    /// Per voxel and block: (codes, scales).
    pub banks: BTreeMap<VoxelId, Vec<(ParamId, ParamId)>>,
}

impl Model {
    pub fn new(params: &DecoderParams, scene: &SceneRepresentation) -> Result<Self> {
        params.dims.check_bank(scene.dims)?;
        let mut store = ParamStore::new();
        let decoder = params
            .names()
            .into_iter()
            .zip(&params.tensors)
            .map(|(n, t)| store.add(n, t.clone(), AGNOSTIC))
            .collect();
        let banks = scene
            .voxels
            .values()
            .map(|v| {
                let ids = (0..scene.dims.blocks)
                    .map(|t| {
                        let c = store.add(format!("{}.codes{t}", v.id), v.bank.codes[t].clone(), CODES);
                        let s = store.add(format!("{}.scales{t}", v.id), v.bank.scales[t].clone(), CODES);
                        (c, s)
                    })
                    .collect();
                (v.id, ids)
            })
            .collect();
        Ok(Self {
            dims: params.dims,
            store,
            decoder,
            banks,
        })
    }

    pub fn freeze_decoder(&mut self) {
        self.store.freeze_group(AGNOSTIC);
    }

    pub fn freeze_scales(&mut self) {
        for blocks in self.banks.values() {
            for (_, s) in blocks {
                self.store.set_frozen(*s, true);
            }
        }
    }

    pub fn write_back(&self, params: &mut DecoderParams, scene: &mut SceneRepresentation) {
        for (t, id) in params.tensors.iter_mut().zip(&self.decoder) {
            *t = self.store.get(*id).value().clone();
        }
        for (vid, blocks) in &self.banks {
            let v = scene.voxels.get_mut(vid).unwrap();
            for (t, (c, s)) in blocks.iter().enumerate() {
                v.bank.codes[t] = self.store.get(*c).value().clone();
                v.bank.scales[t] = self.store.get(*s).value().clone();
            }
        }
    }

    pub fn decoder_vars(&self, g: &mut Graph) -> Result<DecoderVars> {
        let vars = self
            .decoder
            .iter()
            .map(|id| g.param(&self.store, *id))
            .collect::<neumap_diff::Result<Vec<_>>>()?;
        DecoderVars::from_vars(self.dims, vars)
    }

    fn bank_vars(&self, g: &mut Graph, scene: &SceneRepresentation, voxel: VoxelId) -> Result<(BankVars, Vec<Var>)> {
        let bank = &scene.voxels[&voxel].bank;
        let mut out = Vec::with_capacity(bank.dims.blocks);
        let mut scales = Vec::with_capacity(bank.dims.blocks);
        for (t, (c, s)) in self.banks[&voxel].iter().enumerate() {
            let keep = bank.retained(t);
            let cv = g.param(&self.store, *c)?;
            let sv = g.param(&self.store, *s)?;
            scales.push(sv);
            if keep.is_empty() {
                out.push(None);
            } else if keep.len() == bank.dims.codes {
                out.push(Some(BlockCodes { codes: cv, scales: sv }));
            } else {
                out.push(Some(BlockCodes {
                    codes: g.gather_rows(cv, &keep)?,
                    scales: g.gather_rows(sv, &keep)?,
                }));
            }
        }
        Ok((out, scales))
    }
}

/// Everything needed to run a stage.
struct StageRun<'a> {
    cfg: &'a TrainConfig,
    dataset: &'a ReferenceDataset,
    stage: Stage,
    lambda_l1: f64,
    first_epoch: usize,
    epochs: usize,
    lr_agnostic: f64,
    lr_codes: f64,
}

fn numeric(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Diff(d @ (DiffError::NonFinite { .. } | DiffError::NonFiniteGrad { .. })) => {
            Error::NumericAbort {
                epoch,
                batch,
                source: d,
            }
        }
        other => other,
    }
}

/// Forward/backward for one sample, gradients scaled by `weight` and
/// absorbed into the store. Returns the unweighted loss terms.
fn sample_step(
    model: &mut Model,
    scene: &SceneRepresentation,
    dataset: &ReferenceDataset,
    members: &BTreeMap<u32, VoxelId>,
    sample: Sample,
    lambdas: (f64, f64, f64),
    weight: f64,
) -> Result<LossTerms> {
    let view = &dataset.views[sample.view];
    let sup = supervision(view, sample.voxel, dataset, members);
    let voxel = &scene.voxels[&sample.voxel];
    let mut g = Graph::new();
    let dec = model.decoder_vars(&mut g)?;
    let (bank, scales) = model.bank_vars(&mut g, scene, sample.voxel)?;
    let x = g.constant(view.keypoints.descriptors.clone())?;
    let f = encode(&mut g, &dec, x)?;
    let out = decode_features(&mut g, &dec, f, &bank)?;
    let lx = coordinate_loss(&mut g, out.local, &voxel.origin, &sup.targets, &sup.indicators)?;
    let lc = confidence_loss(&mut g, out.confidence, &sup.indicators)?;
    let (wx, wc, wl1) = lambdas;
    let ax = g.mul_scalar(lx, wx * weight)?;
    let ac = g.mul_scalar(lc, wc * weight)?;
    let mut total = g.add(ax, ac)?;
    let mut terms = LossTerms {
        coord: g.value(lx).item(),
        conf: g.value(lc).item(),
        sparsity: 0.0,
    };
    if wl1 > 0.0 {
        let l1 = sparsity_loss(&mut g, &scales, 1)?;
        terms.sparsity = g.value(l1).item();
        let a = g.mul_scalar(l1, wl1 * weight)?;
        total = g.add(total, a)?;
    }
    g.backward(total)?;
    model.store.absorb(&g)?;
    Ok(terms)
}

fn run_stage(model: &mut Model, scene: &SceneRepresentation, run: StageRun) -> Result<TrainingLog> {
    let cfg = run.cfg;
    let members = membership(scene);
    let mut rng = stream_rng(cfg.seed, run.stage.stream(), 0);
    let mut opt = Optimizer::new(OptimKind::default(), vec![run.lr_agnostic, run.lr_codes]);
    let lambdas = (cfg.lambda_x, cfg.lambda_c, run.lambda_l1);
    let mut log = TrainingLog::default();
    for e in 0..run.epochs {
        let epoch = run.first_epoch + e;
        let lr_a = halving_lr(run.lr_agnostic, epoch, cfg.lr_halving_period);
        let lr_c = halving_lr(run.lr_codes, epoch, cfg.lr_halving_period);
        opt.set_lr(AGNOSTIC, lr_a);
        opt.set_lr(CODES, lr_c);
        let mut sum = LossTerms::default();
        let mut n = 0usize;
        let mut batch_index = 0;
        for _ in 0..cfg.passes_per_epoch {
            for batch in sample_epoch(scene, cfg.batch_voxels, &mut rng)? {
                let weight = 1.0 / batch.len() as f64;
                for s in &batch {
                    let t = sample_step(model, scene, run.dataset, &members, *s, lambdas, weight)
                        .map_err(numeric(epoch, batch_index))?;
                    sum.coord += t.coord;
                    sum.conf += t.conf;
                    sum.sparsity += t.sparsity;
                    n += 1;
                }
                opt.step(&mut model.store)
                    .map_err(|e| numeric(epoch, batch_index)(e.into()))?;
                batch_index += 1;
            }
        }
        let n = n.max(1) as f64;
        let loss = LossTerms {
            coord: sum.coord / n,
            conf: sum.conf / n,
            sparsity: sum.sparsity / n,
        };
        log.epochs.push(EpochLog {
            epoch,
            stage: run.stage,
            loss,
            total: cfg.lambda_x * loss.coord + cfg.lambda_c * loss.conf + run.lambda_l1 * loss.sparsity,
            lr_agnostic: lr_a,
            lr_codes: lr_c,
            retained_codes: scene.retained_codes(),
        });
    }
    Ok(log)
}

fn prepare(scene: &SceneRepresentation, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    scene.require_coverage()
}

/// Stage 1: decoder, codes and scales with the L1 term active. Leaves the
/// scene's codes rounded to storage precision.
pub fn train_stage1(
    params: &mut DecoderParams,
    scene: &mut SceneRepresentation,
    dataset: &ReferenceDataset,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    prepare(scene, cfg)?;
    let mut model = Model::new(params, scene)?;
    let log = run_stage(
        &mut model,
        scene,
        StageRun {
            cfg,
            dataset,
            stage: Stage::Train,
            lambda_l1: cfg.lambda_l1,
            first_epoch: 0,
            epochs: cfg.epochs_stage1,
            lr_agnostic: cfg.lr_agnostic,
            lr_codes: cfg.lr_codes,
        },
    )?;
    model.write_back(params, scene);
    scene.round_to_storage();
    Ok(log)
}

/// Prunes at `threshold`, refusing to leave a scene with no codes at all.
pub fn prune_for_finetune(scene: &mut SceneRepresentation, threshold: f64) -> Result<PruneReport> {
    let report = scene.prune(threshold)?;
    if scene.retained_codes() == 0 {
        return Err(Error::Invariant(format!(
            "threshold {threshold} pruned every code; nothing left to fine-tune"
        )));
    }
    Ok(report)
}

/// Stage 2: no L1 term, scales frozen, pruned codes excluded. Epoch numbers
/// (and the learning-rate schedule) continue after stage 1.
pub fn finetune(
    params: &mut DecoderParams,
    scene: &mut SceneRepresentation,
    dataset: &ReferenceDataset,
    cfg: &TrainConfig,
) -> Result<TrainingLog> {
    prepare(scene, cfg)?;
    if scene.retained_codes() == 0 {
        return Err(Error::Invariant("scene has no retained codes".into()));
    }
    let mut model = Model::new(params, scene)?;
    model.freeze_scales();
    let log = run_stage(
        &mut model,
        scene,
        StageRun {
            cfg,
            dataset,
            stage: Stage::Finetune,
            lambda_l1: 0.0,
            first_epoch: cfg.epochs_stage1,
            epochs: cfg.epochs_stage2,
            lr_agnostic: cfg.lr_agnostic,
            lr_codes: cfg.lr_codes,
        },
    )?;
    model.write_back(params, scene);
    scene.round_to_storage();
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingOutcome {
    pub log: TrainingLog,
    pub prune: PruneReport,
}

/// Stage 1, prune at `cfg.prune_threshold`, stage 2.
pub fn run_training(
    params: &mut DecoderParams,
    scene: &mut SceneRepresentation,
    dataset: &ReferenceDataset,
    cfg: &TrainConfig,
) -> Result<TrainingOutcome> {
    let mut log = train_stage1(params, scene, dataset, cfg)?;
    let prune = prune_for_finetune(scene, cfg.prune_threshold)?;
    log.extend(finetune(params, scene, dataset, cfg)?);
    Ok(TrainingOutcome { log, prune })
}

/// Fits a new scene's codes against a frozen decoder. Scales train too
/// (with the L1 term) only when `cfg.adapt_scales` is set.
pub fn adapt_scene(
    params: &DecoderParams,
    mut scene: SceneRepresentation,
    dataset: &ReferenceDataset,
    cfg: &TrainConfig,
) -> Result<(SceneRepresentation, TrainingLog)> {
    prepare(&scene, cfg)?;
    let mut model = Model::new(params, &scene)?;
    model.freeze_decoder();
    if !cfg.adapt_scales {
        model.freeze_scales();
    }
    let log = run_stage(
        &mut model,
        &scene,
        StageRun {
            cfg,
            dataset,
            stage: Stage::Adapt,
            lambda_l1: if cfg.adapt_scales { cfg.lambda_l1 } else { 0.0 },
            first_epoch: 0,
            epochs: cfg.epochs_adapt,
            lr_agnostic: 0.0,
            lr_codes: cfg.lr_codes,
        },
    )?;
    let mut unused = params.clone();
    model.write_back(&mut unused, &mut scene);
    scene.round_to_storage();
    Ok((scene, log))
}

/// Smallest threshold that keeps at most `fraction` of all codes.
pub fn threshold_for_retention(scene: &SceneRepresentation, fraction: f64) -> f64 {
    let mut mags: Vec<f64> = scene
        .voxels
        .values()
        .flat_map(|v| v.bank.scales.iter().flat_map(|s| s.data().iter().map(|w| w.abs())))
        .collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let keep = ((fraction.clamp(0.0, 1.0) * mags.len() as f64).floor() as usize).min(mags.len());
    if keep == mags.len() {
        return 0.0;
    }
    // strictly above the first dropped magnitude, so ties are dropped too
    f64::from_bits(mags[keep].to_bits() + 1)
}
