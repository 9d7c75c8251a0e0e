//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key is listed in [`KEYS`];
//! unknown or repeated keys are errors. Missing keys keep their defaults.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderDims;
use crate::error::{Error, Result};
use crate::pipeline::LocalizeOptions;
use crate::scene::BankDims;
use crate::synthworld::WorldConfig;
use crate::training::TrainConfig;

/// Scene and decoder shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Voxel side length, meters.
    pub side_length: f64,
    pub codes_per_block: usize,
    pub code_dim: usize,
    pub blocks: usize,
    pub encoder_hidden: usize,
    pub block_hidden: usize,
    pub head_hidden: usize,
    /// Seed for decoder weights and fresh codes.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DecoderDims::default();
        Self {
            side_length: 4.0,
            codes_per_block: 16,
            code_dim: d.dim,
            blocks: d.blocks,
            encoder_hidden: d.encoder_hidden,
            block_hidden: d.block_hidden,
            head_hidden: d.head_hidden,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn decoder_dims(&self, raw_dim: usize) -> DecoderDims {
        DecoderDims {
            raw_dim,
            dim: self.code_dim,
            blocks: self.blocks,
            encoder_hidden: self.encoder_hidden,
            block_hidden: self.block_hidden,
            head_hidden: self.head_hidden,
        }
    }

    pub fn bank_dims(&self) -> BankDims {
        BankDims {
            blocks: self.blocks,
            codes: self.codes_per_block,
            dim: self.code_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.side_length.is_finite() && self.side_length > 0.0) {
            return Err(Error::Config("side_length must be > 0".into()));
        }
        self.bank_dims().validate()?;
        self.decoder_dims(1).validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub localize: LocalizeOptions,
}

pub struct KeySpec {
    pub name: &'static str,
    pub doc: &'static str,
    get: fn(&Config) -> String,
    set: fn(&mut Config, &str) -> std::result::Result<(), String>,
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

macro_rules! keys {
    ($( $name:literal => [$($field:tt)+] , $doc:literal ;)*) => {
        pub const KEYS: &[KeySpec] = &[
            $( KeySpec {
                name: $name,
                doc: $doc,
                get: |c| c.$($field)+.to_string(),
                set: |c, v| { c.$($field)+ = parse(v)?; Ok(()) },
            }, )*
        ];
    };
}

keys! {
    "num_points" => [world.num_points], "world points";
    "extent_x" => [world.extent[0]], "box size along x, meters";
    "extent_y" => [world.extent[1]], "box size along y, meters";
    "extent_z" => [world.extent[2]], "box size along z, meters";
    "num_ref_views" => [world.num_ref_views], "reference (training) views";
    "num_query_views" => [world.num_query_views], "query views";
    "num_holdout_views" => [world.num_holdout_views], "reference-style views kept out of training";
    "pixel_noise" => [world.pixel_noise], "keypoint noise std, pixels";
    "descriptor_dim" => [world.descriptor_dim], "raw descriptor width";
    "descriptor_noise" => [world.descriptor_noise], "expected norm of per-observation descriptor noise";
    "illumination_shift" => [world.illumination_shift], "expected norm of the per-view descriptor bias";
    "field_weight" => [world.field_weight], "share of each descriptor given by the smooth appearance field";
    "field_frequency" => [world.field_frequency], "appearance field frequency scale, radians per meter";
    "min_depth" => [world.min_depth], "nearest visible depth, meters";
    "max_depth" => [world.max_depth], "farthest visible depth, meters";
    "frustum_margin" => [world.frustum_margin], "border band without keypoints, pixels";
    "focal" => [world.focal], "focal length, pixels";
    "image_width" => [world.image_width], "image width, pixels";
    "image_height" => [world.image_height], "image height, pixels";
    "orbit_radius" => [world.orbit_radius], "horizontal camera distance from the box center, meters";
    "orbit_jitter" => [world.orbit_jitter], "radius jitter, meters";
    "camera_height_min" => [world.camera_height[0]], "lowest camera height, meters";
    "camera_height_max" => [world.camera_height[1]], "highest camera height, meters";
    "target_jitter_x" => [world.target_jitter[0]], "look-at jitter along x, meters";
    "target_jitter_y" => [world.target_jitter[1]], "look-at jitter along y, meters";
    "target_jitter_z" => [world.target_jitter[2]], "look-at jitter along z, meters";
    "query_baseline" => [world.query_baseline], "minimum query-to-reference center distance, meters";
    "world_seed" => [world.seed], "world generation seed";
    "side_length" => [model.side_length], "voxel side length, meters";
    "codes_per_block" => [model.codes_per_block], "codes per block (N)";
    "code_dim" => [model.code_dim], "code and feature width (D)";
    "blocks" => [model.blocks], "cross-attention blocks (T)";
    "encoder_hidden" => [model.encoder_hidden], "encoder hidden width";
    "block_hidden" => [model.block_hidden], "block MLP hidden width";
    "head_hidden" => [model.head_hidden], "head hidden width";
    "init_seed" => [model.init_seed], "seed for decoder weights and fresh codes";
    "lambda_x" => [train.lambda_x], "coordinate loss weight";
    "lambda_c" => [train.lambda_c], "confidence loss weight";
    "lambda_l1" => [train.lambda_l1], "scale sparsity weight (stage 1)";
    "lr_agnostic" => [train.lr_agnostic], "learning rate of decoder weights";
    "lr_codes" => [train.lr_codes], "learning rate of codes and scales";
    "epochs_stage1" => [train.epochs_stage1], "stage-1 epochs";
    "epochs_stage2" => [train.epochs_stage2], "fine-tune epochs after pruning";
    "epochs_adapt" => [train.epochs_adapt], "scene adaptation epochs";
    "batch_voxels" => [train.batch_voxels], "voxels per optimizer step";
    "lr_halving_period" => [train.lr_halving_period], "epochs between learning-rate halvings";
    "prune_threshold" => [train.prune_threshold], "codes with |scale| below this are pruned";
    "train_seed" => [train.seed], "sampling seed";
    "min_points" => [train.min_points], "members a view must observe to cover a voxel";
    "passes_per_epoch" => [train.passes_per_epoch], "sweeps over all voxels per epoch";
    "adapt_scales" => [train.adapt_scales], "train scales (with L1) during adaptation";
    "top_k" => [localize.top_k], "retrieved reference views per query";
    "bypass_retrieval" => [localize.bypass_retrieval], "decode every voxel for every query";
    "confidence_threshold" => [localize.confidence_threshold], "minimum confidence of a kept candidate";
    "inlier_tol" => [localize.inlier_tol], "RANSAC inlier threshold, pixels";
    "ransac_iters" => [localize.ransac_iters], "RANSAC hypotheses";
    "ransac_seed" => [localize.ransac_seed], "RANSAC seed";
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.localize.validate()
    }

    pub fn decoder_dims(&self) -> DecoderDims {
        self.model.decoder_dims(self.world.descriptor_dim)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k) {
                return Err(Error::Config(format!("line {}: repeated key {k:?}", n + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key without validating the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(spec) = KEYS.iter().find(|s| s.name == key) else {
            return Err(Error::Config(format!("unknown key {key:?}")));
        };
        (spec.set)(self, value).map_err(|e| Error::Config(format!("{key}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value and documentation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "# {}\n{} = {}", k.doc, k.name, (k.get)(self));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn values_and_errors() {
        let c = Config::parse("num_points = 50 # few\nlr_codes=0.001\n\nadapt_scales = true").unwrap();
        assert_eq!(c.world.num_points, 50);
        assert_eq!(c.train.lr_codes, 0.001);
        assert!(c.train.adapt_scales);
        assert!(Config::parse("bogus = 1").is_err());
        assert!(Config::parse("num_points = 5\nnum_points = 6").is_err());
        assert!(Config::parse("num_points = five").is_err());
        assert!(Config::parse("num_points").is_err());
        assert!(Config::parse("extent_x = 0").is_err());
        assert!(Config::parse("batch_voxels = 0").is_err());
    }

    #[test]
    fn keys_are_unique() {
        let names: BTreeSet<&str> = KEYS.iter().map(|k| k.name).collect();
        assert_eq!(names.len(), KEYS.len());
    }
}
