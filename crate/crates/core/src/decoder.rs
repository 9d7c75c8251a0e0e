//! Scene-agnostic transdecoder: descriptor encoder, stacked cross-attention
//! blocks keyed by a voxel's scaled codes, and a coordinate/confidence head.
//!
//! Weights are stored `in x out` so layers compute `y = x · W + b`.

use std::path::Path;

use nalgebra::Vector3;
use neumap_diff::{mlp_forward, AffineVars, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::scene::{BankDims, CodeBank, Voxel, VoxelId};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"NMWT";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;
/// Probability at or above which a prediction counts as in-voxel.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

const ENCODER_TENSORS: usize = 4;
const BLOCK_TENSORS: usize = 11;
const HEAD_TENSORS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    /// Raw descriptor width.
    pub raw_dim: usize,
    /// Feature and code width.
    pub dim: usize,
    pub blocks: usize,
    pub encoder_hidden: usize,
    pub block_hidden: usize,
    pub head_hidden: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        Self {
            raw_dim: 64,
            dim: 32,
            blocks: 6,
            encoder_hidden: 128,
            block_hidden: 128,
            head_hidden: 128,
        }
    }
}

impl DecoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.raw_dim < 1
            || self.dim < 2
            || self.blocks < 1
            || self.encoder_hidden < 1
            || self.block_hidden < 1
            || self.head_hidden < 1
        {
            return Err(Error::Config(format!("bad decoder dims {self:?}")));
        }
        Ok(())
    }

    /// Name and shape of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let d = self.dim;
        let mut out = vec![
            ("encoder.0.weight".to_string(), self.raw_dim, self.encoder_hidden),
            ("encoder.0.bias".to_string(), 1, self.encoder_hidden),
            ("encoder.1.weight".to_string(), self.encoder_hidden, d),
            ("encoder.1.bias".to_string(), 1, d),
        ];
        for t in 0..self.blocks {
            let b = |s: &str| format!("block{t}.{s}");
            out.extend([
                (b("query"), d, d),
                (b("key"), d, d),
                (b("value"), d, d),
                (b("mlp.0.weight"), d, self.block_hidden),
                (b("mlp.0.bias"), 1, self.block_hidden),
                (b("mlp.1.weight"), self.block_hidden, d),
                (b("mlp.1.bias"), 1, d),
                (b("norm1.gain"), 1, d),
                (b("norm1.bias"), 1, d),
                (b("norm2.gain"), 1, d),
                (b("norm2.bias"), 1, d),
            ]);
        }
        out.extend([
            ("head.0.weight".to_string(), d, self.head_hidden),
            ("head.0.bias".to_string(), 1, self.head_hidden),
            ("head.1.weight".to_string(), self.head_hidden, 4),
            ("head.1.bias".to_string(), 1, 4),
        ]);
        out
    }

    pub fn check_bank(&self, bank: BankDims) -> Result<()> {
        if bank.dim != self.dim || bank.blocks != self.blocks {
            return Err(Error::Dimension(format!(
                "bank (T={}, D={}) does not fit decoder (T={}, D={})",
                bank.blocks, bank.dim, self.blocks, self.dim
            )));
        }
        Ok(())
    }
}

/// All decoder weights as a flat list following [`DecoderDims::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub dims: DecoderDims,
    pub tensors: Vec<Tensor>,
}

impl DecoderParams {
    /// Uniform `±1/sqrt(fan_in)` weights and biases; unit norm gains and zero
    /// norm biases.
    pub fn init(dims: DecoderDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = dims.layout();
        let mut tensors = Vec::with_capacity(layout.len());
        let mut fan_in = 1;
        for (name, r, c) in &layout {
            let t = if name.ends_with("gain") {
                Tensor::full(*r, *c, 1.0)
            } else if name.starts_with("block") && name.contains("norm") {
                Tensor::zeros(*r, *c)
            } else {
                if *r > 1 || !name.ends_with("bias") {
                    fan_in = *r;
                }
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_vec(*r, *c, data)?
            };
            tensors.push(t);
        }
        Ok(Self { dims, tensors })
    }

    pub fn zeros(dims: DecoderDims) -> Result<Self> {
        dims.validate()?;
        let tensors = dims.layout().iter().map(|(_, r, c)| Tensor::zeros(*r, *c)).collect();
        Ok(Self { dims, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        self.dims.layout().into_iter().map(|(n, _, _)| n).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(&WEIGHTS_MAGIC);
        w.u32(WEIGHTS_FORMAT_VERSION);
        let d = &self.dims;
        for v in [d.raw_dim, d.dim, d.blocks, d.encoder_hidden, d.block_hidden, d.head_hidden] {
            w.u32(v as u32);
        }
        w.u32(self.tensors.len() as u32);
        for ((name, _, _), t) in d.layout().iter().zip(&self.tensors) {
            w.str(name);
            w.u32(t.rows() as u32);
            w.u32(t.cols() as u32);
            t.data().iter().for_each(|v| w.f64(*v));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(&WEIGHTS_MAGIC)?;
        r.expect_version(WEIGHTS_FORMAT_VERSION)?;
        let mut f = [0usize; 6];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let dims = DecoderDims {
            raw_dim: f[0],
            dim: f[1],
            blocks: f[2],
            encoder_hidden: f[3],
            block_hidden: f[4],
            head_hidden: f[5],
        };
        if dims.validate().is_err() {
            return Err(r.invalid(format!("bad decoder dims {dims:?}")));
        }
        let layout = dims.layout();
        let count = r.u32()? as usize;
        if count != layout.len() {
            return Err(r.invalid(format!("expected {} tensors, found {count}", layout.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, rows, cols) in &layout {
            let found = r.str()?;
            if &found != name {
                return Err(r.invalid(format!("expected tensor {name}, found {found}")));
            }
            let (fr, fc) = (r.u32()? as usize, r.u32()? as usize);
            if (fr, fc) != (*rows, *cols) {
                return Err(r.invalid(format!("{name}: shape {fr}x{fc}, expected {rows}x{cols}")));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let v = r.f64()?;
                if !v.is_finite() {
                    return Err(r.invalid(format!("{name}: non-finite value")));
                }
                data.push(v);
            }
            tensors.push(Tensor::from_vec(*rows, *cols, data).expect("checked shape"));
        }
        r.finish()?;
        Ok(Self { dims, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}

/// Decoder weights placed on a tape.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub dims: DecoderDims,
    vars: Vec<Var>,
}

struct BlockVars {
    query: Var,
    key: Var,
    value: Var,
    mlp: [AffineVars; 2],
    norm1: (Var, Var),
    norm2: (Var, Var),
}

impl DecoderVars {
    /// Places tensor `i` of `params` via `bind(graph, i, tensor)`.
    pub fn bind<F>(g: &mut Graph, params: &DecoderParams, mut bind: F) -> Result<Self>
    where
        F: FnMut(&mut Graph, usize, &Tensor) -> neumap_diff::Result<Var>,
    {
        let vars = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| bind(g, i, t))
            .collect::<neumap_diff::Result<Vec<_>>>()?;
        Ok(Self {
            dims: params.dims,
            vars,
        })
    }

    /// Wraps already-placed tensors given in layout order.
    pub fn from_vars(dims: DecoderDims, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != dims.layout().len() {
            return Err(Error::Dimension(format!(
                "expected {} decoder tensors, got {}",
                dims.layout().len(),
                vars.len()
            )));
        }
        Ok(Self { dims, vars })
    }

    pub fn constants(g: &mut Graph, params: &DecoderParams) -> Result<Self> {
        Self::bind(g, params, |g, _, t| g.constant(t.clone()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn affine(&self, i: usize) -> AffineVars {
        AffineVars {
            weight: self.vars[i],
            bias: self.vars[i + 1],
        }
    }

    fn encoder(&self) -> [AffineVars; 2] {
        [self.affine(0), self.affine(2)]
    }

    fn block(&self, t: usize) -> BlockVars {
        let b = ENCODER_TENSORS + BLOCK_TENSORS * t;
        let v = &self.vars;
        BlockVars {
            query: v[b],
            key: v[b + 1],
            value: v[b + 2],
            mlp: [self.affine(b + 3), self.affine(b + 5)],
            norm1: (v[b + 7], v[b + 8]),
            norm2: (v[b + 9], v[b + 10]),
        }
    }

    fn head(&self) -> [AffineVars; 2] {
        let b = ENCODER_TENSORS + BLOCK_TENSORS * self.dims.blocks;
        debug_assert_eq!(b + HEAD_TENSORS, self.vars.len());
        [self.affine(b), self.affine(b + 2)]
    }
}

/// Retained codes of one block on the tape: `codes` is n x D, `scales` n x 1.
#[derive(Clone, Copy, Debug)]
pub struct BlockCodes {
    pub codes: Var,
    pub scales: Var,
}

/// One entry per block; `None` when every code of the block is pruned.
pub type BankVars = Vec<Option<BlockCodes>>;

/// Retained rows of block `t` sorted by (scale, code values), so decoding
/// does not depend on the order codes are stored in.
pub fn canonical_rows(bank: &CodeBank, t: usize) -> Vec<usize> {
    let mut keep = bank.retained(t);
    let key = |j: usize| std::iter::once(bank.scale(t, j)).chain(bank.codes[t].row(j).iter().copied());
    keep.sort_by(|a, b| {
        key(*a)
            .zip(key(*b))
            .map(|(x, y)| x.total_cmp(&y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    keep
}

/// Places the retained rows of `bank` on the tape as constants.
pub fn bank_constants(g: &mut Graph, bank: &CodeBank) -> Result<BankVars> {
    (0..bank.dims.blocks)
        .map(|t| {
            let keep = canonical_rows(bank, t);
            if keep.is_empty() {
                return Ok(None);
            }
            Ok(Some(BlockCodes {
                codes: g.constant(bank.codes[t].select_rows(&keep))?,
                scales: g.constant(bank.scales[t].select_rows(&keep))?,
            }))
        })
        .collect()
}

/// Raw descriptors (K x D_raw) to features (K x D).
pub fn encode(g: &mut Graph, dec: &DecoderVars, descriptors: Var) -> Result<Var> {
    let (_, cols) = g.shape(descriptors);
    if cols != dec.dims.raw_dim {
        return Err(Error::Dimension(format!(
            "descriptor width {cols}, decoder expects {}",
            dec.dims.raw_dim
        )));
    }
    Ok(mlp_forward(g, descriptors, &dec.encoder())?)
}

/// One cross-attention block over scaled codes, post-norm residual on both
/// the attention and the MLP. Returns the new features and the attention
/// matrix (K x retained).
pub fn cross_attention_block(
    g: &mut Graph,
    dec: &DecoderVars,
    t: usize,
    f: Var,
    codes: BlockCodes,
) -> Result<(Var, Var)> {
    let b = dec.block(t);
    let scaled = g.scale_rows(codes.codes, codes.scales)?;
    let q = g.matmul(f, b.query)?;
    let k = g.matmul(scaled, b.key)?;
    let v = g.matmul(scaled, b.value)?;
    let logits = g.matmul_nt(q, k)?;
    let logits = g.mul_scalar(logits, 1.0 / (dec.dims.dim as f64).sqrt())?;
    let attn = g.softmax_rows(logits)?;
    let ctx = g.matmul(attn, v)?;
    let h = g.add(f, ctx)?;
    let h = g.layer_norm(h, b.norm1.0, b.norm1.1)?;
    let m = mlp_forward(g, h, &b.mlp)?;
    let h2 = g.add(h, m)?;
    let out = g.layer_norm(h2, b.norm2.0, b.norm2.1)?;
    Ok((out, attn))
}

/// Tape handles of a decoded batch.
#[derive(Clone, Debug)]
pub struct DecodeVars {
    /// K x 3 voxel-frame coordinates.
    pub local: Var,
    /// K x 1 confidence logits.
    pub logit: Var,
    /// K x 1 probabilities.
    pub confidence: Var,
    /// Attention matrix per block, `None` for skipped blocks.
    pub attention: Vec<Option<Var>>,
    pub skipped_blocks: usize,
}

/// Runs every block and the head on features `f` (K x D).
pub fn decode_features(g: &mut Graph, dec: &DecoderVars, f: Var, bank: &BankVars) -> Result<DecodeVars> {
    if bank.len() != dec.dims.blocks {
        return Err(Error::Dimension(format!(
            "bank has {} blocks, decoder {}",
            bank.len(),
            dec.dims.blocks
        )));
    }
    let mut f = f;
    let mut attention = Vec::with_capacity(bank.len());
    let mut skipped_blocks = 0;
    for (t, codes) in bank.iter().enumerate() {
        match codes {
            Some(c) => {
                let (out, attn) = cross_attention_block(g, dec, t, f, *c)?;
                f = out;
                attention.push(Some(attn));
            }
            None => {
                skipped_blocks += 1;
                attention.push(None);
            }
        }
    }
    let out = mlp_forward(g, f, &dec.head())?;
    let local = g.col_slice(out, 0, 3)?;
    let logit = g.col_slice(out, 3, 1)?;
    let confidence = g.sigmoid(logit)?;
    Ok(DecodeVars {
        local,
        logit,
        confidence,
        attention,
        skipped_blocks,
    })
}

/// Encodes raw descriptors outside any training tape.
pub fn encode_features(params: &DecoderParams, descriptors: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let dec = DecoderVars::constants(&mut g, params)?;
    let x = g.constant(descriptors.clone())?;
    let f = encode(&mut g, &dec, x)?;
    Ok(g.value(f).clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub voxel: VoxelId,
    pub local: Vector3<f64>,
    pub confidence: f64,
    /// `local + origin`.
    pub world: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub predictions: Vec<Prediction>,
    pub skipped_blocks: usize,
}

/// Decodes encoded features (K x D) against one voxel.
pub fn decode(params: &DecoderParams, features: &Tensor, voxel: &Voxel) -> Result<DecodeOutput> {
    params.dims.check_bank(voxel.bank.dims)?;
    if features.cols() != params.dims.dim {
        return Err(Error::Dimension(format!(
            "feature width {}, decoder expects {}",
            features.cols(),
            params.dims.dim
        )));
    }
    let mut g = Graph::new();
    let dec = DecoderVars::constants(&mut g, params)?;
    let bank = bank_constants(&mut g, &voxel.bank)?;
    let f = g.constant(features.clone())?;
    let out = decode_features(&mut g, &dec, f, &bank)?;
    let (local, conf) = (g.value(out.local), g.value(out.confidence));
    let predictions = (0..features.rows())
        .map(|i| {
            let l = Vector3::new(local.get(i, 0), local.get(i, 1), local.get(i, 2));
            Prediction {
                voxel: voxel.id,
                local: l,
                confidence: conf.get(i, 0),
                world: l + voxel.origin,
            }
        })
        .collect();
    Ok(DecodeOutput {
        predictions,
        skipped_blocks: out.skipped_blocks,
    })
}

/// Attention paid to one code across a batch of features.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores {
    pub raw: Vec<f64>,
    /// `(s - min) / (max - min)`, all zero when the batch is constant.
    pub normalized: Vec<f64>,
}

pub fn normalize_scores(s: &[f64]) -> Vec<f64> {
    let a = s.iter().copied().fold(f64::INFINITY, f64::min);
    let b = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(b > a) {
        return vec![0.0; s.len()];
    }
    s.iter().map(|v| (v - a) / (b - a)).collect()
}

/// Column `code` of block `block`'s attention matrix over `features`.
pub fn attention_scores(
    params: &DecoderParams,
    features: &Tensor,
    voxel: &Voxel,
    block: usize,
    code: usize,
) -> Result<AttentionScores> {
    let bank = &voxel.bank;
    params.dims.check_bank(bank.dims)?;
    if block >= bank.dims.blocks || code >= bank.dims.codes {
        return Err(Error::Config(format!("no code {code} in block {block}")));
    }
    if bank.pruned[block][code] {
        return Err(Error::Config(format!("code {code} of block {block} is pruned")));
    }
    let column = canonical_rows(bank, block).iter().position(|j| *j == code).unwrap();
    let mut g = Graph::new();
    let dec = DecoderVars::constants(&mut g, params)?;
    let bv = bank_constants(&mut g, bank)?;
    let f = g.constant(features.clone())?;
    let out = decode_features(&mut g, &dec, f, &bv)?;
    let attn = g.value(out.attention[block].expect("block with retained code"));
    let raw: Vec<f64> = (0..attn.rows()).map(|i| attn.get(i, column)).collect();
    let normalized = normalize_scores(&raw);
    Ok(AttentionScores { raw, normalized })
}
