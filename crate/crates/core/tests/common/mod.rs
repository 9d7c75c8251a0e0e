//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use neumap::decoder::DecoderParams;
use neumap::scene::CodeBank;
use neumap_diff::Tensor;

pub struct ScalarDecode {
    pub local: Vec<[f64; 3]>,
    pub confidence: Vec<f64>,
    /// attention[t][i][j]: feature i, stored code index j (None when pruned).
    pub attention: Vec<Vec<Vec<Option<f64>>>>,
    /// Smallest |pre-activation| seen at any ReLU.
    pub min_relu_input: f64,
}

fn tensor<'a>(p: &'a DecoderParams, name: &str) -> &'a Tensor {
    let i = p.names().iter().position(|n| n == name).unwrap();
    &p.tensors[i]
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|c| {
            let mut s = b.get(0, c);
            for (r, xv) in x.iter().enumerate() {
                s += xv * w.get(r, c);
            }
            s
        })
        .collect()
}

fn relu(x: Vec<f64>, min: &mut f64) -> Vec<f64> {
    x.into_iter()
        .map(|v| {
            *min = min.min(v.abs());
            v.max(0.0)
        })
        .collect()
}

fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + neumap_diff::LAYER_NORM_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, v)| (v - mean) * inv * gain.get(0, c) + bias.get(0, c))
        .collect()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols())
        .map(|c| x.iter().enumerate().map(|(r, v)| v * w.get(r, c)).sum())
        .collect()
}

pub fn encode(p: &DecoderParams, descriptor: &[f64], min: &mut f64) -> Vec<f64> {
    let h = relu(affine(descriptor, tensor(p, "encoder.0.weight"), tensor(p, "encoder.0.bias")), min);
    affine(&h, tensor(p, "encoder.1.weight"), tensor(p, "encoder.1.bias"))
}

pub fn decode(p: &DecoderParams, bank: &CodeBank, descriptors: &Tensor) -> ScalarDecode {
    let d = p.dims.dim;
    let mut out = ScalarDecode {
        local: vec![],
        confidence: vec![],
        attention: vec![vec![]; p.dims.blocks],
        min_relu_input: f64::INFINITY,
    };
    for i in 0..descriptors.rows() {
        let mut f = encode(p, descriptors.row(i), &mut out.min_relu_input);
        for t in 0..p.dims.blocks {
            let name = |s: &str| format!("block{t}.{s}");
            let keep: Vec<usize> = (0..bank.dims.codes).filter(|j| !bank.pruned[t][*j]).collect();
            if keep.is_empty() {
                out.attention[t].push(vec![None; bank.dims.codes]);
                continue;
            }
            let q = vec_mat(&f, tensor(p, &name("query")));
            let scaled: Vec<Vec<f64>> = keep
                .iter()
                .map(|j| bank.codes[t].row(*j).iter().map(|c| c * bank.scale(t, *j)).collect())
                .collect();
            let keys: Vec<Vec<f64>> = scaled.iter().map(|c| vec_mat(c, tensor(p, &name("key")))).collect();
            let values: Vec<Vec<f64>> = scaled.iter().map(|c| vec_mat(c, tensor(p, &name("value")))).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let attn: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            let mut row = vec![None; bank.dims.codes];
            for (a, j) in attn.iter().zip(&keep) {
                row[*j] = Some(*a);
            }
            out.attention[t].push(row);
            let mut h = f.clone();
            for (a, v) in attn.iter().zip(&values) {
                for c in 0..d {
                    h[c] += a * v[c];
                }
            }
            let h = layer_norm(&h, tensor(p, &name("norm1.gain")), tensor(p, &name("norm1.bias")));
            let m1 = relu(
                affine(&h, tensor(p, &name("mlp.0.weight")), tensor(p, &name("mlp.0.bias"))),
                &mut out.min_relu_input,
            );
            let m2 = affine(&m1, tensor(p, &name("mlp.1.weight")), tensor(p, &name("mlp.1.bias")));
            let h2: Vec<f64> = h.iter().zip(&m2).map(|(a, b)| a + b).collect();
            f = layer_norm(&h2, tensor(p, &name("norm2.gain")), tensor(p, &name("norm2.bias")));
        }
        let h = relu(affine(&f, tensor(p, "head.0.weight"), tensor(p, "head.0.bias")), &mut out.min_relu_input);
        let o = affine(&h, tensor(p, "head.1.weight"), tensor(p, "head.1.bias"));
        out.local.push([o[0], o[1], o[2]]);
        out.confidence.push(1.0 / (1.0 + (-o[3]).exp()));
    }
    out
}
