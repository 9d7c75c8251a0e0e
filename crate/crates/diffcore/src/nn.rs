//! Affine layers and MLP stacks on top of [`Graph`].

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};

/// One affine layer on the tape: `y = x · weight + bias`, with
/// `weight: in x out` and `bias: 1 x out`.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

pub fn affine(g: &mut Graph, x: Var, layer: AffineVars) -> Result<Var> {
    let y = g.matmul(x, layer.weight)?;
    g.add_row(y, layer.bias)
}

/// Affine layers with ReLU between them (none after the last layer).
pub fn mlp_forward(g: &mut Graph, x: Var, layers: &[AffineVars]) -> Result<Var> {
    if layers.is_empty() {
        return Err(DiffError::Invalid {
            op: "mlp_forward",
            msg: "no layers".into(),
        });
    }
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let (rows_in, _) = g.shape(layer.weight);
        if g.shape(h).1 != rows_in {
            return Err(DiffError::Shape {
                op: "mlp_forward",
                lhs: g.shape(h),
                rhs: g.shape(layer.weight),
            });
        }
        h = affine(g, h, *layer)?;
        if i + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}
