use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Output of multi-head attention, with the per-head attention matrices kept
/// for inspection.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Linear query/key/value projections, each `[D×D]`.
#[derive(Debug, Clone, Copy)]
pub struct QkvProjection {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`
/// (each `[N×D]`), split into `heads` column groups.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<AttentionOutput> {
    let d = tape.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    for other in [k, v] {
        if tape.value(other).shape() != tape.value(q).shape() {
            return Err(Error::Dimension(format!(
                "attention inputs differ in shape: {:?} vs {:?}",
                tape.value(q).shape(),
                tape.value(other).shape()
            )));
        }
    }
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let w = tape.softmax(logits);
        outputs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let output = if heads == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    Ok(AttentionOutput { output, weights })
}

/// Multi-head self-attention of `x` (`[N×D]`) with linear projections.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    x: Var,
    proj: &QkvProjection,
    heads: usize,
) -> Result<AttentionOutput> {
    let q = tape.matmul(x, proj.query)?;
    let k = tape.matmul(x, proj.key)?;
    let v = tape.matmul(x, proj.value)?;
    scaled_dot_product_attention(tape, q, k, v, heads)
}
