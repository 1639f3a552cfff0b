//! Multi-head retention and the residual retention block.

use super::{apply_rotation, build_decay_mask, retention_parallel, RotationPlan, TokenGrid};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Tape handles for one head's projections plus its decay rate.
#[derive(Clone, Copy, Debug)]
pub struct RetentionHeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gamma: f64,
}

/// Position-wise feedforward: two linear maps with a relu between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles for a full retention block.
pub struct RetentionBlockVars {
    /// Pre-norm ahead of the retention sublayer.
    pub ln1: (Var, Var),
    pub heads: Vec<RetentionHeadVars>,
    pub w_out: Var,
    /// Norm applied to the retention output (in place of group norm/softmax).
    pub out_ln: (Var, Var),
    /// Pre-norm + feedforward sublayer; `None` disables it.
    pub ffn: Option<(Var, Var, FeedForwardVars)>,
}

/// Runs every head (project -> rotate -> parallel retention with the head's
/// own decay mask), concatenates them, applies the output projection, then
/// layer normalization.
pub fn multi_head_retention(
    tape: &mut Tape,
    x: Var,
    heads: &[RetentionHeadVars],
    w_out: Var,
    out_ln: (Var, Var),
    grid: &TokenGrid,
    theta_freqs: &Tensor,
    eps: f64,
) -> Result<Var> {
    let d_model = *tape
        .value(x)
        .shape()
        .last()
        .expect("token tensors are rank 3");
    let head_sum: usize = heads
        .iter()
        .map(|h| tape.value(h.w_q).shape()[1])
        .sum();
    if head_sum != d_model {
        return Err(Error::shape(
            "multi_head_retention",
            format!("head dims sum to {head_sum}, expected D_model {d_model}"),
        ));
    }

    let mut head_outputs = Vec::with_capacity(heads.len());
    for head in heads {
        let d_head = tape.value(head.w_q).shape()[1];
        let plan = RotationPlan::new(grid, theta_freqs, d_head)?;
        let mask = build_decay_mask(grid, head.gamma)?;
        let q = tape.matmul(x, head.w_q)?;
        let k = tape.matmul(x, head.w_k)?;
        let v = tape.matmul(x, head.w_v)?;
        let qr = apply_rotation(tape, q, &plan, false)?;
        let kr = apply_rotation(tape, k, &plan, false)?;
        head_outputs.push(retention_parallel(tape, qr, kr, v, &mask)?);
    }

    let merged = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat(&head_outputs, 2)?
    };
    let projected = tape.matmul(merged, w_out)?;
    tape.layer_norm(projected, out_ln.0, out_ln.1, eps)
}

/// Pre-norm residual block:
/// `x + retention(norm(x))`, then `x' + feedforward(norm(x'))` when the
/// feedforward sublayer is enabled.
pub fn retention_block(
    tape: &mut Tape,
    x: Var,
    vars: &RetentionBlockVars,
    grid: &TokenGrid,
    theta_freqs: &Tensor,
    eps: f64,
) -> Result<Var> {
    let normed = tape.layer_norm(x, vars.ln1.0, vars.ln1.1, eps)?;
    let mixed = multi_head_retention(
        tape,
        normed,
        &vars.heads,
        vars.w_out,
        vars.out_ln,
        grid,
        theta_freqs,
        eps,
    )?;
    let x1 = tape.add(x, mixed)?;

    let Some((ln2_gain, ln2_bias, ffn)) = vars.ffn else {
        return Ok(x1);
    };
    let normed2 = tape.layer_norm(x1, ln2_gain, ln2_bias, eps)?;
    let h = tape.matmul(normed2, ffn.w1)?;
    let h = tape.add_bias(h, ffn.b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, ffn.w2)?;
    let h = tape.add_bias(h, ffn.b2)?;
    tape.add(x1, h)
}
