//! Bidirectional two-dimensional multi-head retention.
//!
//! The pipeline: a feature map is cut into P x P patches and embedded into
//! tokens that keep their integer grid coordinates. Each retention head
//! projects the tokens to Q/K/V, applies a per-pair phase rotation so that
//! inner products depend only on relative grid position, and mixes values
//! through `(Q K^T (.) D) V` where `D[n,m] = gamma^(|xn-xm| + |yn-ym|)` is a
//! Manhattan-distance decay mask. No softmax and no group normalization
//! anywhere; stability comes from layer norms at block boundaries.
//!
//! [`retention_recurrent_oracle`] evaluates the same sum token by token with
//! scalar loops and explicit relative angles. It shares no code with the
//! parallel path and exists purely to cross-check it.

mod block;

pub use block::{
    multi_head_retention, retention_block, FeedForwardVars, RetentionBlockVars, RetentionHeadVars,
};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Token-grid coordinate system: row-major `(row, col)` pairs over an
/// `Hp x Wp` patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    coords: Arc<Vec<(usize, usize)>>,
    grid: (usize, usize),
}

impl TokenGrid {
    pub fn new(hp: usize, wp: usize) -> Self {
        let coords = (0..hp)
            .flat_map(|i| (0..wp).map(move |j| (i, j)))
            .collect();
        TokenGrid {
            coords: Arc::new(coords),
            grid: (hp, wp),
        }
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Same grid with every coordinate shifted by a constant offset; the
    /// retention output must not change under this (relative positions only).
    pub fn translated(&self, dx: usize, dy: usize) -> Self {
        TokenGrid {
            coords: Arc::new(
                self.coords
                    .iter()
                    .map(|&(x, y)| (x + dx, y + dy))
                    .collect(),
            ),
            grid: self.grid,
        }
    }
}

/// Learnable patch embedding: projects flattened `P^2 C` patch vectors to
/// `D_model`, optionally with an additive bias.
#[derive(Clone, Debug)]
pub struct PatchEmbedding {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub patch: usize,
}

/// One retention head: projections, decay rate and phase frequencies.
#[derive(Clone, Debug)]
pub struct RetentionHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Decay rate in (0, 1]; 1.0 is the degenerate no-decay value used by
    /// tests.
    pub gamma: f64,
    /// Base angles, one per rotation pair within an axis half: `[D_head/4]`.
    pub theta_freqs: Tensor,
}

impl RetentionHeadParams {
    pub fn new(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        gamma: f64,
        theta_freqs: Tensor,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::param(
                "retention_head",
                format!("gamma must be in (0, 1], got {gamma}"),
            ));
        }
        let d_head = w_q.shape()[1];
        if d_head % 4 != 0 {
            return Err(Error::param(
                "retention_head",
                format!("D_head {d_head} must be divisible by 4"),
            ));
        }
        if theta_freqs.shape() != [d_head / 4] {
            return Err(Error::shape(
                "retention_head",
                format!(
                    "theta_freqs {:?} must be [D_head/4] = [{}]",
                    theta_freqs.shape(),
                    d_head / 4
                ),
            ));
        }
        Ok(RetentionHeadParams {
            w_q,
            w_k,
            w_v,
            gamma,
            theta_freqs,
        })
    }

    pub fn d_head(&self) -> usize {
        self.w_q.shape()[1]
    }
}

/// Per-head decay rate: `gamma_h = 1 - 2^(-5-h)`.
pub fn head_gamma(head_index: usize) -> f64 {
    1.0 - 2f64.powi(-5 - head_index as i32)
}

/// Geometric phase frequencies `theta_d = base^(-4d / D_head)` for
/// `d = 0 .. D_head/4`, shared by the x- and y-axis pair groups.
pub fn theta_frequencies(d_head: usize, base: f64) -> Result<Tensor> {
    if d_head % 4 != 0 {
        return Err(Error::param(
            "theta_frequencies",
            format!("D_head {d_head} must be divisible by 4"),
        ));
    }
    Ok(Tensor::from_fn(&[d_head / 4], |d| {
        base.powf(-4.0 * d as f64 / d_head as f64)
    }))
}

/// The `N x N` Manhattan-distance decay mask of a token grid.
#[derive(Clone, Debug)]
pub struct DecayMask {
    matrix: Tensor,
    gamma: f64,
}

impl DecayMask {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `D[n,m] = gamma^(|xn-xm| + |yn-ym|)`. `gamma == 1` is permitted for
/// testing (all-ones mask).
pub fn build_decay_mask(grid: &TokenGrid, gamma: f64) -> Result<DecayMask> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param(
            "build_decay_mask",
            format!("gamma must be in (0, 1], got {gamma}"),
        ));
    }
    let coords = grid.coords();
    let n = coords.len();
    let mut data = vec![0.0f64; n * n];
    for (a, &(xa, ya)) in coords.iter().enumerate() {
        for (b, &(xb, yb)) in coords.iter().enumerate() {
            let dist = xa.abs_diff(xb) + ya.abs_diff(yb);
            data[a * n + b] = gamma.powi(dist as i32);
        }
    }
    Ok(DecayMask {
        matrix: Tensor::new(vec![n, n], data)?,
        gamma,
    })
}

/// Splits `[B,C,H,W]` into `P x P` patches flattened channel-major:
/// `token[c*P^2 + py*P + px] = map[c, i*P+py, j*P+px]` for patch `(i, j)`,
/// tokens ordered row-major (`t = i*Wp + j`). Returns `[B, N, P^2 C]`.
fn patchify_raw(x: &Tensor, p: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (hp, wp) = (h / p, w / p);
    let n = hp * wp;
    let dim = p * p * c;
    let xd = x.data();
    let mut out = vec![0.0f64; b * n * dim];
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                let t = i * wp + j;
                let out_base = (bi * n + t) * dim;
                for ch in 0..c {
                    let in_base = (bi * c + ch) * h * w;
                    for py in 0..p {
                        let row = in_base + (i * p + py) * w + j * p;
                        let dst = out_base + ch * p * p + py * p;
                        out[dst..dst + p].copy_from_slice(&xd[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, n, dim], out).expect("shape computed")
}

/// Exact inverse of [`patchify_raw`].
fn unpatchify_raw(tokens: &Tensor, grid: (usize, usize), c: usize, p: usize) -> Tensor {
    let (hp, wp) = grid;
    let (b, n, dim) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    debug_assert_eq!(n, hp * wp);
    debug_assert_eq!(dim, p * p * c);
    let (h, w) = (hp * p, wp * p);
    let td = tokens.data();
    let mut out = vec![0.0f64; b * c * h * w];
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                let t = i * wp + j;
                let in_base = (bi * n + t) * dim;
                for ch in 0..c {
                    let out_base = (bi * c + ch) * h * w;
                    for py in 0..p {
                        let src = in_base + ch * p * p + py * p;
                        let row = out_base + (i * p + py) * w + j * p;
                        out[row..row + p].copy_from_slice(&td[src..src + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out).expect("shape computed")
}

/// Tokenizes a feature map: `N = (H/P) * (W/P)` patches, each flattened to a
/// `P^2 C` vector (channel-major), with row-major grid coordinates.
pub fn patchify(tape: &mut Tape, feature_map: Var, p: usize) -> Result<(Var, TokenGrid)> {
    let shape = tape.value(feature_map).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(
            "patchify",
            format!("expected [B,C,H,W], got {shape:?}"),
        ));
    }
    if p == 0 {
        return Err(Error::param("patchify", "patch size must be >= 1"));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("patch size {p} does not divide spatial dims {h}x{w}"),
        ));
    }
    let grid = TokenGrid::new(h / p, w / p);
    let grid_dims = grid.grid();
    let out = patchify_raw(tape.value(feature_map), p);
    let var = tape.push(
        out,
        vec![feature_map],
        Some(Box::new(move |g| vec![unpatchify_raw(g, grid_dims, c, p)])),
        "patchify",
    );
    Ok((var, grid))
}

/// Reassembles tokens into `[B,C,H,W]`; exact inverse of [`patchify`].
pub fn unpatchify(
    tape: &mut Tape,
    tokens: Var,
    grid: &TokenGrid,
    channels: usize,
    p: usize,
) -> Result<Var> {
    let shape = tape.value(tokens).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(
            "unpatchify",
            format!("expected [B,N,P^2*C], got {shape:?}"),
        ));
    }
    let (hp, wp) = grid.grid();
    if shape[1] != hp * wp || shape[2] != p * p * channels {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "tokens {:?} do not match grid {}x{} with {channels} channels, patch {p}",
                shape, hp, wp
            ),
        ));
    }
    let out = unpatchify_raw(tape.value(tokens), (hp, wp), channels, p);
    Ok(tape.push(
        out,
        vec![tokens],
        Some(Box::new(move |g| vec![patchify_raw(g, p)])),
        "unpatchify",
    ))
}

/// Projects flattened patches through the embedding matrix (`x = E v` per
/// token, batched), with the optional learnable bias.
pub fn embed(tape: &mut Tape, patches: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let projected = tape.matmul(patches, weight)?;
    match bias {
        Some(b) => tape.add_bias(projected, b),
        None => Ok(projected),
    }
}

/// Precomputed per-token, per-pair rotation angles.
///
/// `D_head` channels form `D_head/2` consecutive pairs; the first half of the
/// pairs rotates by `x_n * theta_d`, the second half by `y_n * theta_d`,
/// sharing the same base angles.
#[derive(Clone, Debug)]
pub struct RotationPlan {
    cos: Arc<Vec<f64>>,
    sin: Arc<Vec<f64>>,
    n_tokens: usize,
    d_head: usize,
}

impl RotationPlan {
    pub fn new(grid: &TokenGrid, theta_freqs: &Tensor, d_head: usize) -> Result<Self> {
        if d_head % 4 != 0 {
            return Err(Error::param(
                "apply_rotation",
                format!("D_head {d_head} must be divisible by 4"),
            ));
        }
        let quarter = d_head / 4;
        if theta_freqs.shape() != [quarter] {
            return Err(Error::shape(
                "apply_rotation",
                format!(
                    "theta_freqs {:?} must be [D_head/4] = [{quarter}]",
                    theta_freqs.shape()
                ),
            ));
        }
        let coords = grid.coords();
        let pairs = d_head / 2;
        let theta = theta_freqs.data();
        let mut cos = vec![0.0f64; coords.len() * pairs];
        let mut sin = vec![0.0f64; coords.len() * pairs];
        for (n, &(x, y)) in coords.iter().enumerate() {
            for pair in 0..pairs {
                let angle = if pair < quarter {
                    x as f64 * theta[pair]
                } else {
                    y as f64 * theta[pair - quarter]
                };
                cos[n * pairs + pair] = angle.cos();
                sin[n * pairs + pair] = angle.sin();
            }
        }
        Ok(RotationPlan {
            cos: Arc::new(cos),
            sin: Arc::new(sin),
            n_tokens: coords.len(),
            d_head,
        })
    }

    fn apply(&self, x: &Tensor, conjugate: bool) -> Tensor {
        let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(n, self.n_tokens);
        debug_assert_eq!(d, self.d_head);
        let pairs = d / 2;
        let sign = if conjugate { -1.0 } else { 1.0 };
        let xd = x.data();
        let mut out = vec![0.0f64; xd.len()];
        for bi in 0..b {
            for t in 0..n {
                let base = (bi * n + t) * d;
                let trig = t * pairs;
                for pair in 0..pairs {
                    let c = self.cos[trig + pair];
                    let s = sign * self.sin[trig + pair];
                    let re = xd[base + 2 * pair];
                    let im = xd[base + 2 * pair + 1];
                    out[base + 2 * pair] = re * c - im * s;
                    out[base + 2 * pair + 1] = re * s + im * c;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
    }
}

/// Rotates each channel pair of `[B,N,D_head]` by its token's phase angles;
/// `conjugate` negates all angles. The backward pass is the conjugate
/// rotation (rotations are orthogonal).
pub fn apply_rotation(
    tape: &mut Tape,
    projected: Var,
    plan: &RotationPlan,
    conjugate: bool,
) -> Result<Var> {
    let shape = tape.value(projected).shape();
    if shape.len() != 3 || shape[1] != plan.n_tokens || shape[2] != plan.d_head {
        return Err(Error::shape(
            "apply_rotation",
            format!(
                "input {:?} does not match plan ({} tokens, D_head {})",
                shape, plan.n_tokens, plan.d_head
            ),
        ));
    }
    let out = plan.apply(tape.value(projected), conjugate);
    let plan = plan.clone();
    Ok(tape.push(
        out,
        vec![projected],
        Some(Box::new(move |g| vec![plan.apply(g, !conjugate)])),
        "apply_rotation",
    ))
}

/// Parallel retention: `((Q K^T) (.) D) V`, raw masked scores with no softmax
/// or normalization inside the op.
pub fn retention_parallel(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &DecayMask,
) -> Result<Var> {
    let n = tape.value(q).shape()[1];
    let b = tape.value(q).shape()[0];
    if mask.matrix.shape() != [n, n] {
        return Err(Error::shape(
            "retention_parallel",
            format!(
                "decay mask {:?} does not match {n} tokens",
                mask.matrix.shape()
            ),
        ));
    }
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let tiled = tile_mask(&mask.matrix, b);
    let masked = tape.mul_const(scores, &tiled)?;
    tape.matmul(masked, v)
}

fn tile_mask(mask: &Tensor, batch: usize) -> Tensor {
    let n = mask.shape()[0];
    let md = mask.data();
    let mut out = vec![0.0f64; batch * n * n];
    for b in 0..batch {
        out[b * n * n..(b + 1) * n * n].copy_from_slice(md);
    }
    Tensor::new(vec![batch, n, n], out).expect("shape computed")
}

/// Brute-force bidirectional recurrent retention (the verification oracle).
///
/// Evaluates `o_n = sum_m gamma^dist(n,m) * score(n,m) * v_m` token by token
/// with scalar loops, where `score` applies the *relative* phase
/// `(coord_m - coord_n) * theta` directly to the k vector. Shares no code
/// with [`retention_parallel`]; small N only.
pub fn retention_recurrent_oracle(
    x: &Tensor,
    head: &RetentionHeadParams,
    grid: &TokenGrid,
) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "retention_recurrent_oracle",
            format!("expected [B,N,D_model], got {shape:?}"),
        ));
    }
    let (b, n, d_model) = (shape[0], shape[1], shape[2]);
    if n != grid.len() {
        return Err(Error::shape(
            "retention_recurrent_oracle",
            format!("{n} tokens vs grid of {}", grid.len()),
        ));
    }
    if head.w_q.shape()[0] != d_model {
        return Err(Error::shape(
            "retention_recurrent_oracle",
            format!(
                "W_Q expects {} model dims, got {d_model}",
                head.w_q.shape()[0]
            ),
        ));
    }
    let d_head = head.d_head();
    let quarter = d_head / 4;
    let coords = grid.coords();
    let theta = head.theta_freqs.data();
    let xd = x.data();
    let project = |bi: usize, t: usize, w: &Tensor| -> Vec<f64> {
        let wd = w.data();
        let mut out = vec![0.0f64; d_head];
        for dm in 0..d_model {
            let xv = xd[(bi * n + t) * d_model + dm];
            for dh in 0..d_head {
                out[dh] += xv * wd[dm * d_head + dh];
            }
        }
        out
    };

    let mut out = vec![0.0f64; b * n * d_head];
    for bi in 0..b {
        for tn in 0..n {
            let q = project(bi, tn, &head.w_q);
            let (xn, yn) = coords[tn];
            for tm in 0..n {
                let k = project(bi, tm, &head.w_k);
                let v = project(bi, tm, &head.w_v);
                let (xm, ym) = coords[tm];
                let dist = xn.abs_diff(xm) + yn.abs_diff(ym);
                let decay = head.gamma.powi(dist as i32);

                // score = q . R(relative angle) k, pair by pair
                let mut score = 0.0;
                for pair in 0..d_head / 2 {
                    let delta = if pair < quarter {
                        (xm as f64 - xn as f64) * theta[pair]
                    } else {
                        (ym as f64 - yn as f64) * theta[pair - quarter]
                    };
                    let (s, c) = delta.sin_cos();
                    let (k1, k2) = (k[2 * pair], k[2 * pair + 1]);
                    let rk1 = k1 * c - k2 * s;
                    let rk2 = k1 * s + k2 * c;
                    score += q[2 * pair] * rk1 + q[2 * pair + 1] * rk2;
                }

                let coef = decay * score;
                let out_base = (bi * n + tn) * d_head;
                for dh in 0..d_head {
                    out[out_base + dh] += coef * v[dh];
                }
            }
        }
    }
    Tensor::new(vec![b, n, d_head], out)
}

#[cfg(test)]
mod tests;
