//! Forward ops recorded on the tape, each with its local gradient rule.

use rand::Rng;
use rayon::prelude::*;

use super::conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvDims,
};
use super::resample::{upsample_x2_backward, upsample_x2_forward};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Stride/padding/groups bundle for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups,
        }
    }

    pub fn plain(stride: usize, padding: usize) -> Self {
        Conv2dSpec::new(stride, padding, 1)
    }
}

// Largest f64 strictly below 1.0; sigmoid output is clamped into
// (0, 1) so downstream logs and the output-range contract stay safe.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

fn binary_zip(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Splits a shape into `(batch, m, k)` treating all but the last two axes as
/// batch. Rank-2 tensors get batch 1.
fn matrix_view(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    let k = shape[shape.len() - 1];
    let m = shape[shape.len() - 2];
    let batch = shape[..shape.len() - 2].iter().product();
    Some((batch, m, k))
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ab, m, k) = matrix_view(a.shape())
        .ok_or_else(|| Error::shape("matmul", format!("lhs rank {} < 2", a.shape().len())))?;
    let (bb, bk, p) = matrix_view(b.shape())
        .ok_or_else(|| Error::shape("matmul", format!("rhs rank {} < 2", b.shape().len())))?;
    if k != bk {
        return Err(Error::shape(
            "matmul",
            format!("inner dims disagree: {k} vs {bk}"),
        ));
    }
    let shared_rhs = b.shape().len() == 2;
    if !shared_rhs && ab != bb {
        return Err(Error::shape(
            "matmul",
            format!("batch dims disagree: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out_shape = a.shape()[..a.shape().len() - 1].to_vec();
    out_shape.push(p);

    let a_data = a.data();
    let b_data = b.data();
    let mut out = vec![0.0f64; ab * m * p];
    out.par_chunks_mut(p).enumerate().for_each(|(row, orow)| {
        let batch = row / m;
        let a_row = row * k;
        let b_base = if shared_rhs { 0 } else { batch * k * p };
        for kk in 0..k {
            let av = a_data[a_row + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = b_base + kk * p;
            for pp in 0..p {
                orow[pp] += av * b_data[b_row + pp];
            }
        }
    });
    Tensor::new(out_shape, out)
}

fn transpose_last2_raw(t: &Tensor) -> Tensor {
    let (batch, m, k) = matrix_view(t.shape()).expect("rank >= 2");
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    let data = t.data();
    let mut out = vec![0.0f64; data.len()];
    for b in 0..batch {
        let base = b * m * k;
        for i in 0..m {
            for j in 0..k {
                out[base + j * m + i] = data[base + i * k + j];
            }
        }
    }
    Tensor::new(shape, out).expect("shape computed")
}

/// `(outer, channels, inner)` view used by layer normalization: the channel
/// axis is axis 1 for `[B,C,H,W]`, the last axis for `[B,N,D]` and `[B,D]`.
fn norm_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        3 => Ok((shape[0] * shape[1], shape[2], 1)),
        2 => Ok((shape[0], shape[1], 1)),
        r => Err(Error::shape(
            "layer_norm",
            format!("expected rank 2..=4 input, got rank {r}"),
        )),
    }
}

impl Tape {
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let in_t = self.value(input).clone();
        let w_t = self.value(weight).clone();
        let b_t = bias.map(|b| self.value(b).clone());
        let dims = ConvDims::resolve(
            in_t.shape(),
            w_t.shape(),
            spec.stride,
            spec.padding,
            spec.groups,
        )?;
        let out = conv2d_forward(&in_t, &w_t, b_t.as_ref(), &dims)?;

        let mut parents = vec![input, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |g| {
                let mut grads = vec![
                    conv2d_backward_input(g, &w_t, &dims),
                    conv2d_backward_weight(g, &in_t, &dims),
                ];
                if has_bias {
                    grads.push(conv2d_backward_bias(g, &dims));
                }
                grads
            })),
            "conv2d",
        ))
    }

    /// Normalizes over the channel axis (spatial maps) or the embedding axis
    /// (token sequences), then applies the learnable affine.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::param("layer_norm", format!("eps must be > 0, got {eps}")));
        }
        let x = self.value(input).clone();
        let g_t = self.value(gain).clone();
        let b_t = self.value(bias).clone();
        let (outer, c, inner) = norm_view(x.shape())?;
        if g_t.shape() != [c] || b_t.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must both be [{c}]",
                    g_t.shape(),
                    b_t.shape()
                ),
            ));
        }

        let xd = x.data();
        let gd = g_t.data();
        let bd = b_t.data();
        let mut out = vec![0.0f64; xd.len()];
        let mut xhat = vec![0.0f64; xd.len()];
        let mut inv_sigma = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * c * inner + i;
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += xd[base + ch * inner];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = xd[base + ch * inner] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_sigma[o * inner + i] = inv;
                for ch in 0..c {
                    let idx = base + ch * inner;
                    let xh = (xd[idx] - mean) * inv;
                    xhat[idx] = xh;
                    out[idx] = gd[ch] * xh + bd[ch];
                }
            }
        }

        let out = Tensor::new(x.shape().to_vec(), out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.push(
            out,
            vec![input, gain, bias],
            Some(Box::new(move |g| {
                let gv = g.data();
                let gaind = g_t.data();
                let mut dx = vec![0.0f64; gv.len()];
                let mut dgain = vec![0.0f64; c];
                let mut dbias = vec![0.0f64; c];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * c * inner + i;
                        let inv = inv_sigma[o * inner + i];
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for ch in 0..c {
                            let idx = base + ch * inner;
                            let h = gv[idx] * gaind[ch];
                            mean_h += h;
                            mean_hx += h * xhat[idx];
                            dgain[ch] += gv[idx] * xhat[idx];
                            dbias[ch] += gv[idx];
                        }
                        mean_h /= c as f64;
                        mean_hx /= c as f64;
                        for ch in 0..c {
                            let idx = base + ch * inner;
                            let h = gv[idx] * gaind[ch];
                            dx[idx] = inv * (h - mean_h - xhat[idx] * mean_hx);
                        }
                    }
                }
                vec![
                    Tensor::new(in_shape.clone(), dx).expect("shape preserved"),
                    Tensor::new(vec![c], dgain).expect("shape preserved"),
                    Tensor::new(vec![c], dbias).expect("shape preserved"),
                ]
            })),
            "layer_norm",
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let in_t = self.value(x).clone();
        let out = in_t.map(|v| v.max(0.0));
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let data = in_t
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Tensor::new(in_t.shape().to_vec(), data).expect("shape preserved")]
            })),
            "relu",
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_sigmoid);
        let out_capture = out.clone();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let data = out_capture
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                vec![Tensor::new(out_capture.shape().to_vec(), data).expect("shape preserved")]
            })),
            "sigmoid",
        )
    }

    pub fn bilinear_upsample_x2(&mut self, x: Var) -> Result<Var> {
        let in_t = self.value(x);
        if in_t.shape().len() != 4 {
            return Err(Error::shape(
                "bilinear_upsample_x2",
                format!("expected [B,C,H,W], got {:?}", in_t.shape()),
            ));
        }
        let in_shape = in_t.shape().to_vec();
        let out = upsample_x2_forward(in_t);
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![upsample_x2_backward(g, &in_shape)])),
            "bilinear_upsample_x2",
        ))
    }

    /// Batched matrix product `[...,M,K] x [...,K,P]`. A rank-2 rhs is shared
    /// across the lhs batch (the linear-layer case).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_t = self.value(a).clone();
        let b_t = self.value(b).clone();
        let out = matmul_raw(&a_t, &b_t)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                // da = g . b^T ; db = a^T . g (summed over batch if b shared)
                let bt = transpose_last2_raw(&b_t);
                let da = matmul_raw(g, &bt).expect("shapes validated in forward");
                let shared_rhs = b_t.shape().len() == 2;
                let db = if shared_rhs && a_t.shape().len() > 2 {
                    let (batch, m, k) = matrix_view(a_t.shape()).expect("validated");
                    let a2 = a_t
                        .reshaped(vec![batch * m, k])
                        .expect("element count preserved");
                    let g2 = g
                        .reshaped(vec![batch * m, g.shape()[g.shape().len() - 1]])
                        .expect("element count preserved");
                    let a2t = transpose_last2_raw(&a2);
                    matmul_raw(&a2t, &g2).expect("shapes validated")
                } else {
                    let at = transpose_last2_raw(&a_t);
                    matmul_raw(&at, g).expect("shapes validated")
                };
                vec![da, db]
            })),
            "matmul",
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 2 {
            return Err(Error::shape(
                "transpose_last2",
                format!("rank {} < 2", t.shape().len()),
            ));
        }
        let out = transpose_last2_raw(t);
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![transpose_last2_raw(g)])),
            "transpose",
        ))
    }

    /// Inverted dropout: each element zeroed with probability `rate` in
    /// training mode, survivors scaled by `1/(1-rate)`; identity in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param(
                "dropout",
                format!("rate must be in [0,1), got {rate}"),
            ));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let in_t = self.value(x).clone();
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..in_t.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = in_t
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::new(in_t.shape().to_vec(), data)?;
        let shape = in_t.shape().to_vec();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gv, &m)| gv * m)
                    .collect();
                vec![Tensor::new(shape.clone(), data).expect("shape preserved")]
            })),
            "dropout",
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
            "add",
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary_zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.map(|v| -v)])),
            "sub",
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_t = self.value(a).clone();
        let b_t = self.value(b).clone();
        let out = binary_zip(&a_t, &b_t, "mul", |x, y| x * y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = binary_zip(g, &b_t, "mul", |gv, y| gv * y).expect("shape preserved");
                let db = binary_zip(g, &a_t, "mul", |gv, x| gv * x).expect("shape preserved");
                vec![da, db]
            })),
            "mul",
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_t = self.value(a).clone();
        let b_t = self.value(b).clone();
        let out = binary_zip(&a_t, &b_t, "div", |x, y| x / y)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = binary_zip(g, &b_t, "div", |gv, y| gv / y).expect("shape preserved");
                let db_data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(a_t.data().iter().zip(b_t.data().iter()))
                    .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                    .collect();
                let db = Tensor::new(b_t.shape().to_vec(), db_data).expect("shape preserved");
                vec![da, db]
            })),
            "div",
        ))
    }

    /// `a*x + b` with scalar constants.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![g.map(|gv| a * gv)])),
            "affine",
        )
    }

    /// Elementwise subtraction of a constant (non-differentiated) tensor.
    pub fn sub_const(&mut self, x: Var, k: &Tensor) -> Result<Var> {
        let out = binary_zip(self.value(x), k, "sub_const", |v, kv| v - kv)?;
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| vec![g.clone()])),
            "sub_const",
        ))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, x: Var, k: &Tensor) -> Result<Var> {
        let out = binary_zip(self.value(x), k, "mul_const", |v, kv| v * kv)?;
        let k = k.clone();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![binary_zip(g, &k, "mul_const", |gv, kv| gv * kv).expect("shape preserved")]
            })),
            "mul_const",
        ))
    }

    /// Broadcast add of a `[D]` bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let x_t = self.value(x).clone();
        let b_t = self.value(bias);
        let d = *x_t.shape().last().expect("non-empty shape");
        if b_t.shape() != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match last axis {d}", b_t.shape()),
            ));
        }
        let bd = b_t.data().to_vec();
        let data = x_t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let out = Tensor::new(x_t.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            vec![x, bias],
            Some(Box::new(move |g| {
                let mut db = vec![0.0f64; d];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % d] += gv;
                }
                vec![
                    g.clone(),
                    Tensor::new(vec![d], db).expect("shape preserved"),
                ]
            })),
            "add_bias",
        ))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let in_t = self.value(x).clone();
        let out = in_t.map(f64::ln);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(in_t.data().iter())
                    .map(|(&gv, &v)| gv / v)
                    .collect();
                vec![Tensor::new(in_t.shape().to_vec(), data).expect("shape preserved")]
            })),
            "ln",
        )
    }

    /// Elementwise `x^e` with a constant exponent. `e == 0` yields ones with
    /// zero gradient.
    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        let in_t = self.value(x).clone();
        let out = in_t.map(|v| v.powf(e));
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                if e == 0.0 {
                    return vec![Tensor::zeros(in_t.shape())];
                }
                let data = g
                    .data()
                    .iter()
                    .zip(in_t.data().iter())
                    .map(|(&gv, &v)| gv * e * v.powf(e - 1.0))
                    .collect();
                vec![Tensor::new(in_t.shape().to_vec(), data).expect("shape preserved")]
            })),
            "powf",
        )
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let in_t = self.value(x).clone();
        let out = in_t.map(f64::abs);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(in_t.data().iter())
                    .map(|(&gv, &v)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Tensor::new(in_t.shape().to_vec(), data).expect("shape preserved")]
            })),
            "abs",
        )
    }

    /// Clamp with pass-through gradient inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let in_t = self.value(x).clone();
        let out = in_t.map(|v| v.clamp(lo, hi));
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(in_t.data().iter())
                    .map(|(&gv, &v)| if v >= lo && v <= hi { gv } else { 0.0 })
                    .collect();
                vec![Tensor::new(in_t.shape().to_vec(), data).expect("shape preserved")]
            })),
            "clamp",
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let in_shape = self.value(x).shape().to_vec();
        let total: f64 = self.value(x).data().iter().sum();
        self.push(
            Tensor::scalar(total),
            vec![x],
            Some(Box::new(move |g| vec![Tensor::full(&in_shape, g.item())])),
            "sum",
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let in_shape = self.value(x).shape().to_vec();
        let n = self.value(x).numel() as f64;
        let total: f64 = self.value(x).data().iter().sum();
        self.push(
            Tensor::scalar(total / n),
            vec![x],
            Some(Box::new(move |g| {
                vec![Tensor::full(&in_shape, g.item() / n)]
            })),
            "mean",
        )
    }

    /// Concatenates same-rank tensors along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::param("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for rank {}", first.len()),
            ));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() {
                return Err(Error::shape("concat", format!("rank mismatch {s:?}")));
            }
            for (d, (&a, &b)) in s.iter().zip(first.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(
                        "concat",
                        format!("dim {d} differs: {a} vs {b}"),
                    ));
                }
            }
            axis_lens.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = axis_lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;

        let mut out = vec![0.0f64; outer * total_axis * inner];
        let mut offset = 0usize;
        for (&p, &alen) in parts.iter().zip(axis_lens.iter()) {
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * alen * inner;
                out[dst_base..dst_base + alen * inner]
                    .copy_from_slice(&src[src_base..src_base + alen * inner]);
            }
            offset += alen;
        }
        let out = Tensor::new(out_shape, out)?;

        let part_shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&p| self.value(p).shape().to_vec())
            .collect();
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut grads = Vec::with_capacity(part_shapes.len());
                let mut offset = 0usize;
                for (shape, &alen) in part_shapes.iter().zip(axis_lens.iter()) {
                    let mut part = vec![0.0f64; outer * alen * inner];
                    for o in 0..outer {
                        let src_base = (o * total_axis + offset) * inner;
                        let dst_base = o * alen * inner;
                        part[dst_base..dst_base + alen * inner]
                            .copy_from_slice(&gd[src_base..src_base + alen * inner]);
                    }
                    grads.push(Tensor::new(shape.clone(), part).expect("shape preserved"));
                    offset += alen;
                }
                grads
            })),
            "concat",
        ))
    }

    /// Reshape sharing the underlying buffer.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![g
                    .reshaped(in_shape.clone())
                    .expect("element count preserved")]
            })),
            "reshape",
        ))
    }
}
