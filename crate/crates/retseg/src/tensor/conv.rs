//! Direct 2-D convolution kernels (forward and the three backward passes).
//!
//! Layouts: input `[B, Cin, H, W]`, weight `[Cout, Cin/groups, kh, kw]`,
//! bias `[Cout]`, all row-major. Zero padding, floor output sizing:
//! `H' = (H + 2p - kh) / stride + 1`.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvDims {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<ConvDims> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [B,C,H,W], got {input_shape:?}"),
            ));
        }
        if weight_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [Cout,Cin/groups,kh,kw], got {weight_shape:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::param("conv2d", "stride must be >= 1"));
        }
        if groups == 0 {
            return Err(Error::param("conv2d", "groups must be >= 1"));
        }
        let (batch, cin, h, w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (cout, wc, kh, kw) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        if cin % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} not divisible by groups {groups}"),
            ));
        }
        if cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {cout} not divisible by groups {groups}"),
            ));
        }
        if wc != cin / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {wc} input channels per group, input supplies {}",
                    cin / groups
                ),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvDims {
            batch,
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            padding,
            groups,
        })
    }

    /// Output row/col range for which `o*stride + k - padding` stays in
    /// `[0, limit)`; empty ranges come back as `(1, 0)`.
    fn valid_range(&self, k: usize, limit: usize, out_limit: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi_num = limit + self.padding;
        if hi_num <= k {
            return (1, 0);
        }
        let hi = ((hi_num - 1 - k) / self.stride).min(out_limit - 1);
        (lo, hi)
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    dims: &ConvDims,
) -> Result<Tensor> {
    if let Some(b) = bias {
        if b.shape() != [dims.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} != [{}]", b.shape(), dims.cout),
            ));
        }
    }
    let d = *dims;
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let in_data = input.data();
    let w_data = weight.data();
    let out_plane = d.out_h * d.out_w;
    let mut out = vec![0.0f64; d.batch * d.cout * out_plane];

    out.par_chunks_mut(out_plane).enumerate().for_each(|(bc, plane)| {
        let b = bc / d.cout;
        let co = bc % d.cout;
        let g = co / cout_g;
        if let Some(bt) = bias {
            plane.fill(bt.data()[co]);
        }
        let w_base = co * cin_g * d.kh * d.kw;
        for ci_l in 0..cin_g {
            let ci = g * cin_g + ci_l;
            let in_base = (b * d.cin + ci) * d.h * d.w;
            for kh in 0..d.kh {
                let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.out_h);
                if oh_lo > oh_hi {
                    continue;
                }
                for kw in 0..d.kw {
                    let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.out_w);
                    if ow_lo > ow_hi {
                        continue;
                    }
                    let wv = w_data[w_base + (ci_l * d.kh + kh) * d.kw + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    for oh in oh_lo..=oh_hi {
                        let ih = oh * d.stride + kh - d.padding;
                        let in_row = in_base + ih * d.w;
                        let out_row = oh * d.out_w;
                        for ow in ow_lo..=ow_hi {
                            let iw = ow * d.stride + kw - d.padding;
                            plane[out_row + ow] += wv * in_data[in_row + iw];
                        }
                    }
                }
            }
        }
    });

    Tensor::new(vec![d.batch, d.cout, d.out_h, d.out_w], out)
}

pub(crate) fn conv2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    dims: &ConvDims,
) -> Tensor {
    let d = *dims;
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let g_data = grad_out.data();
    let w_data = weight.data();
    let in_plane = d.h * d.w;
    let mut grad_in = vec![0.0f64; d.batch * d.cin * in_plane];

    grad_in
        .par_chunks_mut(d.cin * in_plane)
        .enumerate()
        .for_each(|(b, gin)| {
            for co in 0..d.cout {
                let g = co / cout_g;
                let go_base = (b * d.cout + co) * d.out_h * d.out_w;
                let w_base = co * cin_g * d.kh * d.kw;
                for ci_l in 0..cin_g {
                    let ci = g * cin_g + ci_l;
                    let gi_base = ci * in_plane;
                    for kh in 0..d.kh {
                        let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.out_h);
                        if oh_lo > oh_hi {
                            continue;
                        }
                        for kw in 0..d.kw {
                            let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.out_w);
                            if ow_lo > ow_hi {
                                continue;
                            }
                            let wv = w_data[w_base + (ci_l * d.kh + kh) * d.kw + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for oh in oh_lo..=oh_hi {
                                let ih = oh * d.stride + kh - d.padding;
                                let go_row = go_base + oh * d.out_w;
                                let gi_row = gi_base + ih * d.w;
                                for ow in ow_lo..=ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    gin[gi_row + iw] += wv * g_data[go_row + ow];
                                }
                            }
                        }
                    }
                }
            }
        });

    Tensor::new(vec![d.batch, d.cin, d.h, d.w], grad_in).expect("shape computed")
}

pub(crate) fn conv2d_backward_weight(
    grad_out: &Tensor,
    input: &Tensor,
    dims: &ConvDims,
) -> Tensor {
    let d = *dims;
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let g_data = grad_out.data();
    let in_data = input.data();
    let w_elems = cin_g * d.kh * d.kw;
    let mut grad_w = vec![0.0f64; d.cout * w_elems];

    grad_w
        .par_chunks_mut(w_elems)
        .enumerate()
        .for_each(|(co, gw)| {
            let g = co / cout_g;
            for b in 0..d.batch {
                let go_base = (b * d.cout + co) * d.out_h * d.out_w;
                for ci_l in 0..cin_g {
                    let ci = g * cin_g + ci_l;
                    let in_base = (b * d.cin + ci) * d.h * d.w;
                    for kh in 0..d.kh {
                        let (oh_lo, oh_hi) = d.valid_range(kh, d.h, d.out_h);
                        if oh_lo > oh_hi {
                            continue;
                        }
                        for kw in 0..d.kw {
                            let (ow_lo, ow_hi) = d.valid_range(kw, d.w, d.out_w);
                            if ow_lo > ow_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oh in oh_lo..=oh_hi {
                                let ih = oh * d.stride + kh - d.padding;
                                let go_row = go_base + oh * d.out_w;
                                let in_row = in_base + ih * d.w;
                                for ow in ow_lo..=ow_hi {
                                    let iw = ow * d.stride + kw - d.padding;
                                    acc += g_data[go_row + ow] * in_data[in_row + iw];
                                }
                            }
                            gw[(ci_l * d.kh + kh) * d.kw + kw] += acc;
                        }
                    }
                }
            }
        });

    Tensor::new(vec![d.cout, cin_g, d.kh, d.kw], grad_w).expect("shape computed")
}

pub(crate) fn conv2d_backward_bias(grad_out: &Tensor, dims: &ConvDims) -> Tensor {
    let d = *dims;
    let g_data = grad_out.data();
    let plane = d.out_h * d.out_w;
    let mut grad_b = vec![0.0f64; d.cout];
    for b in 0..d.batch {
        for co in 0..d.cout {
            let base = (b * d.cout + co) * plane;
            let mut acc = 0.0;
            for i in 0..plane {
                acc += g_data[base + i];
            }
            grad_b[co] += acc;
        }
    }
    Tensor::new(vec![d.cout], grad_b).expect("shape computed")
}
