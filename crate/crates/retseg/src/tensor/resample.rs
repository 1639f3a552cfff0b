//! Bilinear x2 upsampling with half-pixel centers and edge clamping.
//!
//! Output pixel `o` samples the source at `(o + 0.5) / 2 - 0.5`, clamped to
//! the valid range. The same convention (generalized to arbitrary scale) is
//! used by the image loader so fixtures stay bit-stable.

use super::Tensor;

/// Source taps for one output coordinate: indices of the two neighbours and
/// the weight of the upper one.
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample_x2_forward(input: &Tensor) -> Tensor {
    let shape = input.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let ytaps = bilinear_taps(oh, h);
    let xtaps = bilinear_taps(ow, w);
    let data = input.data();
    let mut out = vec![0.0f64; b * c * oh * ow];
    for plane in 0..b * c {
        let in_base = plane * h * w;
        let out_base = plane * oh * ow;
        for (y, &(y0, y1, wy)) in ytaps.iter().enumerate() {
            let r0 = in_base + y0 * w;
            let r1 = in_base + y1 * w;
            let orow = out_base + y * ow;
            for (x, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let top = data[r0 + x0] * (1.0 - wx) + data[r0 + x1] * wx;
                let bot = data[r1 + x0] * (1.0 - wx) + data[r1 + x1] * wx;
                out[orow + x] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).expect("shape computed")
}

/// Transpose of the interpolation: each output gradient is scattered onto its
/// four source taps with the forward weights.
pub(crate) fn upsample_x2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let ytaps = bilinear_taps(oh, h);
    let xtaps = bilinear_taps(ow, w);
    let g = grad_out.data();
    let mut grad_in = vec![0.0f64; b * c * h * w];
    for plane in 0..b * c {
        let in_base = plane * h * w;
        let out_base = plane * oh * ow;
        for (y, &(y0, y1, wy)) in ytaps.iter().enumerate() {
            let r0 = in_base + y0 * w;
            let r1 = in_base + y1 * w;
            let orow = out_base + y * ow;
            for (x, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                let gv = g[orow + x];
                grad_in[r0 + x0] += gv * (1.0 - wy) * (1.0 - wx);
                grad_in[r0 + x1] += gv * (1.0 - wy) * wx;
                grad_in[r1 + x0] += gv * wy * (1.0 - wx);
                grad_in[r1 + x1] += gv * wy * wx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), grad_in).expect("shape computed")
}
