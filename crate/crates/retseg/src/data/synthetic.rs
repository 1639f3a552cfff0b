//! Synthetic blob-polyp generator: textured backgrounds with 1-3 brighter
//! elliptical blobs whose union is the exact ground-truth mask. Stands in
//! for clinical data at desk scale; everything is a pure function of
//! `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::seeds::{mix_seed, STREAM_SAMPLE};
use crate::tensor::Tensor;

/// Blob-generation knobs. Area bounds apply to the ellipse union.
#[derive(Clone, Debug)]
pub struct BlobParams {
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_area_frac: f64,
    pub max_area_frac: f64,
    /// Side length of the coarse noise grid smoothed into the background.
    pub noise_cells: usize,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            min_blobs: 1,
            max_blobs: 3,
            min_area_frac: 0.02,
            max_area_frac: 0.40,
            noise_cells: 6,
        }
    }
}

/// A rotated ellipse; `contains` is the analytic membership predicate the
/// mask is generated from (and that tests re-evaluate as the oracle).
#[derive(Clone, Copy, Debug)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub phi: f64,
}

impl Ellipse {
    /// True when pixel center `(x, y)` (column, row) lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (sin, cos) = self.phi.sin_cos();
        let u = (dx * cos + dy * sin) / self.a;
        let v = (-dx * sin + dy * cos) / self.b;
        u * u + v * v <= 1.0
    }
}

fn union_mask(ellipses: &[Ellipse], size: usize) -> (Vec<f64>, usize) {
    let mut mask = vec![0.0f64; size * size];
    let mut area = 0usize;
    for y in 0..size {
        for x in 0..size {
            if ellipses.iter().any(|e| e.contains(x as f64, y as f64)) {
                mask[y * size + x] = 1.0;
                area += 1;
            }
        }
    }
    (mask, area)
}

fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize, lo: f64, hi: f64) -> Vec<f64> {
    let coarse: Vec<f64> = (0..cells * cells)
        .map(|_| rng.random_range(lo..hi))
        .collect();
    let xt = crate::tensor::bilinear_taps_for(size, cells);
    let mut out = vec![0.0f64; size * size];
    for (y, &(y0, y1, wy)) in xt.iter().enumerate() {
        for (x, &(x0, x1, wx)) in xt.iter().enumerate() {
            let top = coarse[y0 * cells + x0] * (1.0 - wx) + coarse[y0 * cells + x1] * wx;
            let bot = coarse[y1 * cells + x0] * (1.0 - wx) + coarse[y1 * cells + x1] * wx;
            out[y * size + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Builds sample `index` of the dataset keyed by `seed`: smoothed-noise
/// background, brighter textured ellipses, and the exact union mask.
/// Returns the sampled ellipses so tests can re-evaluate the predicate.
pub fn synthesize_sample(
    seed: u64,
    index: usize,
    size: usize,
    params: &BlobParams,
) -> (Sample, Vec<Ellipse>) {
    assert!(size >= 16, "synthetic images need size >= 16, got {size}");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SAMPLE, index as u64));
    let s = size as f64;
    let total = (size * size) as f64;

    // Rejection-sample an ellipse set whose union area is in bounds. The rng
    // stream is deterministic, so the accepted set is too.
    let mut accepted: Option<(Vec<Ellipse>, Vec<f64>)> = None;
    for _ in 0..200 {
        let count = rng.random_range(params.min_blobs..=params.max_blobs);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| Ellipse {
                cx: rng.random_range(0.22 * s..0.78 * s),
                cy: rng.random_range(0.22 * s..0.78 * s),
                a: rng.random_range(0.08 * s..0.26 * s),
                b: rng.random_range(0.08 * s..0.26 * s),
                phi: rng.random_range(0.0..std::f64::consts::PI),
            })
            .collect();
        let (mask, area) = union_mask(&ellipses, size);
        let frac = area as f64 / total;
        if frac >= params.min_area_frac && frac <= params.max_area_frac {
            accepted = Some((ellipses, mask));
            break;
        }
    }
    let (ellipses, mask) = accepted.unwrap_or_else(|| {
        // guaranteed-compliant fallback: one centered disc of ~12.6% area
        let disc = Ellipse {
            cx: 0.5 * s,
            cy: 0.5 * s,
            a: 0.2 * s,
            b: 0.2 * s,
            phi: 0.0,
        };
        let (mask, _) = union_mask(&[disc], size);
        (vec![disc], mask)
    });

    // Background: smoothed noise per channel, gentle per-pixel jitter.
    let mut channels = Vec::with_capacity(3);
    for _ in 0..3 {
        channels.push(smooth_noise(&mut rng, size, params.noise_cells, 0.15, 0.50));
    }
    // Blob appearance: a brighter tint per channel with its own texture.
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(0.55..0.85)).collect();
    let mut image = vec![0.0f64; 3 * size * size];
    for pix in 0..size * size {
        let inside = mask[pix] == 1.0;
        let jitter = rng.random_range(-0.04..0.04);
        for c in 0..3 {
            let v = if inside {
                0.25 * channels[c][pix] + tint[c] + jitter
            } else {
                channels[c][pix] + jitter
            };
            image[c * size * size + pix] = v.clamp(0.0, 1.0);
        }
    }

    let sample = Sample {
        image: Tensor::new(vec![3, size, size], image).expect("shape computed"),
        mask: Tensor::new(vec![1, size, size], mask).expect("shape computed"),
        id: format!("synth-{index:05}"),
    };
    (sample, ellipses)
}

/// `n` deterministic samples for `(seed, size, params)`.
pub fn generate_synthetic_dataset(
    n: usize,
    size: usize,
    seed: u64,
    params: &BlobParams,
) -> Vec<Sample> {
    (0..n)
        .map(|i| synthesize_sample(seed, i, size, params).0)
        .collect()
}
