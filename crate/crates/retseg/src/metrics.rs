//! Segmentation metrics (pixel counts pooled over the whole batch) and
//! throughput measurement.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{predict, RetSegConfig, RetSegParams};
use crate::tensor::Tensor;

/// One evaluation run's metrics. `fps` is filled only when throughput was
/// measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iou: f64,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mse: f64,
    pub fps: Option<f64>,
}

/// Streaming pixel-count pool so a dataset can be evaluated batch by batch;
/// `finish` applies the same conventions as [`compute_metrics`], which is
/// equivalent to one call on the concatenated tensors (micro-averaging).
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsAccumulator {
    tp: u64,
    fp: u64,
    fn_: u64,
    sq_err: f64,
    pixels: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_batch(&mut self, pred_prob: &Tensor, target: &Tensor, threshold: f64) -> Result<()> {
        if pred_prob.shape() != target.shape() {
            return Err(Error::shape(
                "compute_metrics",
                format!(
                    "pred {:?} vs target {:?}",
                    pred_prob.shape(),
                    target.shape()
                ),
            ));
        }
        for (&p, &y) in pred_prob.data().iter().zip(target.data()) {
            let pb = p >= threshold;
            let yb = y >= 0.5;
            match (pb, yb) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
            let d = p - y;
            self.sq_err += d * d;
        }
        self.pixels += pred_prob.numel() as u64;
        Ok(())
    }

    pub fn finish(&self) -> MetricsRecord {
        let (tp, fp, fn_) = (self.tp, self.fp, self.fn_);
        let mse = if self.pixels == 0 {
            0.0
        } else {
            self.sq_err / self.pixels as f64
        };
        let ratio = |num: u64, den: u64| -> f64 {
            if den == 0 {
                1.0 // only reachable when both masks are empty
            } else {
                num as f64 / den as f64
            }
        };
        let pred_empty = tp + fp == 0;
        let target_empty = tp + fn_ == 0;
        let both_empty = pred_empty && target_empty;

        let iou = ratio(tp, tp + fp + fn_);
        let dice = ratio(2 * tp, 2 * tp + fp + fn_);
        let precision = if pred_empty {
            if both_empty {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if target_empty {
            if both_empty {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            if both_empty {
                1.0
            } else {
                0.0
            }
        } else {
            2.0 * precision * recall / (precision + recall)
        };

        MetricsRecord {
            iou,
            dice,
            precision,
            recall,
            f1,
            mse,
            fps: None,
        }
    }
}

/// Binarizes `pred_prob` at `threshold` (probability >= threshold is
/// foreground) and pools TP/FP/FN/TN pixel counts over the whole input.
///
/// Division-by-zero conventions: a ratio whose denominator vanishes is 1.0
/// when both masks are empty (a perfect match) and 0.0 when exactly one is
/// empty. MSE always compares raw probabilities against the {0,1} target.
pub fn compute_metrics(
    pred_prob: &Tensor,
    target: &Tensor,
    threshold: f64,
) -> Result<MetricsRecord> {
    let mut acc = MetricsAccumulator::new();
    acc.add_batch(pred_prob, target, threshold)?;
    Ok(acc.finish())
}

/// Single-image eval-mode throughput: median of 3 runs, each timing
/// `iterations` forwards after `warmup` unmeasured ones.
pub fn measure_fps(
    params: &RetSegParams,
    config: &RetSegConfig,
    image_size: usize,
    iterations: usize,
    warmup: usize,
) -> Result<f64> {
    if iterations < 10 {
        return Err(Error::param(
            "measure_fps",
            format!("iterations must be >= 10, got {iterations}"),
        ));
    }
    if warmup < 3 {
        return Err(Error::param(
            "measure_fps",
            format!("warmup must be >= 3, got {warmup}"),
        ));
    }
    let mut bench_config = config.clone();
    bench_config.image_size = image_size;
    bench_config.validate()?;
    let image = Tensor::from_fn(&[1, config.input_channels, image_size, image_size], |i| {
        0.5 + 0.25 * ((i % 17) as f64 / 17.0)
    });

    let mut rates = Vec::with_capacity(3);
    for _ in 0..3 {
        for _ in 0..warmup {
            predict(params, &bench_config, &image)?;
        }
        let start = Instant::now();
        for _ in 0..iterations {
            predict(params, &bench_config, &image)?;
        }
        let elapsed = start.elapsed().as_secs_f64();
        rates.push(iterations as f64 / elapsed);
    }
    rates.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
    Ok(rates[1])
}
