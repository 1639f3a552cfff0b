//! Composite training loss: weighted binary cross-entropy + focal + L1
//! reconstruction, with an optional soft-Dice term (weight 0 by default).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Loss weights. `total = alpha*bce + beta*focal + l1 + dice_weight*dice`.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub focal_gamma: f64,
    /// Optional extra term; 0 keeps the default three-term loss.
    pub dice_weight: f64,
    /// Probabilities are clamped to `[eps, 1-eps]` before any log.
    pub prob_clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            focal_gamma: 2.0,
            dice_weight: 0.0,
            prob_clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("focal_gamma", self.focal_gamma),
            ("dice_weight", self.dice_weight),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(
                    "loss_config",
                    format!("{name} must be finite and non-negative, got {v}"),
                ));
            }
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return Err(Error::param(
                "loss_config",
                format!(
                    "prob_clamp_eps must be in (0, 0.5), got {}",
                    self.prob_clamp_eps
                ),
            ));
        }
        Ok(())
    }
}

/// Per-term values of one loss evaluation, for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub focal: f64,
    pub l1: f64,
    pub dice: f64,
}

fn check_shapes(tape: &Tape, pred: Var, target: &Tensor, op: &'static str) -> Result<()> {
    let ps = tape.value(pred).shape();
    if ps != target.shape() {
        return Err(Error::shape(
            op,
            format!("pred {:?} vs target {:?}", ps, target.shape()),
        ));
    }
    Ok(())
}

fn complement(target: &Tensor) -> Tensor {
    target.map(|v| 1.0 - v)
}

/// Mean of `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[eps, 1-eps]`.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_shapes(tape, pred, target, "bce_loss")?;
    let p = tape.clamp(pred, eps, 1.0 - eps);
    let ln_p = tape.ln(p);
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let ln_1mp = tape.ln(one_minus_p);
    let pos = tape.mul_const(ln_p, target)?;
    let neg = tape.mul_const(ln_1mp, &complement(target))?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean(s);
    Ok(tape.affine(m, -1.0, 0.0))
}

/// Mean of `-(1-p_t)^gamma * ln(p_t)` with `p_t = p` where `y == 1`, `1-p`
/// where `y == 0`. `gamma == 0` reduces exactly to [`bce_loss`].
pub fn focal_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    focal_gamma: f64,
    eps: f64,
) -> Result<Var> {
    check_shapes(tape, pred, target, "focal_loss")?;
    let p = tape.clamp(pred, eps, 1.0 - eps);
    let pos = tape.mul_const(p, target)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let neg = tape.mul_const(one_minus_p, &complement(target))?;
    let p_t = tape.add(pos, neg)?;
    let hardness = tape.affine(p_t, -1.0, 1.0);
    let weight = tape.powf(hardness, focal_gamma);
    let ln_pt = tape.ln(p_t);
    let weighted = tape.mul(weight, ln_pt)?;
    let m = tape.mean(weighted);
    Ok(tape.affine(m, -1.0, 0.0))
}

/// Mean absolute difference (the reconstruction term).
pub fn l1_recon_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_shapes(tape, pred, target, "l1_recon_loss")?;
    let diff = tape.sub_const(pred, target)?;
    let a = tape.abs(diff);
    Ok(tape.mean(a))
}

/// Soft Dice loss `1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s)`.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    check_shapes(tape, pred, target, "dice_loss")?;
    let inter = {
        let prod = tape.mul_const(pred, target)?;
        tape.sum(prod)
    };
    let p_sum = tape.sum(pred);
    let y_sum: f64 = target.data().iter().sum();
    let numer = tape.affine(inter, 2.0, smooth);
    let denom = tape.affine(p_sum, 1.0, y_sum + smooth);
    let ratio = tape.div(numer, denom)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// The composite loss, returned with its per-term breakdown.
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let bce = bce_loss(tape, pred, target, config.prob_clamp_eps)?;
    let focal = focal_loss(
        tape,
        pred,
        target,
        config.focal_gamma,
        config.prob_clamp_eps,
    )?;
    let l1 = l1_recon_loss(tape, pred, target)?;
    let dice = dice_loss(tape, pred, target, 1.0)?;

    let weighted_bce = tape.affine(bce, config.alpha, 0.0);
    let weighted_focal = tape.affine(focal, config.beta, 0.0);
    let weighted_dice = tape.affine(dice, config.dice_weight, 0.0);
    let s1 = tape.add(weighted_bce, weighted_focal)?;
    let s2 = tape.add(s1, l1)?;
    let total = tape.add(s2, weighted_dice)?;

    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        bce: tape.value(bce).item(),
        focal: tape.value(focal).item(),
        l1: tape.value(l1).item(),
        dice: tape.value(dice).item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-7;

    fn t(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    fn eval_loss(f: impl Fn(&mut Tape, Var) -> Result<Var>, pred: &[f64]) -> f64 {
        let mut tape = Tape::no_grad();
        let p = tape.leaf(t(pred));
        let loss = f(&mut tape, p).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn bce_examples() {
        let target = t(&[1.0]);
        let v = eval_loss(|tape, p| bce_loss(tape, p, &target, EPS), &[0.5]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        // exact prediction bottoms out at the clamp floor
        let target = t(&[1.0, 0.0]);
        let v = eval_loss(|tape, p| bce_loss(tape, p, &target, EPS), &[1.0, 0.0]);
        assert!(v > 0.0 && v <= 1.1e-7, "clamp floor {v}");

        // symmetric mistakes cost the same
        let t1 = t(&[1.0]);
        let a = eval_loss(|tape, p| bce_loss(tape, p, &t1, EPS), &[0.9]);
        let t0 = t(&[0.0]);
        let b = eval_loss(|tape, p| bce_loss(tape, p, &t0, EPS), &[0.1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn focal_examples() {
        // easy example fully down-weighted
        let target = t(&[1.0]);
        let v = eval_loss(|tape, p| focal_loss(tape, p, &target, 2.0, EPS), &[1.0]);
        assert!(v < 1e-13, "focal on perfect prediction {v}");

        // 0.25 * ln 2 at p=0.5, gamma=2
        let v = eval_loss(|tape, p| focal_loss(tape, p, &target, 2.0, EPS), &[0.5]);
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_is_exactly_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 64;
            let pred: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let target: Vec<f64> = (0..n)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            let tt = t(&target);
            let f = eval_loss(|tape, p| focal_loss(tape, p, &tt, 0.0, EPS), &pred);
            let b = eval_loss(|tape, p| bce_loss(tape, p, &tt, EPS), &pred);
            assert!((f - b).abs() < 1e-12, "focal {f} vs bce {b}");
        }
    }

    #[test]
    fn l1_examples() {
        let target = t(&[0.25, 0.5, 1.0]);
        let v = eval_loss(|tape, p| l1_recon_loss(tape, p, &target), &[0.25, 0.5, 1.0]);
        assert_eq!(v, 0.0);

        let ones = t(&[1.0, 1.0, 1.0, 1.0]);
        let v = eval_loss(|tape, p| l1_recon_loss(tape, p, &ones), &[0.5, 0.5, 0.5, 0.5]);
        assert!((v - 0.5).abs() < 1e-15);

        // permutation invariance over pixels
        let target = t(&[1.0, 0.0, 1.0]);
        let a = eval_loss(|tape, p| l1_recon_loss(tape, p, &target), &[0.2, 0.7, 0.4]);
        let target_p = t(&[0.0, 1.0, 1.0]);
        let b = eval_loss(|tape, p| l1_recon_loss(tape, p, &target_p), &[0.7, 0.2, 0.4]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn dice_examples() {
        let ones = Tensor::ones(&[16]);
        let v = eval_loss(|tape, p| dice_loss(tape, p, &ones, 1.0), &[1.0; 16]);
        assert!(v.abs() < 1e-12);

        // all-zero prediction against all-one target approaches 1 as n grows
        let n = 10_000;
        let big_ones = Tensor::ones(&[n]);
        let mut tape = Tape::no_grad();
        let p = tape.leaf(Tensor::zeros(&[n]));
        let loss = dice_loss(&mut tape, p, &big_ones, 1.0).unwrap();
        let v = tape.value(loss).item();
        assert!(v > 0.999 && v < 1.0, "dice limit {v}");

        // both empty: smooth term makes the loss 0
        let zeros = Tensor::zeros(&[8]);
        let v = eval_loss(|tape, p| dice_loss(tape, p, &zeros, 1.0), &[0.0; 8]);
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn total_loss_composition() {
        let target = t(&[1.0, 0.0, 1.0, 0.0]);
        let pred = [1.0, 0.0, 1.0, 0.0];

        // bce-only weighting on a perfect prediction sits at the clamp floor
        let config = LossConfig {
            alpha: 1.0,
            beta: 0.0,
            dice_weight: 0.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::no_grad();
        let p = tape.leaf(t(&pred));
        let (_, down) = total_loss(&mut tape, p, &target, &config).unwrap();
        assert!(down.total < 1.1e-7, "near-zero total {}", down.total);

        // alpha = beta = dice = 0 leaves exactly the l1 term
        let config = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            dice_weight: 0.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::no_grad();
        let p = tape.leaf(t(&[0.75, 0.25, 0.5, 0.0]));
        let (_, down) = total_loss(&mut tape, p, &target, &config).unwrap();
        assert!((down.total - down.l1).abs() < 1e-15);

        // doubling alpha doubles the bce contribution exactly
        let base = LossConfig::default();
        let doubled = LossConfig {
            alpha: 2.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::no_grad();
        let p = tape.leaf(t(&[0.7, 0.3, 0.6, 0.2]));
        let (t1, d1) = total_loss(&mut tape, p, &target, &base).unwrap();
        let (t2, d2) = total_loss(&mut tape, p, &target, &doubled).unwrap();
        assert_eq!(d1.bce, d2.bce);
        let delta = tape.value(t2).item() - tape.value(t1).item();
        assert!((delta - d1.bce).abs() < 1e-12);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            prob_clamp_eps: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sigmoid_bce_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Tensor::from_fn(&[32], |_| rng.random::<f64>() * 6.0 - 3.0);
        let target = Tensor::from_fn(&[32], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let report = grad_check(
            |tape, vars| {
                let p = tape.sigmoid(vars[0]);
                bce_loss(tape, p, &target, EPS)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn total_loss_gradient_check_through_every_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::from_fn(&[24], |_| rng.random::<f64>() * 4.0 - 2.0);
        let target = Tensor::from_fn(&[24], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let config = LossConfig {
            alpha: 0.7,
            beta: 1.3,
            focal_gamma: 2.0,
            dice_weight: 0.5,
            prob_clamp_eps: 1e-7,
        };
        let report = grad_check(
            |tape, vars| {
                let p = tape.sigmoid(vars[0]);
                let (total, _) = total_loss(tape, p, &target, &config)?;
                Ok(total)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn total_loss_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let pred: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
            let target = Tensor::from_fn(&[16], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
            let mut tape = Tape::no_grad();
            let p = tape.leaf(t(&pred));
            let (_, down) = total_loss(&mut tape, p, &target, &LossConfig::default()).unwrap();
            assert!(down.total >= 0.0);
        }
    }
}
