//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep: the worst element found.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        }
    }

    fn update(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst_param = name.to_string();
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::param(
            "grad_check",
            format!("eps must be in [1e-7, 1e-3], got {eps}"),
        ));
    }
    Ok(())
}

/// Compares tape gradients against `(f(p+eps) - f(p-eps)) / (2 eps)` for every
/// element of every parameter. `f` must be deterministic; it is re-evaluated
/// on a fresh tape per probe. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let named: BTreeMap<String, Tensor> = params
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("p{i}"), t.clone()))
        .collect();
    grad_check_named(
        |tape, vars| {
            let ordered: Vec<Var> = (0..params.len()).map(|i| vars[&format!("p{i}")]).collect();
            f(tape, &ordered)
        },
        &named,
        eps,
    )
}

/// [`grad_check`] over a named parameter map (the model-facing form).
pub fn grad_check_named<F>(
    f: F,
    params: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    check_eps(eps)?;

    let eval = |probe: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: BTreeMap<String, Var> = probe
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::TapeUsage(format!(
                "grad_check function must return a scalar, got {:?}",
                v.shape()
            )));
        }
        Ok(v.item())
    };

    // Analytic gradients from one recorded pass.
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = params
        .iter()
        .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let analytic = tape.backward_params(loss, &vars)?;

    let mut report = GradCheckReport::empty();
    let mut probe = params.clone();
    for (name, base) in params {
        let grad = &analytic[name];
        for i in 0..base.numel() {
            let orig = base.data()[i];
            probe.insert(name.clone(), base.with_element(i, orig + eps));
            let plus = eval(&probe)?;
            probe.insert(name.clone(), base.with_element(i, orig - eps));
            let minus = eval(&probe)?;
            probe.insert(name.clone(), base.clone());
            let numeric = (plus - minus) / (2.0 * eps);
            report.update(name, i, grad.data()[i], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f = sum(x^2) away from 0
        let x = Tensor::new(vec![3], vec![1.5, -2.0, 0.7]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-8,
            "rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|tape, v| Ok(tape.sum(v[0])), &[x.clone()], 1e-2).is_err());
        assert!(grad_check(|tape, v| Ok(tape.sum(v[0])), &[x], 1e-8).is_err());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu evaluated ON the kink reports a mismatch: analytic rule says 0,
        // central differences say 0.5.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let r = tape.relu(vars[0]);
                Ok(tape.sum(r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 0.4);
    }
}
