use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type GradFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

pub(crate) struct Node {
    value: Tensor,
    parents: Vec<Var>,
    /// Maps the gradient w.r.t. this node's output to gradients w.r.t. each
    /// parent, in `parents` order. `None` for leaves and non-recording tapes.
    grad_fn: Option<GradFn>,
    op: &'static str,
}

/// Ordered record of executed operations.
///
/// Every forward op pushes one node holding its output value, its input
/// references and a local gradient rule. [`Tape::backward`] replays the
/// record in exact reverse execution order, accumulating gradients
/// additively, so a value consumed k times receives the sum of k
/// contributions.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that stores values but no gradient rules; used for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input value (parameter or data) with no gradient rule.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, "leaf")
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        grad_fn: Option<GradFn>,
        op: &'static str,
    ) -> Var {
        let node = if self.recording {
            Node {
                value,
                parents,
                grad_fn,
                op,
            }
        } else {
            Node {
                value,
                parents: Vec::new(),
                grad_fn: None,
                op,
            }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`. Returns one gradient slot per
    /// node; nodes the loss does not depend on keep `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::TapeUsage(
                "backward on a no-grad tape".to_string(),
            ));
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::TapeUsage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(grad_fn) = &node.grad_fn {
                let parent_grads = grad_fn(&grad_out);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, g) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        g.shape(),
                        self.nodes[parent.0].value.shape(),
                        "gradient shape mismatch from op {}",
                        node.op
                    );
                    grads[parent.0] = Some(match grads[parent.0].take() {
                        Some(acc) => acc.add(&g)?,
                        None => g,
                    });
                }
            }
            grads[idx] = Some(grad_out);
        }

        Ok(Gradients { grads })
    }

    /// Backward pass resolved against a name -> leaf map. Parameters the loss
    /// never touched come back as zero tensors of the parameter's shape.
    pub fn backward_params(
        &self,
        loss: Var,
        params: &BTreeMap<String, Var>,
    ) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in params {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*var).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::TapeUsage(_))));
    }

    #[test]
    fn loss_sum_of_squares() {
        // loss = sum(x^2) at x = [3] -> grad [6]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreached_parameter_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let p = tape.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let loss = tape.mul(x, x).unwrap();
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), x);
        params.insert("p".to_string(), p);
        let grads = tape.backward_params(loss, &params).unwrap();
        assert_eq!(grads["x"].data(), &[4.0]);
        assert_eq!(grads["p"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_gradient() {
        // loss = sum(relu(x)) at x = [-1, 2] -> grad [0, 1]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let loss = tape.sum(r);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn value_used_twice_accumulates_two_contributions() {
        // loss = sum(x + x) -> grad 2 per element
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![5.0, -1.0]).unwrap());
        let s = tape.add(x, x).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn no_grad_tape_stores_values_only() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert!(tape.backward(y).is_err());
    }
}
