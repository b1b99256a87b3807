use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Vector-Jacobian product of one recorded operation.
///
/// `inputs` holds the values of the operation's inputs in recording order,
/// `needs_grad[i]` tells whether input `i` wants a gradient. Entries for
/// inputs that do not need one may be returned as `None`.
pub trait BackwardOp: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Wengert list of recorded operations, topologically ordered by construction:
/// a record can only reference records created before it.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("records", &self.nodes.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.set_grad(None);
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
            grad: None,
        })
    }

    /// Records a leaf that does not track gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Records a leaf that tracks gradients.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn push(&mut self, node: Node) -> Var {
        let index = self.nodes.len();
        self.nodes.push(node);
        Var {
            tape: self.id,
            index,
        }
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(var)?].value)
    }

    pub fn shape(&self, var: Var) -> Result<&[usize]> {
        Ok(self.value(var)?.shape())
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.nodes[self.index(var)?].requires_grad)
    }

    /// True if any of `vars` tracks gradients; ops use this to decide whether
    /// intermediates need saving.
    pub fn any_requires_grad(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.requires_grad(v)?;
        }
        Ok(any)
    }

    /// Accumulated gradient of `var`, if backward reached it.
    pub fn grad(&self, var: Var) -> Result<Option<&[f64]>> {
        Ok(self.nodes[self.index(var)?].grad.as_deref())
    }

    /// Copy of the value with its gradient attached.
    pub fn tensor(&self, var: Var) -> Result<Tensor> {
        let node = &self.nodes[self.index(var)?];
        let mut t = node.value.clone().with_requires_grad(node.requires_grad);
        t.set_grad(node.grad.clone());
        Ok(t)
    }

    /// Appends the output of an operation. The output tracks gradients iff any
    /// input does; `op` is dropped otherwise.
    pub fn record(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        op: Box<dyn BackwardOp>,
    ) -> Result<Var> {
        let mut indices = Vec::with_capacity(inputs.len());
        let mut requires_grad = false;
        for &v in inputs {
            let i = self.index(v)?;
            requires_grad |= self.nodes[i].requires_grad;
            indices.push(i);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let mut value = value.with_requires_grad(false);
        value.set_grad(None);
        Ok(self.push(Node {
            value,
            inputs: indices,
            op: requires_grad.then_some(op),
            requires_grad,
            grad: None,
        }))
    }

    /// Resets every gradient buffer, leaves included.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Drops every record and the intermediates they saved.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Interior gradients are recomputed from scratch; leaf gradients
    /// accumulate, so calling this twice without [`Tape::zero_grad`] doubles
    /// them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root = self.index(loss)?;
        let shape = self.nodes[root].value.shape().to_vec();
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NotScalar(shape));
        }
        for node in &mut self.nodes {
            if !node.is_leaf() {
                node.grad = None;
            }
        }
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        match &mut self.nodes[root].grad {
            Some(g) => g[0] += 1.0,
            slot @ None => *slot = Some(vec![1.0]),
        }

        for i in (0..=root).rev() {
            let contributions = {
                let node = &self.nodes[i];
                let (Some(op), Some(grad)) = (node.op.as_ref(), node.grad.as_ref()) else {
                    continue;
                };
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect();
                let grads = op.backward(&inputs, &node.value, grad, &needs);
                debug_assert_eq!(grads.len(), node.inputs.len());
                for (g, &j) in grads.iter().zip(&node.inputs) {
                    if let Some(g) = g {
                        debug_assert_eq!(g.len(), self.nodes[j].value.len(), "{}", op.name());
                        if !super::all_finite(g) {
                            return Err(Error::NonFinite {
                                op: format!("backward of {}", op.name()),
                            });
                        }
                    }
                }
                node.inputs
                    .clone()
                    .into_iter()
                    .zip(grads)
                    .collect::<Vec<_>>()
            };
            for (j, g) in contributions {
                let Some(g) = g else { continue };
                let target = &mut self.nodes[j];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::scalar(1.0));
        let _ = b.param(Tensor::scalar(2.0));
        assert!(matches!(b.value(x), Err(Error::NotOnTape)));
    }

    #[test]
    fn backward_requires_scalar_and_records() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(&[2], Fill::Constant(1.0)).unwrap());
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
        let mut empty = Tape::new();
        let y = t.param(Tensor::scalar(0.0));
        assert!(matches!(empty.backward(y), Err(Error::EmptyTape)));
    }

    #[test]
    fn clear_frees_records() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[6.0]);
        t.clear();
        assert!(t.is_empty());
        assert!(matches!(t.value(x), Err(Error::NotOnTape)));
    }

    #[test]
    fn second_backward_doubles_leaf_gradients() {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[2.0, 2.0, 2.0]);
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().unwrap(), &[1.0, 1.0, 1.0]);
    }
}
