use super::tape::{BackwardOp, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Scale(f64),
}

impl ElementwiseKind {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// Pairs up elements of two operands, one of which may be a one-element scalar.
#[derive(Debug, Clone, Copy)]
enum Pairing {
    Same,
    LeftScalar,
    RightScalar,
}

fn pairing(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Pairing> {
    if a.shape() == b.shape() {
        Ok(Pairing::Same)
    } else if b.len() == 1 {
        Ok(Pairing::RightScalar)
    } else if a.len() == 1 {
        Ok(Pairing::LeftScalar)
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

#[inline]
fn pick(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

/// Folds a full-size gradient back onto an operand that may be a scalar.
fn fold(grad: Vec<f64>, target_len: usize) -> Vec<f64> {
    if target_len == 1 && grad.len() != 1 {
        vec![grad.iter().sum()]
    } else {
        grad
    }
}

struct Elementwise {
    kind: ElementwiseKind,
}

impl BackwardOp for Elementwise {
    fn name(&self) -> &'static str {
        match self.kind {
            ElementwiseKind::Add => "add",
            ElementwiseKind::Sub => "sub",
            ElementwiseKind::Mul => "mul",
            ElementwiseKind::Div => "div",
            ElementwiseKind::Exp => "exp",
            ElementwiseKind::Log => "log",
            ElementwiseKind::Relu => "relu",
            ElementwiseKind::Scale(_) => "scale",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let n = g.len();
        let a = inputs[0].values();
        match self.kind {
            ElementwiseKind::Exp => {
                vec![Some(
                    g.iter().zip(output.values()).map(|(g, y)| g * y).collect(),
                )]
            }
            ElementwiseKind::Log => vec![Some(g.iter().zip(a).map(|(g, x)| g / x).collect())],
            ElementwiseKind::Relu => vec![Some(
                g.iter()
                    .zip(a)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            ElementwiseKind::Scale(k) => vec![Some(g.iter().map(|g| g * k).collect())],
            kind => {
                let b = inputs[1].values();
                let ga = needs[0].then(|| {
                    let full: Vec<f64> = match kind {
                        ElementwiseKind::Add | ElementwiseKind::Sub => g.to_vec(),
                        ElementwiseKind::Mul => (0..n).map(|i| g[i] * pick(b, i)).collect(),
                        ElementwiseKind::Div => (0..n).map(|i| g[i] / pick(b, i)).collect(),
                        _ => unreachable!(),
                    };
                    fold(full, a.len())
                });
                let gb = needs[1].then(|| {
                    let full: Vec<f64> = match kind {
                        ElementwiseKind::Add => g.to_vec(),
                        ElementwiseKind::Sub => g.iter().map(|g| -g).collect(),
                        ElementwiseKind::Mul => (0..n).map(|i| g[i] * pick(a, i)).collect(),
                        ElementwiseKind::Div => (0..n)
                            .map(|i| {
                                let bi = pick(b, i);
                                -g[i] * pick(a, i) / (bi * bi)
                            })
                            .collect(),
                        _ => unreachable!(),
                    };
                    fold(full, b.len())
                });
                vec![ga, gb]
            }
        }
    }
}

struct Sum;

impl BackwardOp for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].len()])]
    }
}

struct SumSquares;

impl BackwardOp for SumSquares {
    fn name(&self) -> &'static str {
        "sum_squares"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            inputs[0].values().iter().map(|x| 2.0 * x * g[0]).collect(),
        )]
    }
}

impl Tape {
    /// Applies an elementwise operation. Binary kinds take `b`; `b` may also be
    /// a one-element scalar on either side.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let av = self.value(a)?;
        let (values, shape, inputs) = if kind.is_binary() {
            let b = b.ok_or_else(|| Error::Domain {
                op: "elementwise",
                reason: "binary operation needs a second operand".into(),
            })?;
            let bv = self.value(b)?;
            let op = Elementwise { kind }.name();
            let p = pairing(op, av, bv)?;
            let shape = match p {
                Pairing::LeftScalar => bv.shape().to_vec(),
                _ => av.shape().to_vec(),
            };
            let n = shape.iter().product::<usize>();
            let (x, y) = (av.values(), bv.values());
            if kind == ElementwiseKind::Div && y.contains(&0.0) {
                return Err(Error::Domain {
                    op: "div",
                    reason: "division by zero".into(),
                });
            }
            let f = |l: f64, r: f64| match kind {
                ElementwiseKind::Add => l + r,
                ElementwiseKind::Sub => l - r,
                ElementwiseKind::Mul => l * r,
                _ => l / r,
            };
            let values: Vec<f64> = (0..n).map(|i| f(pick(x, i), pick(y, i))).collect();
            (values, shape, vec![a, b])
        } else {
            if b.is_some() {
                return Err(Error::Domain {
                    op: "elementwise",
                    reason: "unary operation takes one operand".into(),
                });
            }
            let x = av.values();
            let values: Vec<f64> = match kind {
                ElementwiseKind::Exp => x.iter().map(|v| v.exp()).collect(),
                ElementwiseKind::Log => {
                    if x.iter().any(|&v| v <= 0.0) {
                        return Err(Error::Domain {
                            op: "log",
                            reason: "log of a non-positive value".into(),
                        });
                    }
                    x.iter().map(|v| v.ln()).collect()
                }
                ElementwiseKind::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                ElementwiseKind::Scale(k) => x.iter().map(|v| v * k).collect(),
                _ => unreachable!(),
            };
            (values, av.shape().to_vec(), vec![a])
        };
        let out = Tensor::from_raw(shape, values);
        self.record(out, &inputs, Box::new(Elementwise { kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, Some(b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Div, a, Some(b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Exp, a, None)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Log, a, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Relu, a, None)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.elementwise(ElementwiseKind::Scale(k), a, None)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a)?.values().iter().sum();
        self.record(Tensor::scalar(s), &[a], Box::new(Sum))
    }

    /// Sum of squared elements as a one-element tensor.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a)?.values().iter().map(|v| v * v).sum();
        self.record(Tensor::scalar(s), &[a], Box::new(SumSquares))
    }
}

impl Tensor {
    /// Builds a tensor from already validated parts.
    pub(crate) fn from_raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Mean and biased variance over `axes`, returned with those axes kept at
/// extent 1 so both broadcast against `x`.
pub fn reduce_stats(x: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    let rank = x.shape().len();
    if axes.is_empty() {
        return Err(Error::Domain {
            op: "reduce_stats",
            reason: "empty reduction set".into(),
        });
    }
    if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::Domain {
            op: "reduce_stats",
            reason: format!("axis {bad} out of range for rank {rank}"),
        });
    }
    let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
    let out_shape: Vec<usize> = x
        .shape()
        .iter()
        .zip(&reduced)
        .map(|(&e, &r)| if r { 1 } else { e })
        .collect();
    let out_len: usize = out_shape.iter().product();
    let count = x.len() / out_len;

    // Map each flat input index to its output slot.
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * out_shape[d + 1];
    }
    let slot_of = |mut flat: usize| {
        let mut slot = 0;
        for d in (0..rank).rev() {
            let e = x.shape()[d];
            let coord = flat % e;
            flat /= e;
            if !reduced[d] {
                slot += coord * strides[d];
            }
        }
        slot
    };

    let mut mean = vec![0.0; out_len];
    for (i, v) in x.values().iter().enumerate() {
        mean[slot_of(i)] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; out_len];
    for (i, v) in x.values().iter().enumerate() {
        let s = slot_of(i);
        let d = v - mean[s];
        var[s] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok((
        Tensor::from_raw(out_shape.clone(), mean),
        Tensor::from_raw(out_shape, var),
    ))
}
