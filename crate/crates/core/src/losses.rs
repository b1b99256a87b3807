//! Segmentation objectives and the overall training loss.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{BackwardOp, Tape, Tensor, Var};

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTHING: f64 = 1e-5;

fn check_labels(shape: &[usize], labels: &LabelMap, op: &'static str) -> Result<()> {
    if shape.len() != 4 || labels.shape() != [shape[0], shape[2], shape[3]] {
        return Err(Error::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: labels.shape().to_vec(),
        });
    }
    labels.check_range(shape[1])
}

struct SoftmaxChannels;

impl BackwardOp for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let s = out.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let p = out.values();
        let mut d = vec![0.0; p.len()];
        for ni in 0..n {
            let base = ni * c * plane;
            for px in 0..plane {
                let dot: f64 = (0..c)
                    .map(|i| p[base + i * plane + px] * g[base + i * plane + px])
                    .sum();
                for i in 0..c {
                    let k = base + i * plane + px;
                    d[k] = p[k] * (g[k] - dot);
                }
            }
        }
        vec![Some(d)]
    }
}

/// Ordinary softmax over the channel axis of an N×C×H×W tensor.
pub fn softmax_channels(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lv = tape.value(logits)?;
    let s = lv.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: "expected N×C×H×W".into(),
        });
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let x = lv.values();
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for px in 0..plane {
            let max = (0..c)
                .map(|i| x[base + i * plane + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in 0..c {
                let e = (x[base + i * plane + px] - max).exp();
                out[base + i * plane + px] = e;
                sum += e;
            }
            for i in 0..c {
                out[base + i * plane + px] /= sum;
            }
        }
    }
    tape.record(
        Tensor::from_raw(s, out),
        &[logits],
        Box::new(SoftmaxChannels),
    )
}

struct DiceBackward {
    labels: Vec<usize>,
    /// Per class: intersection, Σp², Σg².
    sums: Vec<[f64; 3]>,
}

impl BackwardOp for DiceBackward {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let p = inputs[0].values();
        let cf = c as f64;
        let coef: Vec<(f64, f64)> = self
            .sums
            .iter()
            .map(|&[inter, pp, gg]| {
                let den = pp + gg + DICE_SMOOTHING;
                (
                    2.0 / den,
                    2.0 * (2.0 * inter + DICE_SMOOTHING) / (den * den),
                )
            })
            .collect();
        let mut d = vec![0.0; p.len()];
        for ni in 0..n {
            for cls in 0..c {
                let (a, b) = coef[cls];
                let off = (ni * c + cls) * plane;
                for px in 0..plane {
                    let gt = if self.labels[ni * plane + px] == cls {
                        1.0
                    } else {
                        0.0
                    };
                    d[off + px] = -g[0] / cf * (a * gt - b * p[off + px]);
                }
            }
        }
        vec![Some(d)]
    }
}

/// Soft Dice loss `1 − (1/C) Σ_c (2 Σ p g + s) / (Σ p² + Σ g² + s)`, with the
/// sums taken over the whole batch.
pub fn dice_loss(tape: &mut Tape, probs: Var, labels: &LabelMap) -> Result<Var> {
    let pv = tape.value(probs)?;
    let shape = pv.shape().to_vec();
    check_labels(&shape, labels, "dice_loss")?;
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let p = pv.values();
    for ni in 0..n {
        for px in 0..plane {
            let s: f64 = (0..c).map(|i| p[(ni * c + i) * plane + px]).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Domain {
                    op: "dice_loss",
                    reason: format!("probabilities at pixel {px} of sample {ni} sum to {s}"),
                });
            }
        }
    }
    let mut sums = vec![[0.0; 3]; c];
    for ni in 0..n {
        for cls in 0..c {
            let off = (ni * c + cls) * plane;
            for px in 0..plane {
                let v = p[off + px];
                sums[cls][1] += v * v;
                if labels.values()[ni * plane + px] == cls {
                    sums[cls][0] += v;
                    sums[cls][2] += 1.0;
                }
            }
        }
    }
    let mean_dice: f64 = sums
        .iter()
        .map(|&[inter, pp, gg]| (2.0 * inter + DICE_SMOOTHING) / (pp + gg + DICE_SMOOTHING))
        .sum::<f64>()
        / c as f64;
    let op = DiceBackward {
        labels: labels.values().to_vec(),
        sums,
    };
    tape.record(Tensor::scalar(1.0 - mean_dice), &[probs], Box::new(op))
}

/// Inverse-frequency class weights `total / (C · count_c)`, zero for absent
/// classes, rescaled to mean 1 over the present classes.
pub fn class_weights(labels: &LabelMap, classes: usize) -> Vec<f64> {
    let counts = labels.counts(classes);
    let total = labels.len() as f64;
    let mut w: Vec<f64> = counts
        .iter()
        .map(|&k| {
            if k == 0 {
                0.0
            } else {
                total / (classes as f64 * k as f64)
            }
        })
        .collect();
    let present = counts.iter().filter(|&&k| k > 0).count();
    if present > 0 {
        let mean = w.iter().sum::<f64>() / present as f64;
        w.iter_mut().for_each(|v| *v /= mean);
    }
    w
}

struct WceBackward {
    labels: Vec<usize>,
    weights: Vec<f64>,
    weight_sum: f64,
    probs: Vec<f64>,
}

impl BackwardOp for WceBackward {
    fn name(&self) -> &'static str {
        "weighted_cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut d = vec![0.0; self.probs.len()];
        for ni in 0..n {
            for px in 0..plane {
                let y = self.labels[ni * plane + px];
                let scale = g[0] * self.weights[y] / self.weight_sum;
                for i in 0..c {
                    let k = (ni * c + i) * plane + px;
                    let onehot = if i == y { 1.0 } else { 0.0 };
                    d[k] = scale * (self.probs[k] - onehot);
                }
            }
        }
        vec![Some(d)]
    }
}

/// Pixel-wise weighted cross-entropy on logits:
/// `Σ_p w_{y(p)} · (−log softmax(logits_p)_{y(p)}) / Σ_p w_{y(p)}` with the
/// batch's [`class_weights`].
pub fn weighted_cross_entropy(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<Var> {
    let lv = tape.value(logits)?;
    let shape = lv.shape().to_vec();
    check_labels(&shape, labels, "weighted_cross_entropy")?;
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let weights = class_weights(labels, c);
    let x = lv.values();
    let mut probs = vec![0.0; x.len()];
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for ni in 0..n {
        let base = ni * c * plane;
        for px in 0..plane {
            let y = labels.values()[ni * plane + px];
            let max = (0..c)
                .map(|i| x[base + i * plane + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..c)
                    .map(|i| (x[base + i * plane + px] - max).exp())
                    .sum::<f64>()
                    .ln();
            for i in 0..c {
                probs[base + i * plane + px] = (x[base + i * plane + px] - lse).exp();
            }
            total += weights[y] * (lse - x[base + y * plane + px]);
            weight_sum += weights[y];
        }
    }
    let op = WceBackward {
        labels: labels.values().to_vec(),
        weights,
        weight_sum,
        probs,
    };
    tape.record(Tensor::scalar(total / weight_sum), &[logits], Box::new(op))
}

/// Sum of squares over every listed trainable.
pub fn l2_penalty(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = tape.sum_squares(p)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Scalar terms of the overall loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub seg_a: f64,
    pub seg_b: f64,
    pub dice_a: f64,
    pub dice_b: f64,
    pub wce_a: f64,
    pub wce_b: f64,
    pub kd: f64,
    pub l2: f64,
    pub alpha: f64,
    pub eta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `seg_a + seg_b + (alpha/2)·kd + eta·l2`.
    pub fn recompute(&self) -> f64 {
        self.seg_a + self.seg_b + 0.5 * self.alpha * self.kd + self.eta * self.l2
    }
}

pub fn check_weights(alpha: f64, eta: f64) -> Result<()> {
    if !(alpha >= 0.0) || !(eta >= 0.0) {
        return Err(Error::Domain {
            op: "total_loss",
            reason: format!("loss weights must be non-negative (alpha {alpha}, eta {eta})"),
        });
    }
    Ok(())
}

/// Overall loss from scalar terms.
pub fn total_loss(seg_a: f64, seg_b: f64, kd: f64, l2: f64, alpha: f64, eta: f64) -> Result<f64> {
    check_weights(alpha, eta)?;
    Ok(seg_a + seg_b + 0.5 * alpha * kd + eta * l2)
}

/// Overall loss on a tape. A zero `alpha` leaves the KD term out of the graph
/// entirely, so it contributes neither value nor gradient.
pub fn total_loss_var(
    tape: &mut Tape,
    seg_a: Var,
    seg_b: Var,
    kd: Option<Var>,
    l2: Var,
    alpha: f64,
    eta: f64,
) -> Result<Var> {
    check_weights(alpha, eta)?;
    let mut total = tape.add(seg_a, seg_b)?;
    if let Some(kd) = kd.filter(|_| alpha > 0.0) {
        let k = tape.scale(kd, 0.5 * alpha)?;
        total = tape.add(total, k)?;
    }
    let r = tape.scale(l2, eta)?;
    tape.add(total, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &LabelMap, c: usize) -> Tensor {
        let s = labels.shape();
        let (n, plane) = (s[0], s[1] * s[2]);
        let mut v = vec![0.0; n * c * plane];
        for ni in 0..n {
            for px in 0..plane {
                v[(ni * c + labels.values()[ni * plane + px]) * plane + px] = 1.0;
            }
        }
        Tensor::from_vec(&[n, c, s[1], s[2]], v).unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).unwrap().item().unwrap()
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let labels = LabelMap::new(&[1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(onehot(&labels, 2));
        let d = dice_loss(&mut tape, p, &labels).unwrap();
        assert!(scalar(&tape, d) <= 1e-4);

        let flipped = LabelMap::new(&[1, 2, 2], vec![1, 0, 0, 1]).unwrap();
        let p = tape.constant(onehot(&flipped, 2));
        let d = dice_loss(&mut tape, p, &labels).unwrap();
        assert!((scalar(&tape, d) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn dice_uniform_two_class() {
        let labels = LabelMap::new(&[1, 2, 2], vec![0, 0, 1, 1]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[1, 2, 2, 2], crate::Fill::Constant(0.5)).unwrap());
        let d = dice_loss(&mut tape, p, &labels).unwrap();
        // Per class: Σpg = 1, Σp² = 1, Σg² = 2.
        let s = DICE_SMOOTHING;
        let expect = 1.0 - (2.0 + s) / (3.0 + s);
        assert!((scalar(&tape, d) - expect).abs() < 1e-15);
    }

    #[test]
    fn dice_rejects_unnormalized() {
        let labels = LabelMap::new(&[1, 1, 2], vec![0, 1]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[1, 2, 1, 2], crate::Fill::Constant(0.6)).unwrap());
        assert!(dice_loss(&mut tape, p, &labels).is_err());
    }

    #[test]
    fn wce_uniform_logits() {
        let ln2 = 2f64.ln();
        for labels in [vec![0, 1, 0, 1], vec![0, 0, 0, 1]] {
            let labels = LabelMap::new(&[1, 2, 2], labels).unwrap();
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
            let v = weighted_cross_entropy(&mut tape, l, &labels).unwrap();
            assert!((scalar(&tape, v) - ln2).abs() < 1e-12);
        }
    }

    #[test]
    fn wce_imbalanced_by_direct_summation() {
        let labels = LabelMap::new(&[1, 2, 2], vec![0, 0, 0, 1]).unwrap();
        let w = class_weights(&labels, 2);
        // Raw weights 2/3 and 2, mean 4/3 → 0.5 and 1.5.
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 1.5).abs() < 1e-15);
        let per_pixel = 2f64.ln();
        let direct = (3.0 * w[0] * per_pixel + w[1] * per_pixel) / (3.0 * w[0] + w[1]);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        let v = weighted_cross_entropy(&mut tape, l, &labels).unwrap();
        assert!((scalar(&tape, v) - direct).abs() < 1e-15);
    }

    #[test]
    fn wce_confident_correct_is_near_zero() {
        let labels = LabelMap::new(&[1, 1, 2], vec![0, 1]).unwrap();
        let mut t = onehot(&labels, 2);
        t.values_mut().iter_mut().for_each(|v| *v *= 60.0);
        let mut tape = Tape::new();
        let l = tape.constant(t);
        let v = weighted_cross_entropy(&mut tape, l, &labels).unwrap();
        assert!(scalar(&tape, v) < 1e-20);
        let bad = LabelMap::new(&[1, 1, 2], vec![0, 2]).unwrap();
        assert!(weighted_cross_entropy(&mut tape, l, &bad).is_err());
    }

    #[test]
    fn absent_class_weight_is_zero() {
        let labels = LabelMap::new(&[1, 1, 4], vec![0, 0, 2, 2]).unwrap();
        let w = class_weights(&labels, 3);
        assert_eq!(w[1], 0.0);
        assert!((w[0] + w[2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn l2_examples() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[3]).unwrap());
        let v = l2_penalty(&mut tape, &[z]).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);
        let k = tape.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let v = l2_penalty(&mut tape, &[k]).unwrap();
        assert_eq!(scalar(&tape, v), 5.0);
        let v = l2_penalty(&mut tape, &[]).unwrap();
        assert_eq!(scalar(&tape, v), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 2.0, 0.4, 0.0, 0.5, 1e-4).unwrap() - 3.1).abs() < 1e-12);
        assert!((total_loss(0.0, 0.0, 0.0, 1000.0, 0.5, 1e-4).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(
            total_loss(1.0, 2.0, 0.4, 3.0, 0.0, 1e-4).unwrap(),
            total_loss(1.0, 2.0, 99.0, 3.0, 0.0, 1e-4).unwrap()
        );
        assert!(total_loss(1.0, 1.0, 1.0, 1.0, -0.1, 0.0).is_err());
        assert!(total_loss(1.0, 1.0, 1.0, 1.0, 0.1, -1.0).is_err());
    }

    #[test]
    fn total_loss_is_affine_in_each_term() {
        let base = total_loss(0.3, 0.7, 0.2, 50.0, 0.5, 1e-4).unwrap();
        let probes = [
            (total_loss(1.3, 0.7, 0.2, 50.0, 0.5, 1e-4).unwrap(), 1.0),
            (total_loss(0.3, 1.7, 0.2, 50.0, 0.5, 1e-4).unwrap(), 1.0),
            (total_loss(0.3, 0.7, 1.2, 50.0, 0.5, 1e-4).unwrap(), 0.25),
            (total_loss(0.3, 0.7, 0.2, 51.0, 0.5, 1e-4).unwrap(), 1e-4),
        ];
        for (v, slope) in probes {
            assert!((v - base - slope).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_total_matches_scalar_total() {
        let mut tape = Tape::new();
        let vals = [0.9, 1.1, 0.35, 12.0];
        let [a, b, k, r] = vals.map(|v| tape.param(Tensor::scalar(v)));
        let t = total_loss_var(&mut tape, a, b, Some(k), r, 0.5, 1e-4).unwrap();
        let expect = total_loss(0.9, 1.1, 0.35, 12.0, 0.5, 1e-4).unwrap();
        assert!((scalar(&tape, t) - expect).abs() < 1e-12);
        tape.backward(t).unwrap();
        assert_eq!(tape.grad(k).unwrap().unwrap(), &[0.25]);

        let t0 = total_loss_var(&mut tape, a, b, Some(k), r, 0.0, 1e-4).unwrap();
        tape.zero_grad();
        tape.backward(t0).unwrap();
        assert!(tape.grad(k).unwrap().is_none());
    }
}
