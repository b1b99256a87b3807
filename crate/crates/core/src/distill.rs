//! Class-confusion distillation.
//!
//! For every class `c`, the pre-softmax activations of all pixels labelled `c`
//! are averaged channel by channel into a C-vector `z_c`; a temperature
//! softmax turns it into `p_c`, the distribution over classes the network
//! assigns to class-`c` pixels. Stacking the rows gives a C×C row-stochastic
//! confusion matrix `q` per modality. [`kd_loss`] aligns the two modalities'
//! matrices with a symmetric KL divergence, averaged over the classes present
//! on both sides. Gradients flow into both matrices.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::{BackwardOp, Tape, Tensor, Var};
use crate::Modality;

pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// Per-class mean logits: a C×C tensor whose row `c` is `z_c`. Rows of absent
/// classes hold zeros and are flagged in `present`.
#[derive(Debug, Clone)]
pub struct ClassLogits {
    pub z: Var,
    pub present: Vec<bool>,
}

struct DistillBackward {
    labels: Vec<usize>,
    counts: Vec<usize>,
    classes: usize,
    plane: usize,
}

impl BackwardOp for DistillBackward {
    fn name(&self) -> &'static str {
        "distill_class_logits"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let c = self.classes;
        let n = inputs[0].shape()[0];
        let mut d = vec![0.0; inputs[0].len()];
        for ni in 0..n {
            for p in 0..self.plane {
                let label = self.labels[ni * self.plane + p];
                let inv = 1.0 / self.counts[label] as f64;
                for i in 0..c {
                    d[(ni * c + i) * self.plane + p] = g[label * c + i] * inv;
                }
            }
        }
        vec![Some(d)]
    }
}

/// Averages `logits` (N×C×H×W) over the pixels of each class across the whole
/// batch.
pub fn distill_class_logits(
    tape: &mut Tape,
    logits: Var,
    labels: &LabelMap,
) -> Result<ClassLogits> {
    let lv = tape.value(logits)?;
    let shape = lv.shape().to_vec();
    if shape.len() != 4 || labels.shape() != [shape[0], shape[2], shape[3]] {
        return Err(Error::ShapeMismatch {
            op: "distill_class_logits",
            left: shape,
            right: labels.shape().to_vec(),
        });
    }
    let (n, c) = (shape[0], shape[1]);
    let plane = shape[2] * shape[3];
    labels.check_range(c)?;
    let counts = labels.counts(c);
    let vals = lv.values();
    let mut z = vec![0.0; c * c];
    for ni in 0..n {
        for p in 0..plane {
            let label = labels.values()[ni * plane + p];
            for i in 0..c {
                z[label * c + i] += vals[(ni * c + i) * plane + p];
            }
        }
    }
    for (row, &count) in counts.iter().enumerate() {
        if count > 0 {
            z[row * c..(row + 1) * c]
                .iter_mut()
                .for_each(|v| *v /= count as f64);
        }
    }
    let present = counts.iter().map(|&k| k > 0).collect();
    let op = DistillBackward {
        labels: labels.values().to_vec(),
        counts,
        classes: c,
        plane,
    };
    let z = tape.record(Tensor::from_raw(vec![c, c], z), &[logits], Box::new(op))?;
    Ok(ClassLogits { z, present })
}

struct SoftmaxRows {
    width: usize,
    temperature: f64,
}

impl BackwardOp for SoftmaxRows {
    fn name(&self) -> &'static str {
        "temperature_softmax"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let p = out.values();
        let mut d = vec![0.0; p.len()];
        for (row, (pr, gr)) in p.chunks(self.width).zip(g.chunks(self.width)).enumerate() {
            let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for i in 0..self.width {
                d[row * self.width + i] = pr[i] * (gr[i] - dot) / self.temperature;
            }
        }
        vec![Some(d)]
    }
}

/// Row-wise `softmax(z / T)` over the last axis, computed with max
/// subtraction. `T = 1` is the ordinary softmax.
pub fn temperature_softmax(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    if !(temperature >= 1.0) || !temperature.is_finite() {
        return Err(Error::Domain {
            op: "temperature_softmax",
            reason: format!("temperature must be >= 1, got {temperature}"),
        });
    }
    let zv = tape.value(z)?;
    let width = *zv.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(zv.len());
    for row in zv.values().chunks(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row
            .iter()
            .map(|v| ((v - max) / temperature).exp())
            .collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    let value = Tensor::from_raw(zv.shape().to_vec(), out);
    tape.record(value, &[z], Box::new(SoftmaxRows { width, temperature }))
}

/// A C×C confusion matrix on a tape together with its presence mask.
#[derive(Debug, Clone)]
pub struct ConfusionVar {
    pub q: Var,
    pub present: Vec<bool>,
    pub temperature: f64,
}

impl ConfusionVar {
    pub fn classes(&self) -> usize {
        self.present.len()
    }

    /// Detached copy with absent rows blanked out.
    pub fn snapshot(&self, tape: &Tape) -> Result<ConfusionDistribution> {
        let values = tape.value(self.q)?.values();
        let c = self.classes();
        let rows = self
            .present
            .iter()
            .enumerate()
            .map(|(row, &p)| p.then(|| values[row * c..(row + 1) * c].to_vec()))
            .collect();
        Ok(ConfusionDistribution {
            rows,
            temperature: self.temperature,
        })
    }
}

/// Logits → per-class means → temperature softmax.
pub fn distill_confusion(
    tape: &mut Tape,
    logits: Var,
    labels: &LabelMap,
    temperature: f64,
) -> Result<ConfusionVar> {
    let cl = distill_class_logits(tape, logits, labels)?;
    let q = temperature_softmax(tape, cl.z, temperature)?;
    Ok(ConfusionVar {
        q,
        present: cl.present,
        temperature,
    })
}

pub struct KdLoss {
    pub loss: Var,
    /// Number of classes present in both distributions (the normalizer).
    pub mutual: usize,
    /// Set when no class is present on both sides; `loss` is then 0.
    pub no_overlap: bool,
}

struct SymmetricKl {
    classes: usize,
    mutual: Vec<bool>,
    count: usize,
}

impl BackwardOp for SymmetricKl {
    fn name(&self) -> &'static str {
        "kd_loss"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].values(), inputs[1].values());
        let scale = g[0] / self.count as f64;
        let c = self.classes;
        let grad = |x: &[f64], y: &[f64]| {
            let mut d = vec![0.0; x.len()];
            for row in (0..c).filter(|&r| self.mutual[r]) {
                for i in row * c..(row + 1) * c {
                    // d/dx [x ln(x/y) + y ln(y/x)] = ln(x/y) + 1 - y/x
                    d[i] = scale * ((x[i] / y[i]).ln() + 1.0 - y[i] / x[i]);
                }
            }
            d
        };
        vec![needs[0].then(|| grad(a, b)), needs[1].then(|| grad(b, a))]
    }
}

/// `(1/M) Σ_c [KL(a_c ‖ b_c) + KL(b_c ‖ a_c)]` over the `M` classes present in
/// both distributions.
pub fn kd_loss(tape: &mut Tape, qa: &ConfusionVar, qb: &ConfusionVar) -> Result<KdLoss> {
    if qa.classes() != qb.classes() {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            left: vec![qa.classes()],
            right: vec![qb.classes()],
        });
    }
    if qa.temperature != qb.temperature {
        return Err(Error::Domain {
            op: "kd_loss",
            reason: format!(
                "temperature mismatch: {} vs {}",
                qa.temperature, qb.temperature
            ),
        });
    }
    let c = qa.classes();
    let mutual: Vec<bool> = qa
        .present
        .iter()
        .zip(&qb.present)
        .map(|(x, y)| *x && *y)
        .collect();
    let count = mutual.iter().filter(|&&m| m).count();
    if count == 0 {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(KdLoss {
            loss,
            mutual: 0,
            no_overlap: true,
        });
    }
    let (a, b) = (tape.value(qa.q)?.values(), tape.value(qb.q)?.values());
    let mut total = 0.0;
    for row in (0..c).filter(|&r| mutual[r]) {
        for i in row * c..(row + 1) * c {
            total += (a[i] - b[i]) * (a[i].ln() - b[i].ln());
        }
    }
    let value = Tensor::scalar(total / count as f64);
    let loss = tape.record(
        value,
        &[qa.q, qb.q],
        Box::new(SymmetricKl {
            classes: c,
            mutual,
            count,
        }),
    )?;
    Ok(KdLoss {
        loss,
        mutual: count,
        no_overlap: false,
    })
}

/// Detached confusion matrix: row `c` is `p_c`, or `None` for an absent class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionDistribution {
    pub rows: Vec<Option<Vec<f64>>>,
    pub temperature: f64,
}

impl ConfusionDistribution {
    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    /// `|self - other|` on rows present in both.
    pub fn abs_difference(&self, other: &Self) -> Vec<Option<Vec<f64>>> {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()),
                _ => None,
            })
            .collect()
    }

    /// Mean of `|self - other|` over entries of mutually present rows.
    pub fn mean_abs_difference(&self, other: &Self) -> Option<f64> {
        let diff = self.abs_difference(other);
        let vals: Vec<f64> = diff.into_iter().flatten().flatten().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// One line of the confusion snapshot log:
/// `iteration \t modality \t C \t row-major probabilities \t presence mask`.
/// Entries of absent rows are written as `-`; values use Rust's shortest
/// round-tripping float formatting.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRecord {
    pub iteration: usize,
    pub modality: Modality,
    pub distribution: ConfusionDistribution,
}

impl SnapshotRecord {
    pub fn to_line(&self) -> String {
        let c = self.distribution.classes();
        let mut probs = Vec::with_capacity(c * c);
        for row in &self.distribution.rows {
            match row {
                Some(r) => probs.extend(r.iter().map(|v| format!("{v:?}"))),
                None => probs.extend(std::iter::repeat_n("-".to_string(), c)),
            }
        }
        let mask: String = self
            .distribution
            .rows
            .iter()
            .map(|r| if r.is_some() { '1' } else { '0' })
            .collect();
        let mut line = String::new();
        let _ = write!(
            line,
            "{}\t{}\t{}\t{}\t{}\t{:?}",
            self.iteration,
            self.modality,
            c,
            probs.join(" "),
            mask,
            self.distribution.temperature
        );
        line
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("confusion record: {m}"));
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        if fields.len() != 6 {
            return Err(bad("expected six tab-separated fields"));
        }
        let iteration = fields[0].parse().map_err(|_| bad("iteration"))?;
        let modality = match fields[1] {
            "A" => Modality::A,
            "B" => Modality::B,
            _ => return Err(bad("modality")),
        };
        let c: usize = fields[2].parse().map_err(|_| bad("class count"))?;
        let probs: Vec<&str> = fields[3].split(' ').collect();
        let mask: Vec<char> = fields[4].chars().collect();
        if probs.len() != c * c || mask.len() != c {
            return Err(bad("extent mismatch"));
        }
        let temperature = fields[5].parse().map_err(|_| bad("temperature"))?;
        let mut rows = Vec::with_capacity(c);
        for (row, flag) in mask.iter().enumerate() {
            let cells = &probs[row * c..(row + 1) * c];
            rows.push(match flag {
                '1' => Some(
                    cells
                        .iter()
                        .map(|s| s.parse::<f64>().map_err(|_| bad("probability")))
                        .collect::<Result<Vec<_>>>()?,
                ),
                '0' => None,
                _ => return Err(bad("mask")),
            });
        }
        Ok(Self {
            iteration,
            modality,
            distribution: ConfusionDistribution { rows, temperature },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn confusion(tape: &mut Tape, rows: &[[f64; 2]], present: Vec<bool>) -> ConfusionVar {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let q = tape.param(Tensor::from_vec(&[2, 2], flat).unwrap());
        ConfusionVar {
            q,
            present,
            temperature: 2.0,
        }
    }

    #[test]
    fn class_means_small_example() {
        let mut tape = Tape::new();
        let logits = tape.constant(
            Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
        );
        let labels = LabelMap::new(&[1, 2, 2], vec![0, 0, 1, 1]).unwrap();
        let cl = distill_class_logits(&mut tape, logits, &labels).unwrap();
        assert_eq!(tape.value(cl.z).unwrap().values(), &[1.5, 0.0, 3.5, 1.0]);
        assert_eq!(cl.present, vec![true, true]);
    }

    #[test]
    fn constant_logits_and_absent_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[2, 3, 2, 2], Fill::Constant(0.7)).unwrap());
        let labels = LabelMap::new(&[2, 2, 2], vec![0; 8]).unwrap();
        let cl = distill_class_logits(&mut tape, logits, &labels).unwrap();
        assert_eq!(cl.present, vec![true, false, false]);
        assert!(tape.value(cl.z).unwrap().values()[..3]
            .iter()
            .all(|v| (v - 0.7).abs() < 1e-15));

        let bad = LabelMap::new(&[2, 2, 2], vec![3; 8]).unwrap();
        assert!(matches!(
            distill_class_logits(&mut tape, logits, &bad),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(&[2], vec![0.0, 3f64.ln()]).unwrap());
        let p = temperature_softmax(&mut tape, z, 1.0).unwrap();
        let v = tape.value(p).unwrap().values().to_vec();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let z = tape.constant(Tensor::from_vec(&[2], vec![0.0, 2.0 * 3f64.ln()]).unwrap());
        let p = temperature_softmax(&mut tape, z, 2.0).unwrap();
        let v = tape.value(p).unwrap().values().to_vec();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let z = tape.constant(Tensor::new(&[4], Fill::Constant(-3.0)).unwrap());
        let p = temperature_softmax(&mut tape, z, 5.0).unwrap();
        assert!(tape
            .value(p)
            .unwrap()
            .values()
            .iter()
            .all(|&x| (x - 0.25).abs() < 1e-15));

        assert!(temperature_softmax(&mut tape, z, 0.5).is_err());
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(&[3], vec![1000.0, 999.0, -1000.0]).unwrap());
        let p = temperature_softmax(&mut tape, z, 1.0).unwrap();
        let v = tape.value(p).unwrap().values();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_distributions_have_zero_loss() {
        let mut tape = Tape::new();
        let rows = [[0.8, 0.2], [0.3, 0.7]];
        let a = confusion(&mut tape, &rows, vec![true, true]);
        let b = confusion(&mut tape, &rows, vec![true, true]);
        let kd = kd_loss(&mut tape, &a, &b).unwrap();
        assert_eq!(tape.value(kd.loss).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn two_class_example_against_direct_sum() {
        let kl =
            |p: &[f64], q: &[f64]| -> f64 { p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum() };
        let ra = [[0.8, 0.2], [0.3, 0.7]];
        let rb = [[0.6, 0.4], [0.5, 0.5]];
        let oracle =
            (kl(&ra[0], &rb[0]) + kl(&rb[0], &ra[0]) + kl(&ra[1], &rb[1]) + kl(&rb[1], &ra[1]))
                / 2.0;
        let mut tape = Tape::new();
        let a = confusion(&mut tape, &ra, vec![true, true]);
        let b = confusion(&mut tape, &rb, vec![true, true]);
        let ab = kd_loss(&mut tape, &a, &b).unwrap();
        let ba = kd_loss(&mut tape, &b, &a).unwrap();
        let (vab, vba) = (
            tape.value(ab.loss).unwrap().item().unwrap(),
            tape.value(ba.loss).unwrap().item().unwrap(),
        );
        assert!((vab - oracle).abs() < 1e-12);
        assert_eq!(vab, vba);
    }

    #[test]
    fn mismatches_and_no_overlap() {
        let mut tape = Tape::new();
        let a = confusion(&mut tape, &[[0.5, 0.5], [0.5, 0.5]], vec![true, false]);
        let b = confusion(&mut tape, &[[0.4, 0.6], [0.5, 0.5]], vec![false, true]);
        let kd = kd_loss(&mut tape, &a, &b).unwrap();
        assert!(kd.no_overlap);
        assert_eq!(tape.value(kd.loss).unwrap().item().unwrap(), 0.0);

        let mut c = b.clone();
        c.temperature = 3.0;
        assert!(kd_loss(&mut tape, &a, &c).is_err());
        let q3 = tape.constant(Tensor::new(&[3, 3], Fill::Constant(1.0 / 3.0)).unwrap());
        let d = ConfusionVar {
            q: q3,
            present: vec![true; 3],
            temperature: 2.0,
        };
        assert!(kd_loss(&mut tape, &a, &d).is_err());
    }

    #[test]
    fn snapshot_line_roundtrip() {
        let rec = SnapshotRecord {
            iteration: 300,
            modality: Modality::B,
            distribution: ConfusionDistribution {
                rows: vec![Some(vec![0.7, 0.3]), None],
                temperature: 2.0,
            },
        };
        let line = rec.to_line();
        assert_eq!(line, "300\tB\t2\t0.7 0.3 - -\t10\t2.0");
        assert_eq!(SnapshotRecord::parse_line(&line).unwrap(), rec);
    }
}
