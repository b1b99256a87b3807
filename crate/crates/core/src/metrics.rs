//! Per-class Dice and Hausdorff metrics and their aggregation into tables.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::Modality;

/// A 2-D binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("mask with {} values", values.len()),
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Pixels of a 2-D label map (or one slice of an N×H×W map) equal to `class`.
    pub fn from_labels(labels: &LabelMap, index: usize, class: usize) -> Result<Self> {
        let shape = labels.shape();
        let (h, w) = match *shape {
            [h, w] if index == 0 => (h, w),
            [n, h, w] if index < n => (h, w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: shape.to_vec(),
                    reason: format!("no 2-D slice {index}"),
                })
            }
        };
        let slice = &labels.values()[index * h * w..(index + 1) * h * w];
        Self::new(h, w, slice.iter().map(|&l| l == class).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    /// Mask pixels with a 4-neighbour outside the mask or on the image edge.
    pub fn boundary(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                out[y * w + x] = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
            }
        }
        Mask {
            height: h,
            width: w,
            values: out,
        }
    }

    fn check_same(&self, other: &Mask, op: &'static str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            });
        }
        Ok(())
    }
}

/// `100 · 2|P∩G| / (|P|+|G|)`; 100 when both masks are empty.
pub fn dice_coefficient(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same(gt, "dice_coefficient")?;
    let inter = pred
        .values
        .iter()
        .zip(&gt.values)
        .filter(|(&p, &g)| p && g)
        .count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Symmetric Hausdorff distance between the boundaries of two non-empty masks.
/// `spacing` is the physical pixel extent along (rows, columns).
pub fn hausdorff_distance(pred: &Mask, gt: &Mask, spacing: [f64; 2]) -> Result<f64> {
    pred.check_same(gt, "hausdorff_distance")?;
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Domain {
            op: "hausdorff_distance",
            reason: format!("spacing {spacing:?} must be positive"),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    if gt.is_empty() {
        return Err(Error::EmptyMask("ground truth"));
    }
    let bp = pred.boundary();
    let bg = gt.boundary();
    let d = directed_sq(&bp, &bg, spacing).max(directed_sq(&bg, &bp, spacing));
    Ok(d.sqrt())
}

/// Largest squared distance from a pixel of `from` to its nearest pixel of `to`.
fn directed_sq(from: &Mask, to: &Mask, spacing: [f64; 2]) -> f64 {
    let field = squared_distance_transform(to, spacing);
    from.values
        .iter()
        .zip(&field)
        .filter(|(&f, _)| f)
        .map(|(_, &d)| d)
        .fold(0.0, f64::max)
}

/// Exact squared Euclidean distance to the nearest set pixel, computed as a
/// lower envelope of parabolas along columns and then rows.
fn squared_distance_transform(mask: &Mask, spacing: [f64; 2]) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mut grid = vec![f64::INFINITY; h * w];
    for (g, &m) in grid.iter_mut().zip(&mask.values) {
        if m {
            *g = 0.0;
        }
    }
    let mut line = Vec::with_capacity(h.max(w));
    let mut out = Vec::with_capacity(h.max(w));
    for x in 0..w {
        line.clear();
        line.extend((0..h).map(|y| grid[y * w + x]));
        envelope_1d(&line, spacing[0], &mut out);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line.clear();
        line.extend_from_slice(&grid[y * w..(y + 1) * w]);
        envelope_1d(&line, spacing[1], &mut out);
        grid[y * w..(y + 1) * w].copy_from_slice(&out);
    }
    grid
}

/// `out[q] = min_p f[p] + (step·(q−p))²`, skipping infinite samples.
fn envelope_1d(f: &[f64], step: f64, out: &mut Vec<f64>) {
    let n = f.len();
    let w2 = step * step;
    out.clear();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let key = |p: usize| f[p] + w2 * (p * p) as f64;
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (key(q) - key(p)) / (2.0 * w2 * (q - p) as f64);
                    if s <= *z.last().expect("boundary per vertex") {
                        v.pop();
                        z.pop();
                    } else {
                        z.push(s);
                        break;
                    }
                }
            }
        }
        v.push(q);
    }
    if v.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        // Ties at an envelope breakpoint: both candidates are evaluated.
        let mut best = f64::INFINITY;
        for &p in &v[k..(k + 2).min(v.len())] {
            let d = step * q.abs_diff(p) as f64;
            best = best.min(f[p] + d * d);
        }
        out.push(best);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dice,
    Hausdorff,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Hausdorff => "hausdorff",
        }
    }
}

/// Metric values of one foreground class on one test case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: u64,
    pub modality: Modality,
    pub class: usize,
    pub dice: f64,
    /// `None` when the prediction or ground truth lacks the structure.
    pub hausdorff: Option<f64>,
}

/// Dice and Hausdorff for every foreground class of one prediction.
pub fn case_metrics(
    case: u64,
    modality: Modality,
    pred: &LabelMap,
    gt: &LabelMap,
    classes: usize,
    spacing: [f64; 2],
) -> Result<Vec<CaseMetrics>> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "case_metrics",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    (1..classes)
        .map(|class| {
            let p = Mask::from_labels(pred, 0, class)?;
            let g = Mask::from_labels(gt, 0, class)?;
            let hausdorff = match hausdorff_distance(&p, &g, spacing) {
                Ok(d) => Some(d),
                Err(Error::EmptyMask(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(CaseMetrics {
                case,
                modality,
                class,
                dice: dice_coefficient(&p, &g)?,
                hausdorff,
            })
        })
        .collect()
}

/// Sample mean and (n−1)-denominator standard deviation; std is 0 for n = 1.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("mean_std"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Mean of per-modality means.
pub fn overall_mean(modality_means: &[f64]) -> Result<f64> {
    Ok(mean_std(modality_means)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub modality: Modality,
    pub class: usize,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Cases excluded because the structure was missing.
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: String,
    pub classes: Vec<ClassSummary>,
    /// Class-mean per (modality, metric).
    pub modality_means: BTreeMap<(Modality, Metric), f64>,
    /// Mean of the modality means per metric.
    pub overall: BTreeMap<Metric, f64>,
}

pub fn aggregate_report(setting: &str, cases: &[CaseMetrics]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("aggregate_report"));
    }
    let mut groups: BTreeMap<(Modality, usize), Vec<&CaseMetrics>> = BTreeMap::new();
    for c in cases {
        groups.entry((c.modality, c.class)).or_default().push(c);
    }
    let mut classes = Vec::new();
    let mut per_modality: BTreeMap<(Modality, Metric), Vec<f64>> = BTreeMap::new();
    for ((modality, class), group) in &groups {
        let dice: Vec<f64> = group.iter().map(|c| c.dice).collect();
        let hd: Vec<f64> = group.iter().filter_map(|c| c.hausdorff).collect();
        for (metric, values) in [(Metric::Dice, dice), (Metric::Hausdorff, hd)] {
            let missing = group.len() - values.len();
            if values.is_empty() {
                classes.push(ClassSummary {
                    modality: *modality,
                    class: *class,
                    metric,
                    mean: f64::NAN,
                    std: f64::NAN,
                    n: 0,
                    missing,
                });
                continue;
            }
            let (mean, std) = mean_std(&values)?;
            per_modality
                .entry((*modality, metric))
                .or_default()
                .push(mean);
            classes.push(ClassSummary {
                modality: *modality,
                class: *class,
                metric,
                mean,
                std,
                n: values.len(),
                missing,
            });
        }
    }
    let modality_means: BTreeMap<(Modality, Metric), f64> = per_modality
        .iter()
        .map(|(k, v)| Ok((*k, mean_std(v)?.0)))
        .collect::<Result<_>>()?;
    let mut overall = BTreeMap::new();
    for metric in [Metric::Dice, Metric::Hausdorff] {
        let means: Vec<f64> = modality_means
            .iter()
            .filter(|((_, m), _)| *m == metric)
            .map(|(_, v)| *v)
            .collect();
        if !means.is_empty() {
            overall.insert(metric, overall_mean(&means)?);
        }
    }
    Ok(MetricsReport {
        setting: setting.to_string(),
        classes,
        modality_means,
        overall,
    })
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    setting: &'a str,
    modality: String,
    class: String,
    metric: &'static str,
    mean: f64,
    std: Option<f64>,
    n: usize,
}

impl MetricsReport {
    /// Per-class rows, then `mean` rows per modality, then `overall` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Format(e.to_string());
        for s in &self.classes {
            w.serialize(CsvRow {
                setting: &self.setting,
                modality: s.modality.to_string(),
                class: s.class.to_string(),
                metric: s.metric.as_str(),
                mean: s.mean,
                std: Some(s.std),
                n: s.n,
            })
            .map_err(err)?;
        }
        for ((modality, metric), mean) in &self.modality_means {
            w.serialize(CsvRow {
                setting: &self.setting,
                modality: modality.to_string(),
                class: "mean".into(),
                metric: metric.as_str(),
                mean: *mean,
                std: None,
                n: self
                    .classes
                    .iter()
                    .filter(|c| c.modality == *modality && c.metric == *metric && c.n > 0)
                    .count(),
            })
            .map_err(err)?;
        }
        for (metric, mean) in &self.overall {
            w.serialize(CsvRow {
                setting: &self.setting,
                modality: "overall".into(),
                class: "mean".into(),
                metric: metric.as_str(),
                mean: *mean,
                std: None,
                n: self
                    .modality_means
                    .keys()
                    .filter(|(_, m)| m == metric)
                    .count(),
            })
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn class_summary(
        &self,
        modality: Modality,
        class: usize,
        metric: Metric,
    ) -> Option<&ClassSummary> {
        self.classes
            .iter()
            .find(|c| c.modality == modality && c.class == class && c.metric == metric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut v = vec![false; h * w];
        for &(y, x) in on {
            v[y * w + x] = true;
        }
        Mask::new(h, w, v).unwrap()
    }

    fn square(h: usize, y0: usize, side: usize) -> Mask {
        let pts: Vec<_> = (y0..y0 + side)
            .flat_map(|y| (y0..y0 + side).map(move |x| (y, x)))
            .collect();
        mask(h, h, &pts)
    }

    #[test]
    fn dice_examples() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        let c = mask(4, 4, &[(3, 3)]);
        let e = mask(4, 4, &[]);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 100.0);
        assert_eq!(dice_coefficient(&a, &c).unwrap(), 0.0);
        assert_eq!(dice_coefficient(&a, &b).unwrap(), 50.0);
        assert_eq!(dice_coefficient(&e, &e).unwrap(), 100.0);
        assert_eq!(dice_coefficient(&e, &a).unwrap(), 0.0);
        assert!(dice_coefficient(&a, &mask(4, 5, &[])).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let p = mask(5, 5, &[(0, 0)]);
        let q = mask(5, 5, &[(3, 4)]);
        assert_eq!(hausdorff_distance(&p, &q, [1.0, 1.0]).unwrap(), 5.0);
        assert_eq!(
            hausdorff_distance(&p, &q, [2.0, 0.5]).unwrap(),
            40f64.sqrt()
        );
        let s = square(9, 2, 5);
        assert_eq!(hausdorff_distance(&s, &s, [1.0, 1.0]).unwrap(), 0.0);
        // Concentric 3×3 inside 5×5: outer corners sit √2 from the inner ring.
        let small = square(9, 3, 3);
        assert_eq!(
            hausdorff_distance(&small, &s, [1.0, 1.0]).unwrap(),
            2f64.sqrt()
        );
        assert!(matches!(
            hausdorff_distance(&mask(5, 5, &[]), &p, [1.0, 1.0]),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn boundary_edges() {
        let full = mask(3, 3, &(0..9).map(|i| (i / 3, i % 3)).collect::<Vec<_>>());
        let b = full.boundary();
        assert_eq!(b.count(), 8);
        assert!(!b.get(1, 1));
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(mean_std(&[5.0]).unwrap(), (5.0, 0.0));
        let (m, s) = mean_std(&[88.0, 92.0]).unwrap();
        assert_eq!(m, 90.0);
        assert!((s - 8f64.sqrt()).abs() < 1e-12);
        assert!((overall_mean(&[91.7, 86.0]).unwrap() - 88.85).abs() < 1e-12);
        assert!(aggregate_report("x", &[]).is_err());
    }

    #[test]
    fn report_csv() {
        let cases = vec![
            CaseMetrics {
                case: 0,
                modality: Modality::A,
                class: 1,
                dice: 80.0,
                hausdorff: Some(2.0),
            },
            CaseMetrics {
                case: 1,
                modality: Modality::A,
                class: 1,
                dice: 90.0,
                hausdorff: None,
            },
            CaseMetrics {
                case: 0,
                modality: Modality::B,
                class: 1,
                dice: 70.0,
                hausdorff: Some(4.0),
            },
        ];
        let r = aggregate_report("ours", &cases).unwrap();
        let hd = r.class_summary(Modality::A, 1, Metric::Hausdorff).unwrap();
        assert_eq!((hd.n, hd.missing), (1, 1));
        assert_eq!(r.overall[&Metric::Dice], (85.0 + 70.0) / 2.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("setting,modality,class,metric,mean,std,n")
        );
        assert!(text.contains("ours,A,1,dice,85.0,"));
        assert!(text.contains("ours,overall,mean,dice,77.5,,2"));
    }
}
