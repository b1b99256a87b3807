//! Internal feature normalization: standardize over a grouping set, then apply
//! a per-channel trainable scale `gamma` and shift `beta`.
//!
//! Grouping sets for an N×C×H×W activation:
//!
//! * batch: per channel over (N, H, W)
//! * instance: per (sample, channel) over (H, W)
//! * layer: per sample over (C, H, W)
//! * group(G): per sample and group of C/G consecutive channels over (C/G, H, W)
//!
//! Each modality gets its own [`NormScope`] (scale, shift and running
//! statistics), which is what lets a network share every kernel while still
//! normalizing each modality with its own statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Tape, Tensor, Var};
use crate::{Mode, ScopeTag};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GROUPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum NormKind {
    Batch,
    Instance,
    Layer,
    Group { groups: usize },
}

impl NormKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "batch" => Some(Self::Batch),
            "instance" => Some(Self::Instance),
            "layer" => Some(Self::Layer),
            "group" => Some(Self::Group {
                groups: DEFAULT_GROUPS,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub channels: usize,
    pub epsilon: f64,
    pub momentum: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind, channels: usize) -> Result<Self> {
        let spec = Self {
            kind,
            channels,
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config(
                "normalization needs at least one channel".into(),
            ));
        }
        if let NormKind::Group { groups } = self.kind {
            if groups == 0 || !self.channels.is_multiple_of(groups) {
                return Err(Error::Config(format!(
                    "{} channels cannot be split into {groups} groups",
                    self.channels
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!(
                "momentum must lie in (0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn has_running_stats(&self) -> bool {
        self.kind == NormKind::Batch
    }

    /// Number of statistic groups and the group of each (sample, channel).
    fn grouping(&self, n: usize) -> (usize, impl Fn(usize, usize) -> usize + '_) {
        let c = self.channels;
        let count = match self.kind {
            NormKind::Batch => c,
            NormKind::Instance => n * c,
            NormKind::Layer => n,
            NormKind::Group { groups } => n * groups,
        };
        let kind = self.kind;
        (count, move |ni: usize, ci: usize| match kind {
            NormKind::Batch => ci,
            NormKind::Instance => ni * c + ci,
            NormKind::Layer => ni,
            NormKind::Group { groups } => ni * groups + ci / (c / groups),
        })
    }
}

/// Trainable scale/shift plus (batch kind only) running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormScope {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
    pub modality: ScopeTag,
}

impl NormScope {
    /// Identity affine (`gamma = 1`, `beta = 0`), running mean 0 and variance 1.
    pub fn new(spec: &NormSpec, modality: ScopeTag) -> Self {
        let c = spec.channels;
        let running = spec.has_running_stats();
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: running.then(|| vec![0.0; c]),
            running_var: running.then(|| vec![1.0; c]),
            modality,
        }
    }

    /// Runs [`norm_forward`] with this scope's parameters bound as fresh
    /// trainable leaves, folding batch statistics into the running averages in
    /// train mode.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        spec: &NormSpec,
        mode: Mode,
    ) -> Result<ScopedOutput> {
        let c = spec.channels;
        let gamma = tape.param(Tensor::from_vec(&[c], self.gamma.clone())?);
        let beta = tape.param(Tensor::from_vec(&[c], self.beta.clone())?);
        let running = match (&self.running_mean, &self.running_var) {
            (Some(m), Some(v)) => Some((m.as_slice(), v.as_slice())),
            _ => None,
        };
        let out = norm_forward(tape, x, gamma, beta, spec, mode, running)?;
        if let Some(stats) = &out.batch_stats {
            self.update_running_stats(spec, &stats.mean, &stats.var)?;
        }
        Ok(ScopedOutput {
            output: out.output,
            gamma,
            beta,
        })
    }

    /// `running <- (1 - momentum) * running + momentum * batch` for mean and
    /// variance independently.
    pub fn update_running_stats(
        &mut self,
        spec: &NormSpec,
        mean: &[f64],
        var: &[f64],
    ) -> Result<()> {
        if !spec.has_running_stats() {
            return Err(Error::Config(
                "running statistics exist only for batch normalization".into(),
            ));
        }
        spec.validate()?;
        let (Some(rm), Some(rv)) = (&mut self.running_mean, &mut self.running_var) else {
            return Err(Error::Config("scope has no running statistics".into()));
        };
        blend_running(rm, mean, spec.momentum)?;
        blend_running(rv, var, spec.momentum)
    }
}

pub struct ScopedOutput {
    pub output: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Exponential moving average update of one running statistic.
pub fn blend_running(running: &mut [f64], batch: &[f64], momentum: f64) -> Result<()> {
    if !(momentum > 0.0 && momentum < 1.0) {
        return Err(Error::Config(format!(
            "momentum must lie in (0, 1), got {momentum}"
        )));
    }
    if running.len() != batch.len() {
        return Err(Error::ShapeMismatch {
            op: "update_running_stats",
            left: vec![running.len()],
            right: vec![batch.len()],
        });
    }
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    Ok(())
}

/// Per-channel batch statistics observed by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct NormOutput {
    pub output: Var,
    /// Present for batch kind in train mode.
    pub batch_stats: Option<BatchStats>,
}

struct NormBackward {
    spec: NormSpec,
    /// Group of every (sample, channel) pair, row-major.
    group_of: Vec<usize>,
    group_count: usize,
    group_size: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Statistics were fixed (eval-mode batch kind): no gradient through them.
    fixed_stats: bool,
}

impl BackwardOp for NormBackward {
    fn name(&self) -> &'static str {
        "norm_forward"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let shape = inputs[0].shape();
        let (n, c) = (shape[0], shape[1]);
        let plane = shape[2] * shape[3];
        let gamma = inputs[1].values();

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            if self.fixed_stats {
                for ni in 0..n {
                    for ci in 0..c {
                        let scale = gamma[ci] * self.inv_std[self.group_of[ni * c + ci]];
                        let off = (ni * c + ci) * plane;
                        for p in off..off + plane {
                            dx[p] = g[p] * scale;
                        }
                    }
                }
                return dx;
            }
            let mut sum_d = vec![0.0; self.group_count];
            let mut sum_dx = vec![0.0; self.group_count];
            for ni in 0..n {
                for ci in 0..c {
                    let grp = self.group_of[ni * c + ci];
                    let off = (ni * c + ci) * plane;
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for p in off..off + plane {
                        let d = g[p] * gamma[ci];
                        s1 += d;
                        s2 += d * self.xhat[p];
                    }
                    sum_d[grp] += s1;
                    sum_dx[grp] += s2;
                }
            }
            let m = self.group_size as f64;
            for ni in 0..n {
                for ci in 0..c {
                    let grp = self.group_of[ni * c + ci];
                    let (mean_d, mean_dx, is) =
                        (sum_d[grp] / m, sum_dx[grp] / m, self.inv_std[grp]);
                    let off = (ni * c + ci) * plane;
                    for p in off..off + plane {
                        dx[p] = is * (g[p] * gamma[ci] - mean_d - self.xhat[p] * mean_dx);
                    }
                }
            }
            dx
        });

        let mut dgamma = needs[1].then(|| vec![0.0; self.spec.channels]);
        let mut dbeta = needs[2].then(|| vec![0.0; self.spec.channels]);
        if dgamma.is_some() || dbeta.is_some() {
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    if let Some(dg) = dgamma.as_mut() {
                        dg[ci] += (off..off + plane).map(|p| g[p] * self.xhat[p]).sum::<f64>();
                    }
                    if let Some(db) = dbeta.as_mut() {
                        db[ci] += g[off..off + plane].iter().sum::<f64>();
                    }
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

/// `y = gamma * (x - E[x]) / sqrt(Var[x] + eps) + beta` over the grouping set
/// of `spec.kind`.
///
/// The batch kind uses the supplied running statistics in eval mode; every
/// other kind uses the current input's statistics in both modes. Variances are
/// biased (population) estimates.
pub fn norm_forward(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    spec: &NormSpec,
    mode: Mode,
    running: Option<(&[f64], &[f64])>,
) -> Result<NormOutput> {
    spec.validate()?;
    let xv = tape.value(x)?;
    let shape = xv.shape().to_vec();
    if shape.len() != 4 || shape[1] != spec.channels {
        return Err(Error::ShapeMismatch {
            op: "norm_forward",
            left: shape,
            right: vec![spec.channels],
        });
    }
    for v in [gamma, beta] {
        let s = tape.shape(v)?;
        if s != [spec.channels] {
            return Err(Error::ShapeMismatch {
                op: "norm_forward affine",
                left: s.to_vec(),
                right: vec![spec.channels],
            });
        }
    }
    let (n, c) = (shape[0], shape[1]);
    let plane = shape[2] * shape[3];
    let use_running = spec.kind == NormKind::Batch && mode == Mode::Eval;
    if spec.kind == NormKind::Batch && mode == Mode::Train && n < 2 {
        return Err(Error::Domain {
            op: "norm_forward",
            reason: "batch normalization in train mode needs a batch of at least 2".into(),
        });
    }

    let (group_count, group_fn) = spec.grouping(n);
    let group_of: Vec<usize> = (0..n)
        .flat_map(|ni| (0..c).map(move |ci| (ni, ci)))
        .map(|(ni, ci)| group_fn(ni, ci))
        .collect();
    let group_size = xv.len() / group_count;

    let (mean, var) = if use_running {
        let (rm, rv) = running.ok_or_else(|| {
            Error::MissingParameter("running statistics for eval-mode batch normalization".into())
        })?;
        if rm.len() != c || rv.len() != c {
            return Err(Error::ShapeMismatch {
                op: "norm_forward running stats",
                left: vec![rm.len(), rv.len()],
                right: vec![c],
            });
        }
        (rm.to_vec(), rv.to_vec())
    } else {
        let vals = xv.values();
        let mut mean = vec![0.0; group_count];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                mean[group_of[ni * c + ci]] += vals[off..off + plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= group_size as f64);
        let mut var = vec![0.0; group_count];
        for ni in 0..n {
            for ci in 0..c {
                let grp = group_of[ni * c + ci];
                let off = (ni * c + ci) * plane;
                let mu = mean[grp];
                var[grp] += vals[off..off + plane]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= group_size as f64);
        (mean, var)
    };

    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + spec.epsilon).sqrt())
        .collect();
    let gv = tape.value(gamma)?.values();
    let bv = tape.value(beta)?.values();
    let vals = xv.values();
    let mut xhat = vec![0.0; vals.len()];
    let mut out = vec![0.0; vals.len()];
    for ni in 0..n {
        for ci in 0..c {
            let grp = group_of[ni * c + ci];
            let (mu, is) = (mean[grp], inv_std[grp]);
            let off = (ni * c + ci) * plane;
            for p in off..off + plane {
                let h = (vals[p] - mu) * is;
                xhat[p] = h;
                out[p] = gv[ci] * h + bv[ci];
            }
        }
    }

    let batch_stats = (spec.kind == NormKind::Batch && mode == Mode::Train).then(|| BatchStats {
        mean: mean.clone(),
        var: var.clone(),
    });
    let save = tape.any_requires_grad(&[x, gamma, beta])?;
    let op = NormBackward {
        spec: *spec,
        group_of: if save { group_of } else { Vec::new() },
        group_count,
        group_size,
        xhat: if save { xhat } else { Vec::new() },
        inv_std,
        fixed_stats: use_running,
    };
    let output = tape.record(
        Tensor::from_raw(shape, out),
        &[x, gamma, beta],
        Box::new(op),
    )?;
    Ok(NormOutput {
        output,
        batch_stats,
    })
}
