//! Training loop over mixed two-modality batches, Adam updates, logging and
//! evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{distill_confusion, kd_loss, SnapshotRecord, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{
    dice_loss, l2_penalty, softmax_channels, total_loss_var, weighted_cross_entropy, LossBreakdown,
};
use crate::metrics::{case_metrics, CaseMetrics};
use crate::network::{save_checkpoint, ArchConfig, Network, ParamKey, ParameterStore, Setting};
use crate::synth::{Case, Dataset, Split};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Modality, Mode};

fn default_setting() -> Setting {
    Setting::Ours
}
fn default_alpha() -> f64 {
    0.5
}
fn default_eta() -> f64 {
    1e-4
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_lr() -> f64 {
    1e-4
}
fn default_decay() -> f64 {
    0.95
}
fn default_decay_interval() -> usize {
    1000
}
fn default_batch() -> usize {
    4
}
fn default_iterations() -> usize {
    2000
}
fn default_interval() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_setting")]
    pub setting: Setting,
    /// Distillation weight; only active for settings that use distillation.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_interval")]
    pub decay_interval: usize,
    #[serde(default = "default_batch")]
    pub batch_per_modality: usize,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub snapshot_interval: usize,
    #[serde(default = "default_interval")]
    pub validation_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::new(default_setting())
    }
}

impl TrainingConfig {
    pub fn new(setting: Setting) -> Self {
        Self {
            setting,
            alpha: default_alpha(),
            eta: default_eta(),
            temperature: default_temperature(),
            base_lr: default_lr(),
            decay_factor: default_decay(),
            decay_interval: default_decay_interval(),
            batch_per_modality: default_batch(),
            max_iterations: default_iterations(),
            seed: 0,
            snapshot_interval: default_interval(),
            validation_interval: default_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be finite and non-negative", self.eta));
        }
        if !(1.0..10.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [1, 10)", self.temperature));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay factor {} outside (0, 1]", self.decay_factor));
        }
        if self.decay_interval == 0 || self.batch_per_modality == 0 {
            return bad("decay interval and batch size must be positive".into());
        }
        if self.snapshot_interval == 0 || self.validation_interval == 0 {
            return bad("snapshot and validation intervals must be positive".into());
        }
        Ok(())
    }

    /// The weight actually applied to the distillation term.
    pub fn effective_alpha(&self) -> f64 {
        if self.setting.uses_kd() {
            self.alpha
        } else {
            0.0
        }
    }

    /// Whether distillation diagnostics are computed at all.
    pub fn tracks_kd(&self) -> bool {
        self.setting != Setting::Individual
    }
}

/// `base · factor^floor(iter / interval)`.
pub fn learning_rate_at(iter: usize, config: &TrainingConfig) -> f64 {
    config.base_lr
        * config
            .decay_factor
            .powi((iter / config.decay_interval) as i32)
}

/// Adam moments per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    moments: BTreeMap<ParamKey, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn moments(&self, key: &ParamKey) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(key)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every parameter in `grads`. Nothing is
/// modified if any gradient is non-finite or mis-shaped.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &[(ParamKey, Vec<f64>)],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Domain {
            op: "adam_step",
            reason: format!("learning rate {lr} must be positive"),
        });
    }
    for (key, g) in grads {
        let p = store.get(key)?;
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("adam_step gradient of {key}"),
            });
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (key, g) in grads {
        let (m, v) = state
            .moments
            .entry(*key)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let p = store.get_mut(key)?.values_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub lr: f64,
    pub seg_a: f64,
    pub seg_b: f64,
    pub dice_a: f64,
    pub dice_b: f64,
    pub wce_a: f64,
    pub wce_b: f64,
    /// Training-batch distillation loss; absent for the individual setting.
    pub kd: Option<f64>,
    pub l2: f64,
    pub alpha: f64,
    pub eta: f64,
    pub total: f64,
}

impl IterationRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            seg_a: self.seg_a,
            seg_b: self.seg_b,
            dice_a: self.dice_a,
            dice_b: self.dice_b,
            wce_a: self.wce_a,
            wce_b: self.wce_b,
            kd: self.kd.unwrap_or(0.0),
            l2: self.l2,
            alpha: self.alpha,
            eta: self.eta,
            total: self.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Number of completed iterations.
    pub iter: usize,
    pub kd: Option<f64>,
    /// Mean Dice (%) per foreground class, indexed from class 1.
    pub dice: BTreeMap<Modality, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub iterations: Vec<IterationRecord>,
    pub validations: Vec<ValidationRecord>,
    pub snapshots: Vec<SnapshotRecord>,
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const VALIDATION_LOG: &str = "validation.csv";
pub const CONFUSION_LOG: &str = "confusion.txt";

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainingLog {
    /// Writes `train_log.csv`, `validation.csv` and `confusion.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(TRAIN_LOG)).map_err(csv_err)?;
        for r in &self.iterations {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(VALIDATION_LOG)).map_err(csv_err)?;
        let mut header = vec!["iter".to_string(), "kd".to_string()];
        if let Some(first) = self.validations.first() {
            for (m, d) in &first.dice {
                header.extend((1..=d.len()).map(|c| format!("dice_{m}_{c}")));
            }
        }
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.validations {
            let mut row = vec![r.iter.to_string(), opt(r.kd)];
            for d in r.dice.values() {
                row.extend(d.iter().map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;

        let mut f = fs::File::create(dir.join(CONFUSION_LOG))?;
        for s in &self.snapshots {
            writeln!(f, "{}", s.to_line())?;
        }
        Ok(())
    }

    /// Reads the validation curve and confusion snapshots back from `dir`.
    pub fn read_curves(dir: &Path) -> Result<(Vec<ValidationRecord>, Vec<SnapshotRecord>)> {
        let mut r = csv::Reader::from_path(dir.join(VALIDATION_LOG)).map_err(csv_err)?;
        let header = r.headers().map_err(csv_err)?.clone();
        let mut columns: Vec<(Modality, usize)> = Vec::new();
        for h in header.iter().skip(2) {
            let mut parts = h.split('_').skip(1);
            let m = match parts.next() {
                Some("A") => Modality::A,
                Some("B") => Modality::B,
                _ => return Err(Error::Format(format!("bad validation column {h}"))),
            };
            let c: usize = parts
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad validation column {h}")))?;
            columns.push((m, c));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad number {s:?}")))
        };
        let mut validations = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let iter = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format("bad iteration".into()))?;
            let kd = match rec.get(1) {
                Some("") | None => None,
                Some(s) => Some(num(s)?),
            };
            let mut dice: BTreeMap<Modality, Vec<f64>> = BTreeMap::new();
            for (i, (m, _)) in columns.iter().enumerate() {
                dice.entry(*m)
                    .or_default()
                    .push(num(rec.get(i + 2).unwrap_or(""))?);
            }
            validations.push(ValidationRecord { iter, kd, dice });
        }
        let text = fs::read_to_string(dir.join(CONFUSION_LOG))?;
        let snapshots = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(SnapshotRecord::parse_line)
            .collect::<Result<_>>()?;
        Ok((validations, snapshots))
    }

    /// Paired (A, B) snapshots in iteration order.
    pub fn snapshot_pairs(
        snapshots: &[SnapshotRecord],
    ) -> Vec<(usize, &SnapshotRecord, &SnapshotRecord)> {
        let mut by_iter: BTreeMap<usize, (Option<&SnapshotRecord>, Option<&SnapshotRecord>)> =
            BTreeMap::new();
        for s in snapshots {
            let e = by_iter.entry(s.iteration).or_default();
            match s.modality {
                Modality::A => e.0 = Some(s),
                Modality::B => e.1 = Some(s),
            }
        }
        by_iter
            .into_iter()
            .filter_map(|(i, (a, b))| Some((i, a?, b?)))
            .collect()
    }
}

/// Stacks cases into an N×1×H×W image batch and an N×H×W label map.
pub fn stack_cases(cases: &[&Case]) -> Result<(Tensor, LabelMap)> {
    let first = cases.first().ok_or(Error::EmptyInput("batch"))?;
    let img_shape = first.image.shape();
    let mut values = Vec::with_capacity(first.image.len() * cases.len());
    for c in cases {
        if c.image.shape() != img_shape {
            return Err(Error::ShapeMismatch {
                op: "stack_cases",
                left: img_shape.to_vec(),
                right: c.image.shape().to_vec(),
            });
        }
        values.extend_from_slice(c.image.values());
    }
    let mut shape = vec![cases.len()];
    shape.extend_from_slice(img_shape);
    let labels: Vec<&LabelMap> = cases.iter().map(|c| &c.labels).collect();
    Ok((Tensor::from_vec(&shape, values)?, LabelMap::stack(&labels)?))
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected N×C×H×W logits".into(),
        });
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let v = logits.values();
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        for px in 0..plane {
            let mut best = 0;
            for cls in 1..c {
                if v[(ni * c + cls) * plane + px] > v[(ni * c + best) * plane + px] {
                    best = cls;
                }
            }
            out.push(best);
        }
    }
    LabelMap::new(&[n, s[2], s[3]], out)
}

/// Metrics for `cases` from any logits source.
pub fn evaluate_cases<F>(
    cases: &[Case],
    modality: Modality,
    classes: usize,
    mut predict: F,
) -> Result<Vec<CaseMetrics>>
where
    F: FnMut(&Case) -> Result<Tensor>,
{
    let mut out = Vec::new();
    for case in cases {
        let logits = predict(case)?;
        let pred = argmax_labels(&logits)?;
        let pred = LabelMap::new(case.labels.shape(), pred.values().to_vec())?;
        out.extend(case_metrics(
            case.seed,
            modality,
            &pred,
            &case.labels,
            classes,
            [1.0, 1.0],
        )?);
    }
    Ok(out)
}

/// Eval-mode metrics of one modality's split.
pub fn evaluate_split(
    network: &Network,
    store: &ParameterStore,
    dataset: &Dataset,
    split: Split,
    modality: Modality,
) -> Result<Vec<CaseMetrics>> {
    let cfg = &dataset.manifest.config;
    if network.num_classes() != cfg.classes || network.config().input_channels != 1 {
        return Err(Error::Config(format!(
            "network expects {} classes and {} channel(s), dataset has {} classes and 1 channel",
            network.num_classes(),
            network.config().input_channels,
            cfg.classes
        )));
    }
    let cases = dataset.cases(modality, split);
    evaluate_cases(cases, modality, cfg.classes, |case| {
        let x = case.image.clone().reshape(&[1, 1, cfg.height, cfg.width])?;
        network.predict(store, &x, modality)
    })
}

pub struct TrainingOutcome {
    pub network: Network,
    pub store: ParameterStore,
    pub log: TrainingLog,
}

struct SegTerms {
    loss: Var,
    dice: Var,
    wce: Var,
}

fn seg_loss(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<SegTerms> {
    let probs = softmax_channels(tape, logits)?;
    let dice = dice_loss(tape, probs, labels)?;
    let wce = weighted_cross_entropy(tape, logits, labels)?;
    let loss = tape.add(dice, wce)?;
    Ok(SegTerms { loss, dice, wce })
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v)?.item()
}

/// Trains `arch` (re-annotated with the configured setting) on `dataset`.
/// Both modalities' sub-batches are forwarded through their scopes, the
/// overall loss is back-propagated once and every touched parameter takes one
/// Adam step.
pub fn run_training(
    config: &TrainingConfig,
    dataset: &Dataset,
    arch: &ArchConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let arch = arch.clone().with_setting(config.setting);
    let network = Network::new(arch)?;
    if network.num_classes() != dataset.classes() {
        return Err(Error::Config(format!(
            "network has {} classes, dataset {}",
            network.num_classes(),
            dataset.classes()
        )));
    }
    for m in Modality::BOTH {
        if dataset.cases(m, Split::Train).is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
    }
    let mut store = network.init_params(config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let mut adam = AdamState::default();
    let mut log = TrainingLog::default();
    let alpha = config.effective_alpha();

    record_validation(config, &network, &store, dataset, 0, &mut log)?;
    for iter in 0..config.max_iterations {
        let lr = learning_rate_at(iter, config);
        let mut batches = Vec::with_capacity(2);
        for m in Modality::BOTH {
            let train = dataset.cases(m, Split::Train);
            let picks: Vec<&Case> = (0..config.batch_per_modality)
                .map(|_| &train[rng.random_range(0..train.len())])
                .collect();
            batches.push((m, stack_cases(&picks)?));
        }

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let mut seg = Vec::with_capacity(2);
        let mut logits = Vec::with_capacity(2);
        let mut updates = Vec::new();
        for (m, (x, labels)) in &batches {
            let xv = tape.constant(x.clone());
            let out = network.forward(&mut tape, &binding, &store, xv, *m, Mode::Train)?;
            seg.push(seg_loss(&mut tape, out.logits, labels)?);
            logits.push(out.logits);
            updates.extend(out.stat_updates);
        }
        let kd = if config.tracks_kd() {
            let qa = distill_confusion(&mut tape, logits[0], &batches[0].1 .1, config.temperature)?;
            let qb = distill_confusion(&mut tape, logits[1], &batches[1].1 .1, config.temperature)?;
            Some(kd_loss(&mut tape, &qa, &qb)?.loss)
        } else {
            None
        };
        let params = binding.vars();
        let l2 = l2_penalty(&mut tape, &params)?;
        let total = total_loss_var(
            &mut tape,
            seg[0].loss,
            seg[1].loss,
            kd,
            l2,
            alpha,
            config.eta,
        )?;

        let record = IterationRecord {
            iter,
            lr,
            seg_a: scalar(&tape, seg[0].loss)?,
            seg_b: scalar(&tape, seg[1].loss)?,
            dice_a: scalar(&tape, seg[0].dice)?,
            dice_b: scalar(&tape, seg[1].dice)?,
            wce_a: scalar(&tape, seg[0].wce)?,
            wce_b: scalar(&tape, seg[1].wce)?,
            kd: kd.map(|k| scalar(&tape, k)).transpose()?,
            l2: scalar(&tape, l2)?,
            alpha,
            eta: config.eta,
            total: scalar(&tape, total)?,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite {
                op: format!("total loss at iteration {iter}: {record:?}"),
            });
        }

        tape.backward(total)?;
        let mut grads = Vec::new();
        for (key, var) in binding.iter() {
            if let Some(g) = tape.grad(*var)? {
                grads.push((*key, g.to_vec()));
            }
        }
        adam_step(&mut store, &grads, &mut adam, lr)?;
        store.apply_stat_updates(&network, &updates)?;
        log.iterations.push(record);

        let done = iter + 1;
        record_validation(config, &network, &store, dataset, done, &mut log)?;
    }
    Ok(TrainingOutcome {
        network,
        store,
        log,
    })
}

/// Validation and confusion snapshots after `done` iterations when an
/// interval boundary or the final iteration is reached.
fn record_validation(
    config: &TrainingConfig,
    network: &Network,
    store: &ParameterStore,
    dataset: &Dataset,
    done: usize,
    log: &mut TrainingLog,
) -> Result<()> {
    let last = done == config.max_iterations;
    let validate = done.is_multiple_of(config.validation_interval) || last;
    let snapshot = config.tracks_kd() && (done.is_multiple_of(config.snapshot_interval) || last);
    if !validate && !snapshot {
        return Ok(());
    }
    let mut tape = Tape::new();
    let binding = store.bind_frozen(&mut tape);
    let mut confusion = Vec::with_capacity(2);
    let mut dice = BTreeMap::new();
    for m in Modality::BOTH {
        let val = dataset.cases(m, Split::Val);
        if val.is_empty() {
            continue;
        }
        let refs: Vec<&Case> = val.iter().collect();
        let (x, labels) = stack_cases(&refs)?;
        let xv = tape.constant(x);
        let out = network.forward(&mut tape, &binding, store, xv, m, Mode::Eval)?;
        let logits = tape.value(out.logits)?.clone();
        if validate {
            let metrics = evaluate_cases(val, m, dataset.classes(), |case| {
                let i = val
                    .iter()
                    .position(|c| c.seed == case.seed)
                    .expect("case from split");
                slice_batch(&logits, i)
            })?;
            dice.insert(m, class_mean_dice(&metrics, dataset.classes()));
        }
        if config.tracks_kd() {
            confusion.push((
                m,
                distill_confusion(&mut tape, out.logits, &labels, config.temperature)?,
            ));
        }
    }
    let kd = match confusion.as_slice() {
        [(_, qa), (_, qb)] => {
            let k = kd_loss(&mut tape, qa, qb)?.loss;
            Some(scalar(&tape, k)?)
        }
        _ => None,
    };
    if validate {
        log.validations.push(ValidationRecord {
            iter: done,
            kd,
            dice,
        });
    }
    if snapshot {
        for (m, q) in &confusion {
            log.snapshots.push(SnapshotRecord {
                iteration: done,
                modality: *m,
                distribution: q.snapshot(&tape)?,
            });
        }
    }
    Ok(())
}

fn slice_batch(t: &Tensor, i: usize) -> Result<Tensor> {
    let s = t.shape();
    let per: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = 1;
    Tensor::from_vec(&shape, t.values()[i * per..(i + 1) * per].to_vec())
}

fn class_mean_dice(metrics: &[CaseMetrics], classes: usize) -> Vec<f64> {
    (1..classes)
        .map(|c| {
            let v: Vec<f64> = metrics
                .iter()
                .filter(|m| m.class == c)
                .map(|m| m.dice)
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

/// Persists the checkpoint under `dir/checkpoint` and the logs under `dir`.
pub fn save_outcome(dir: &Path, outcome: &TrainingOutcome) -> Result<()> {
    save_checkpoint(&dir.join("checkpoint"), &outcome.network, &outcome.store)?;
    outcome.log.write(dir)
}
