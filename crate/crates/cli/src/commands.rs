use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cmkd::metrics::{aggregate_report, CaseMetrics, Metric, MetricsReport};
use cmkd::network::{load_checkpoint, ParamCount, Setting};
use cmkd::synth::{build_dataset, Dataset, DatasetConfig, Split, MANIFEST_FILE};
use cmkd::trainer::{evaluate_split, run_training, save_outcome, TrainingLog};
use cmkd::Modality;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const RUN_SUMMARY: &str = "run.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CASES_CSV: &str = "cases.csv";

fn csv_err(e: csv::Error) -> CliError {
    CliError::Other(e.to_string())
}

fn parse_setting(s: &str) -> Result<Setting, CliError> {
    Setting::parse(s).ok_or_else(|| CliError::UnknownSetting(s.to_string()))
}

fn load_dataset(root: &Path) -> Result<Dataset, CliError> {
    if !root.join(MANIFEST_FILE).is_file() {
        return Err(CliError::MissingFile(root.join(MANIFEST_FILE)));
    }
    Dataset::load(root).map_err(|e| match e {
        cmkd::Error::Io(_) => CliError::MissingFile(root.to_path_buf()),
        other => CliError::Config(format!("dataset {}: {other}", root.display())),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn gen_data(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let data = match config {
        Some(p) => ExperimentConfig::load(p)?
            .data
            .unwrap_or_else(DatasetConfig::desk_default),
        None => DatasetConfig::desk_default(),
    };
    let ds = build_dataset(&data).map_err(|e| CliError::Config(e.to_string()))?;
    ds.write(out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub setting: Setting,
    pub seed: u64,
    pub alpha: f64,
    pub dataset: PathBuf,
    pub params: ParamCount,
    pub final_validation_kd: Option<f64>,
}

/// One training run written to `out`.
fn train_run(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    dataset_root: &Path,
    setting: Setting,
    seed: u64,
    alpha: Option<f64>,
    out: &Path,
) -> Result<RunSummary, CliError> {
    let mut training = cfg.training.clone();
    training.setting = setting;
    training.seed = seed;
    if let Some(a) = alpha {
        training.alpha = a;
    }
    training
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let arch = cfg.arch.build(dataset.classes(), &training)?;
    let outcome = run_training(&training, dataset, &arch).map_err(|e| match e {
        cmkd::Error::Config(m) => CliError::Config(m),
        other => CliError::Training(other),
    })?;
    save_outcome(out, &outcome)?;
    let summary = RunSummary {
        setting,
        seed,
        alpha: training.effective_alpha(),
        dataset: dataset_root.to_path_buf(),
        params: outcome.store.count(),
        final_validation_kd: outcome.log.validations.last().and_then(|v| v.kd),
    };
    write_json(&out.join(RUN_SUMMARY), &summary)?;
    Ok(summary)
}

pub fn train(
    setting: &str,
    config: &Path,
    seed: u64,
    out: &Path,
    dataset: Option<&Path>,
) -> Result<(), CliError> {
    let setting = parse_setting(setting)?;
    let cfg = ExperimentConfig::load(config)?;
    let root = cfg.dataset_root(dataset)?;
    let ds = load_dataset(&root)?;
    train_run(&cfg, &ds, &root, setting, seed, None, out)?;
    Ok(())
}

/// Test-split metrics of one checkpoint for both modalities.
fn evaluate(
    checkpoint: &Path,
    dataset: &Dataset,
    split: Split,
) -> Result<(Setting, Vec<CaseMetrics>), CliError> {
    if !checkpoint
        .join(cmkd::network::CHECKPOINT_MANIFEST)
        .is_file()
    {
        return Err(CliError::MissingFile(
            checkpoint.join(cmkd::network::CHECKPOINT_MANIFEST),
        ));
    }
    let (net, store) = load_checkpoint(checkpoint).map_err(|e| match e {
        cmkd::Error::Io(_) => CliError::MissingFile(checkpoint.to_path_buf()),
        other => CliError::Config(format!("checkpoint {}: {other}", checkpoint.display())),
    })?;
    let mut cases = Vec::new();
    for m in Modality::BOTH {
        cases.extend(
            evaluate_split(&net, &store, dataset, split, m)
                .map_err(|e| CliError::Config(e.to_string()))?,
        );
    }
    Ok((net.setting(), cases))
}

fn write_cases(path: &Path, cases: &[CaseMetrics]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for c in cases {
        w.serialize(c).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(path: &Path, report: &MetricsReport) -> Result<(), CliError> {
    let f = fs::File::create(path)?;
    report.write_csv(f)?;
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    split: &str,
    out: &Path,
    dataset: Option<&Path>,
) -> Result<(), CliError> {
    let split =
        Split::parse(split).ok_or_else(|| CliError::Config(format!("unknown split `{split}`")))?;
    let root = match dataset {
        Some(d) => d.to_path_buf(),
        None => {
            let run = checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join(RUN_SUMMARY);
            let text = fs::read_to_string(&run).map_err(|_| CliError::MissingFile(run.clone()))?;
            let summary: RunSummary = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", run.display())))?;
            summary.dataset
        }
    };
    let ds = load_dataset(&root)?;
    let (setting, cases) = evaluate(checkpoint, &ds, split)?;
    let report = aggregate_report(setting.name(), &cases)?;
    fs::create_dir_all(out)?;
    write_report(&out.join(METRICS_CSV), &report)?;
    write_cases(&out.join(CASES_CSV), &cases)?;
    Ok(())
}

/// Worker-count cap from `CMD_THREADS`, defaulting to the available cores.
fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let n = match std::env::var("CMD_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Config(format!("CMD_THREADS={v} is not a positive integer"))
        })?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))
}

struct Job {
    setting: Setting,
    seed: u64,
    alpha: Option<f64>,
    dir: PathBuf,
}

struct JobResult {
    summary: RunSummary,
    cases: Vec<CaseMetrics>,
}

fn run_jobs(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    root: &Path,
    jobs: &[Job],
) -> Result<Vec<JobResult>, CliError> {
    let pool = thread_pool()?;
    pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let summary = train_run(cfg, ds, root, job.setting, job.seed, job.alpha, &job.dir)?;
                let (_, cases) = evaluate(&job.dir.join("checkpoint"), ds, Split::Test)?;
                write_cases(&job.dir.join(CASES_CSV), &cases)?;
                Ok(JobResult { summary, cases })
            })
            .collect()
    })
}

/// Concatenates report tables under one header.
fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    for (i, r) in reports.iter().enumerate() {
        let mut buf = Vec::new();
        r.write_csv(&mut buf)?;
        let text = String::from_utf8(buf).map_err(|e| CliError::Other(e.to_string()))?;
        let body = if i == 0 {
            text.as_str()
        } else {
            text.split_once('\n').map_or("", |(_, rest)| rest)
        };
        f.write_all(body.as_bytes())?;
    }
    Ok(())
}

pub fn compare_settings(
    config: &Path,
    seeds: &[u64],
    out: &Path,
    dataset: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds given".into()));
    }
    let root = cfg.dataset_root(dataset)?;
    let ds = load_dataset(&root)?;
    let jobs: Vec<Job> = Setting::ALL
        .iter()
        .flat_map(|&setting| {
            seeds.iter().map(move |&seed| Job {
                setting,
                seed,
                alpha: None,
                dir: out.join(setting.name()).join(format!("seed{seed}")),
            })
        })
        .collect();
    let results = run_jobs(&cfg, &ds, &root, &jobs)?;

    let mut reports = Vec::new();
    let mut params = csv::Writer::from_path(out.join("params.csv")).map_err(csv_err)?;
    params
        .write_record([
            "setting",
            "total",
            "shared_kernel",
            "shared_norm",
            "private_a",
            "private_b",
            "norm_a",
            "norm_b",
        ])
        .map_err(csv_err)?;
    for setting in Setting::ALL {
        let runs: Vec<&JobResult> = results
            .iter()
            .filter(|r| r.summary.setting == setting)
            .collect();
        let cases: Vec<CaseMetrics> = runs
            .iter()
            .flat_map(|r| {
                r.cases.iter().map(move |c| CaseMetrics {
                    case: r.summary.seed * 1_000_000 + c.case,
                    ..c.clone()
                })
            })
            .collect();
        let report = aggregate_report(setting.name(), &cases)?;
        write_report(&out.join(setting.name()).join(METRICS_CSV), &report)?;
        reports.push(report);
        let p = runs[0].summary.params;
        params
            .write_record(
                [setting.name().to_string()].into_iter().chain(
                    [
                        p.total,
                        p.shared_kernel,
                        p.shared_norm,
                        p.private_a,
                        p.private_b,
                        p.norm_a,
                        p.norm_b,
                    ]
                    .iter()
                    .map(|v| v.to_string()),
                ),
            )
            .map_err(csv_err)?;
    }
    params.flush()?;
    write_reports(&out.join("summary.csv"), &reports)
}

/// Inclusive `start:stop:step` range.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("range `{spec}` is not start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(start.is_finite() && stop.is_finite() && step > 0.0 && stop >= start) {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

pub fn sweep_alpha(
    config: &Path,
    values: &str,
    seed: u64,
    out: &Path,
    dataset: Option<&Path>,
) -> Result<(), CliError> {
    let alphas = parse_range(values)?;
    let cfg = ExperimentConfig::load(config)?;
    let root = cfg.dataset_root(dataset)?;
    let ds = load_dataset(&root)?;
    let jobs: Vec<Job> = alphas
        .iter()
        .map(|&a| Job {
            setting: Setting::Ours,
            seed,
            alpha: Some(a),
            dir: out.join(format!("alpha_{a}")),
        })
        .collect();
    let results = run_jobs(&cfg, &ds, &root, &jobs)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(csv_err)?;
    w.write_record([
        "alpha",
        "dice_A",
        "dice_B",
        "dice_overall",
        "final_validation_kd",
    ])
    .map_err(csv_err)?;
    for (a, r) in alphas.iter().zip(&results) {
        let report = aggregate_report(Setting::Ours.name(), &r.cases)?;
        let m = |modality| {
            report
                .modality_means
                .get(&(modality, Metric::Dice))
                .copied()
        };
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            a.to_string(),
            cell(m(Modality::A)),
            cell(m(Modality::B)),
            cell(report.overall.get(&Metric::Dice).copied()),
            cell(r.summary.final_validation_kd),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn format_matrix(rows: &[Option<Vec<f64>>]) -> String {
    rows.iter()
        .map(|r| match r {
            Some(v) => v
                .iter()
                .map(|x| format!("{x:.6}"))
                .collect::<Vec<_>>()
                .join(" "),
            None => "absent".into(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn export_curves(log: &Path, out: &Path) -> Result<(), CliError> {
    for f in [cmkd::trainer::VALIDATION_LOG, cmkd::trainer::CONFUSION_LOG] {
        if !log.join(f).is_file() {
            return Err(CliError::MissingFile(log.join(f)));
        }
    }
    let (validations, snapshots) = TrainingLog::read_curves(log)
        .map_err(|e| CliError::Config(format!("{}: {e}", log.display())))?;
    fs::create_dir_all(out)?;

    let mut w = csv::Writer::from_path(out.join("kd_curve.csv")).map_err(csv_err)?;
    w.write_record(["iter", "kd"]).map_err(csv_err)?;
    for v in &validations {
        w.write_record([
            v.iter.to_string(),
            v.kd.map(|k| k.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("confusion_difference.csv")).map_err(csv_err)?;
    w.write_record(["iter", "mean_abs_difference"])
        .map_err(csv_err)?;
    let mut report = String::new();
    for (iter, a, b) in TrainingLog::snapshot_pairs(&snapshots) {
        let mean = a.distribution.mean_abs_difference(&b.distribution);
        w.write_record([
            iter.to_string(),
            mean.map(|m| m.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
        report.push_str(&format!("iteration {iter}\n"));
        report.push_str(&format!("[A]\n{}\n", format_matrix(&a.distribution.rows)));
        report.push_str(&format!("[B]\n{}\n", format_matrix(&b.distribution.rows)));
        report.push_str(&format!(
            "[|A-B|]\n{}\n",
            format_matrix(&a.distribution.abs_difference(&b.distribution))
        ));
        match mean {
            Some(m) => report.push_str(&format!("mean |A-B| = {m:.6}\n\n")),
            None => report.push_str("mean |A-B| = n/a\n\n"),
        }
    }
    w.flush()?;
    fs::write(out.join("confusion_evolution.txt"), report)?;
    Ok(())
}
