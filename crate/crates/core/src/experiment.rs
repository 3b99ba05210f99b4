//! Seeded experiment runs, their reports and plot data.
//!
//! Output layout under `config.out`:
//!
//! - `<run_id>.json`: one report per run
//! - `<run_id>.meta.json`: wall-clock timestamp of the run
//! - `runs.csv`: one row per round, appended
//! - `sweep.csv`: one row per (alpha, seed), appended by [`alpha_sweep`]

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::selftrain::{cem_trace, run_self_training, CemRound, RoundReport, RunStatus};

pub const SCHEMA_VERSION: u32 = 1;

/// Metric names emitted by [`emit_plot_data`], in output order.
pub const PLOT_METRICS: [&str; 6] =
    ["step1_loss", "step2_final_loss", "mean_target_energy", "selection_fraction", "target_acc", "marginal_kl"];

const RUNS_HEADER: [&str; 14] = [
    "run_id",
    "seed",
    "mode",
    "alpha",
    "round",
    "step1_loss",
    "step2_final_loss",
    "mean_target_energy",
    "selection_fraction",
    "beta",
    "lower_bound",
    "source_acc",
    "target_acc",
    "marginal_kl",
];

const SWEEP_HEADER: [&str; 9] =
    ["alpha", "seed", "run_id", "mode", "status", "rounds", "source_only_acc", "final_target_acc", "final_marginal_kl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_source: usize,
    pub n_target: usize,
    pub dim: usize,
    pub classes: usize,
    pub source_fingerprint: String,
    pub target_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub run_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: DatasetSummary,
    /// Source-only model on the target set.
    pub initial: EvalReport,
    pub rounds: Vec<RoundReport>,
    pub cem: Vec<CemRound>,
    #[serde(rename = "final")]
    pub final_eval: EvalReport,
    pub status: RunStatus,
    pub message: Option<String>,
}

/// Identifier of a run, also its report's file stem.
pub fn run_id(config: &ExperimentConfig, seed: u64) -> String {
    format!("{}-alpha{}-seed{seed}", config.train.mode, config.train.alpha)
}

fn worker_count(seeds: usize) -> usize {
    match std::env::var("EBST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(seeds.max(1)),
        _ => seeds.max(1),
    }
}

/// Runs every seed in memory without touching the file system.
pub fn run_reports(config: &ExperimentConfig) -> Result<Vec<RunReport>> {
    config.validate()?;
    let (source, target) = config.data.load()?;
    let dataset = DatasetSummary {
        n_source: source.len(),
        n_target: target.len(),
        dim: source.dim(),
        classes: source.classes(),
        source_fingerprint: format!("{:016x}", source.fingerprint()),
        target_fingerprint: format!("{:016x}", target.fingerprint()),
    };
    let run_one = |seed: u64| -> Result<RunReport> {
        let outcome = run_self_training(&config.train, &config.model, &source, &target, config.rounds, seed)?;
        let cem = if outcome.reports.is_empty() { Vec::new() } else { cem_trace(&outcome.reports)? };
        Ok(RunReport {
            schema: SCHEMA_VERSION,
            run_id: run_id(config, seed),
            seed,
            config: config.clone(),
            dataset: dataset.clone(),
            initial: outcome.initial,
            rounds: outcome.reports,
            cem,
            final_eval: outcome.final_eval,
            status: outcome.status,
            message: outcome.message,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(config.seeds.len()))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker threads: {e}")))?;
    pool.install(|| config.seeds.par_iter().map(|&s| run_one(s)).collect())
}

/// Serialized report. Identical configs and seeds give identical bytes.
pub fn report_json(report: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

fn append_csv<const N: usize>(path: &Path, header: [&str; N], rows: &[Vec<String>]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header)?;
    }
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn runs_rows(report: &RunReport) -> Vec<Vec<String>> {
    report
        .rounds
        .iter()
        .map(|r| {
            vec![
                report.run_id.clone(),
                report.seed.to_string(),
                report.config.train.mode.to_string(),
                report.config.train.alpha.to_string(),
                r.round.to_string(),
                r.step1_loss_after.to_string(),
                r.step2_final_loss.to_string(),
                r.mean_target_energy.to_string(),
                r.selection_fraction.to_string(),
                r.beta.to_string(),
                r.lower_bound.to_string(),
                r.source_acc.to_string(),
                r.target_acc.to_string(),
                r.marginal_kl.to_string(),
            ]
        })
        .collect()
}

/// Runs every seed of `config`, writes one JSON report per seed plus a
/// timestamp sidecar, and appends one row per round to `runs.csv`.
///
/// Returns the report paths in seed order. A diverged seed is reported with
/// status `diverged`; the others are unaffected.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let reports = run_reports(config)?;
    write_reports(&config.out, &reports)
}

/// Writes reports, sidecars and `runs.csv` rows for already computed runs.
pub fn write_reports(out: &Path, reports: &[RunReport]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut paths = Vec::with_capacity(reports.len());
    let mut rows = Vec::new();
    for report in reports {
        if report.status == RunStatus::Diverged {
            log::warn!("{} diverged: {}", report.run_id, report.message.as_deref().unwrap_or("no detail"));
        }
        let path = out.join(format!("{}.json", report.run_id));
        fs::write(&path, report_json(report)?)?;
        let meta = serde_json::json!({ "run_id": report.run_id, "finished_unix": stamp });
        fs::write(out.join(format!("{}.meta.json", report.run_id)), format!("{meta}\n"))?;
        rows.extend(runs_rows(report));
        paths.push(path);
    }
    append_csv(&out.join("runs.csv"), RUNS_HEADER, &rows)?;
    Ok(paths)
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub run_id: String,
    pub mode: String,
    pub status: RunStatus,
    pub rounds: usize,
    pub source_only_acc: f64,
    pub final_target_acc: f64,
    pub final_marginal_kl: f64,
}

impl SweepRow {
    pub fn from_report(report: &RunReport) -> Self {
        SweepRow {
            alpha: report.config.train.alpha,
            seed: report.seed,
            run_id: report.run_id.clone(),
            mode: report.config.train.mode.to_string(),
            status: report.status,
            rounds: report.rounds.len(),
            source_only_acc: report.initial.mean_acc,
            final_target_acc: report.final_eval.mean_acc,
            final_marginal_kl: report.final_eval.marginal_kl,
        }
    }

    pub fn status_str(&self) -> &'static str {
        match self.status {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        }
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.alpha.to_string(),
            self.seed.to_string(),
            self.run_id.clone(),
            self.mode.clone(),
            self.status_str().to_string(),
            self.rounds.to_string(),
            self.source_only_acc.to_string(),
            self.final_target_acc.to_string(),
            self.final_marginal_kl.to_string(),
        ]
    }
}

/// Appends rows to `sweep.csv` in `out`.
pub fn append_sweep_csv(out: &Path, rows: &[SweepRow]) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join("sweep.csv");
    append_csv(&path, SWEEP_HEADER, &rows.iter().map(SweepRow::record).collect::<Vec<_>>())?;
    Ok(path)
}

/// Runs `config` once per distinct alpha (duplicates are dropped with a
/// warning), writing the usual per-run outputs and one `sweep.csv` row per
/// (alpha, seed).
pub fn alpha_sweep(config: &ExperimentConfig, alphas: &[f64]) -> Result<(PathBuf, Vec<SweepRow>)> {
    if alphas.is_empty() {
        return Err(Error::config("alpha sweep needs at least one alpha"));
    }
    let mut distinct: Vec<f64> = Vec::with_capacity(alphas.len());
    for &a in alphas {
        if distinct.iter().any(|d| d.to_bits() == a.to_bits()) {
            log::warn!("duplicate alpha {a} in sweep ignored");
        } else {
            distinct.push(a);
        }
    }
    let mut rows = Vec::new();
    for alpha in distinct {
        let mut cfg = config.clone();
        cfg.train.alpha = alpha;
        let reports = run_reports(&cfg)?;
        write_reports(&cfg.out, &reports)?;
        rows.extend(reports.iter().map(SweepRow::from_report));
    }
    let path = append_sweep_csv(&config.out, &rows)?;
    Ok((path, rows))
}

#[derive(Deserialize)]
struct PlotSource {
    run_id: String,
    rounds: Vec<RoundReport>,
}

fn plot_values(r: &RoundReport) -> [f64; 6] {
    [r.step1_loss_after, r.step2_final_loss, r.mean_target_energy, r.selection_fraction, r.target_acc, r.marginal_kl]
}

/// Writes long-format `run_id,round,metric,value` rows for the metrics in
/// [`PLOT_METRICS`]. Unreadable reports are skipped with a warning; it is an
/// error only if every report is skipped. Returns the number of rows.
pub fn emit_plot_data(reports: &[PathBuf], out: &Path) -> Result<usize> {
    if reports.is_empty() {
        return Err(Error::config("plot data needs at least one report"));
    }
    let mut sources = Vec::new();
    for path in reports {
        let parsed = fs::read_to_string(path)
            .map_err(Error::from)
            .and_then(|t| serde_json::from_str::<PlotSource>(&t).map_err(Error::from));
        match parsed {
            Ok(mut s) => {
                s.rounds.sort_by_key(|r| r.round);
                sources.push(s);
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if sources.is_empty() {
        return Err(Error::config("no readable reports"));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["run_id", "round", "metric_name", "value"])?;
    let mut count = 0;
    for s in &sources {
        for r in &s.rounds {
            for (name, value) in PLOT_METRICS.iter().zip(plot_values(r)) {
                w.write_record([s.run_id.as_str(), &r.round.to_string(), name, &value.to_string()])?;
                count += 1;
            }
        }
    }
    w.flush()?;
    Ok(count)
}
