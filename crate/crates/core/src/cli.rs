//! Batch commands behind the `layerfed` binary: `run`, `compare`, `sweep-r`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig, PrepareError, Prepared};
use crate::fusion::WEIGHTS_CSV_HEADER;
use crate::runtime::{final_accuracy, Federation, Method, RoundMetrics};

/// Rounds averaged into the reported final accuracy.
pub const FINAL_WINDOW: usize = 5;

pub const METRICS_CSV_HEADER: &str = "round,client,train_loss,test_loss,test_acc";

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(msg) => write!(f, "error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<PrepareError> for CliError {
    fn from(e: PrepareError) -> Self {
        match e {
            PrepareError::Config(c) => CliError::Config(c),
            PrepareError::Runtime(r) => r.into(),
        }
    }
}

/// Flags shared by all commands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dump_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub method: Method,
    pub rounds: usize,
    pub clients: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub acc_mean: f64,
    pub acc_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
}

fn load(config_path: &Path, opts: &RunOptions) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// `round,client,train_loss,test_loss,test_acc` rows for every round.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut s = String::new();
    s.push_str(METRICS_CSV_HEADER);
    s.push('\n');
    for m in metrics {
        for c in &m.clients {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                m.round, c.client_id, c.train_loss, c.test_loss, c.test_accuracy
            );
        }
    }
    s
}

fn simulate(
    prepared: Prepared,
    mut on_round: impl FnMut(&crate::runtime::RoundReport) -> crate::Result<()>,
) -> Result<Vec<RoundMetrics>, CliError> {
    let mut fed = Federation::new(prepared.model, prepared.method, prepared.shards)?;
    Ok(fed.run(|report| {
        let m = &report.metrics;
        eprintln!(
            "round {:>3}: acc {:.4} ± {:.4}, test loss {:.4} ({:.0} ms)",
            m.round, m.mean_accuracy, m.std_accuracy, m.mean_test_loss, m.wall_ms
        );
        on_round(report)
    })?)
}

fn summarize(method: Method, metrics: &[RoundMetrics]) -> Summary {
    let (acc_mean, acc_std) = final_accuracy(metrics, FINAL_WINDOW);
    Summary {
        method,
        rounds: metrics.len(),
        clients: metrics.first().map_or(0, |m| m.clients.len()),
        acc_mean,
        acc_std,
    }
}

/// One experiment: writes `metrics.csv`, `summary.json` and, with
/// `dump_weights`, `weights_round_<t>.csv`.
pub fn cmd_run(config_path: &Path, opts: &RunOptions) -> Result<Summary, CliError> {
    let (cfg, out) = load(config_path, opts)?;
    let prepared = cfg.prepare()?;
    let mut dumps = Vec::new();
    let metrics = simulate(prepared, |report| {
        if opts.dump_weights {
            let mut s = String::from(WEIGHTS_CSV_HEADER);
            s.push('\n');
            report.weights.write_csv_rows(report.metrics.round, &mut s);
            dumps.push((report.metrics.round, s));
        }
        Ok(())
    })?;
    let summary = summarize(cfg.method, &metrics);
    write_file(&out.join("metrics.csv"), &metrics_csv(&metrics))?;
    for (round, csv) in dumps {
        write_file(&out.join(format!("weights_round_{round}.csv")), &csv)?;
    }
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join("summary.json"), &(json + "\n"))?;
    Ok(summary)
}

/// Parses a comma-separated method list; an empty list is a config error.
pub fn parse_methods(list: &str) -> Result<Vec<Method>, CliError> {
    let methods = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Method>()
                .map_err(|e| CliError::Config(ConfigError::new("--methods", e.to_string())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if methods.is_empty() {
        return Err(CliError::Config(ConfigError::new("--methods", "no methods given")));
    }
    Ok(methods)
}

/// Runs each method on the same data and partition; writes `compare.csv`
/// sorted by final accuracy (descending) plus `metrics_<method>.csv`.
pub fn cmd_compare(config_path: &Path, methods: &[Method], opts: &RunOptions) -> Result<Vec<CompareRow>, CliError> {
    if methods.is_empty() {
        return Err(CliError::Config(ConfigError::new("--methods", "no methods given")));
    }
    let (mut cfg, out) = load(config_path, opts)?;
    let mut unique: Vec<Method> = Vec::new();
    for &m in methods {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }
    // Validate every variant before spending time on any of them.
    for &m in &unique {
        cfg.method = m;
        cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(unique.len());
    for &m in &unique {
        cfg.method = m;
        eprintln!("== {m}");
        let metrics = simulate(cfg.prepare()?, |_| Ok(()))?;
        write_file(&out.join(format!("metrics_{m}.csv")), &metrics_csv(&metrics))?;
        let s = summarize(m, &metrics);
        rows.push(CompareRow {
            method: m,
            acc_mean: s.acc_mean,
            acc_std: s.acc_std,
        });
    }
    rows.sort_by(|a, b| b.acc_mean.total_cmp(&a.acc_mean));
    let mut csv = String::from("method,final_acc_mean,final_acc_std\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.method, r.acc_mean, r.acc_std);
    }
    write_file(&out.join("compare.csv"), &csv)?;
    Ok(rows)
}

pub fn parse_thresholds(list: &str) -> Result<Vec<usize>, CliError> {
    let rs = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| CliError::Config(ConfigError::new("--r", format!("`{s}`: {e}"))))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if rs.is_empty() {
        return Err(CliError::Config(ConfigError::new("--r", "no thresholds given")));
    }
    Ok(rs)
}

/// Runs pfedcfr once per threshold with identical seeds; writes `sweep.csv`
/// and `metrics_r<r>.csv`. Duplicate thresholds are dropped with a warning.
pub fn cmd_sweep_r(config_path: &Path, thresholds: &[usize], opts: &RunOptions) -> Result<Vec<SweepRow>, CliError> {
    if thresholds.is_empty() {
        return Err(CliError::Config(ConfigError::new("--r", "no thresholds given")));
    }
    let (mut cfg, out) = load(config_path, opts)?;
    if cfg.method != Method::PFedCfr {
        eprintln!("warning: sweep-r always runs pfedcfr (config says {})", cfg.method);
        cfg.method = Method::PFedCfr;
    }
    let mut unique = Vec::new();
    for &r in thresholds {
        if unique.contains(&r) {
            eprintln!("warning: duplicate threshold r={r} ignored");
        } else {
            unique.push(r);
        }
    }
    for &r in &unique {
        cfg.training.threshold = Some(r);
        cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(unique.len());
    for &r in &unique {
        cfg.training.threshold = Some(r);
        eprintln!("== r={r}");
        let metrics = simulate(cfg.prepare()?, |_| Ok(()))?;
        write_file(&out.join(format!("metrics_r{r}.csv")), &metrics_csv(&metrics))?;
        let (acc_mean, acc_std) = final_accuracy(&metrics, FINAL_WINDOW);
        rows.push(SweepRow { r, acc_mean, acc_std });
    }
    let mut csv = String::from("r,final_acc_mean,final_acc_std\n");
    for row in &rows {
        let _ = writeln!(csv, "{},{},{}", row.r, row.acc_mean, row.acc_std);
    }
    write_file(&out.join("sweep.csv"), &csv)?;
    Ok(rows)
}
