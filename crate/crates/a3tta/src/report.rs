//! Run artifacts and cross-run comparison.
//!
//! Every command materializes its results as plain files in one output
//! directory: a JSONL step log, CSV metric tables, the final bank snapshot,
//! and a small metadata record. The comparison path loads several such
//! directories and lines their per-domain statistics up side by side.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! re-run that computes identical values produces byte-identical tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptationState, BatchResult, FarTrace};
use crate::anchorbank::InsertDecision;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, GroupSummary, MetricRecord};
use crate::scalar::Scalar;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const BRI_SERIES_FILE: &str = "bri.csv";
pub const BANK_MATRIX_FILE: &str = "bank.tsv";
pub const BANK_META_FILE: &str = "bank_meta.json";
pub const INCIDENTS_FILE: &str = "incidents.txt";

/// Identity of one run directory, enough to merge it with others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub method: String,
    pub domains: Vec<String>,
    pub num_classes: usize,
    pub rounds: usize,
    pub seed: u64,
}

/// One logged batch. Non-finite values are stored as `null` via `Option`
/// so the log stays machine-readable even after an incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub round: usize,
    pub domain: String,
    pub scores: Vec<Option<f64>>,
    pub bank_decisions: Vec<InsertDecision>,
    pub far: Vec<Option<FarTrace>>,
    pub sem: Option<f64>,
    pub be: Option<f64>,
    pub mt: Option<f64>,
    pub total: Option<f64>,
    pub ema_rate: Option<f64>,
    pub bri: Option<f64>,
    /// Candidates admitted to the bank in this batch.
    pub insertions: usize,
    pub step_applied: bool,
    pub wall_ms: f64,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl StepRecord {
    pub fn from_batch(r: &BatchResult, round: usize, domain: &str) -> Self {
        Self {
            step: r.step,
            round,
            domain: domain.to_string(),
            scores: r.scores.iter().map(|&s| finite(s)).collect(),
            bank_decisions: r.bank_decisions.clone(),
            far: r.far.clone(),
            sem: finite(r.losses.sem),
            be: finite(r.losses.be),
            mt: finite(r.losses.mt),
            total: finite(r.losses.total),
            ema_rate: r.ema_rate,
            bri: r.bri,
            insertions: r.bank_decisions.iter().filter(|d| d.inserted()).count(),
            step_applied: r.step_applied,
            wall_ms: r.wall_ms,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_run_meta(dir: &Path, meta: &RunMeta) -> Result<()> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Format { path: dir.join(RUN_META_FILE), message: e.to_string() })?;
    write_file(&dir.join(RUN_META_FILE), &json)
}

pub fn read_run_meta(dir: &Path) -> Result<RunMeta> {
    let path = dir.join(RUN_META_FILE);
    serde_json::from_str(&read_file(&path)?)
        .map_err(|e| Error::Format { path, message: e.to_string() })
}

pub fn write_run_log(dir: &Path, steps: &[StepRecord]) -> Result<()> {
    let path = dir.join(RUN_LOG_FILE);
    let mut out = String::new();
    for s in steps {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Format { path: path.clone(), message: e.to_string() })?;
        out.push_str(&line);
        out.push('\n');
    }
    write_file(&path, &out)
}

pub fn read_run_log(dir: &Path) -> Result<Vec<StepRecord>> {
    let path = dir.join(RUN_LOG_FILE);
    let mut steps = Vec::new();
    for (i, line) in read_file(&path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        steps.push(serde_json::from_str(line).map_err(|e| Error::Format {
            path: path.clone(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(steps)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-image metric table. One `dice_k`/`assd_k` column pair per class;
/// empty ASSD cells mean the distance was undefined for that class.
pub fn write_metrics_csv(dir: &Path, records: &[MetricRecord]) -> Result<()> {
    let path = dir.join(METRICS_FILE);
    let num_classes = records.first().map_or(0, |r| r.dice.len());
    let mut out = String::from("image_id,domain,round,miou");
    for k in 0..num_classes {
        let _ = write!(out, ",dice_{k}");
    }
    for k in 0..num_classes {
        let _ = write!(out, ",assd_{k}");
    }
    out.push('\n');
    for r in records {
        if r.image_id.contains(',') || r.domain.contains(',') {
            return Err(Error::InvalidArgument(format!(
                "metric identifiers must not contain commas: {}/{}",
                r.image_id, r.domain
            )));
        }
        let _ = write!(out, "{},{},{},{}", r.image_id, r.domain, r.round, r.miou);
        for d in &r.dice {
            let _ = write!(out, ",{d}");
        }
        for a in &r.assd {
            let _ = write!(out, ",{}", fmt_opt(*a));
        }
        out.push('\n');
    }
    write_file(&path, &out)
}

pub fn read_metrics_csv(dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = dir.join(METRICS_FILE);
    let text = read_file(&path)?;
    let bad = |line: usize, msg: String| Error::Format {
        path: path.clone(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(1, "missing header".into()))?;
    let num_classes = header.split(',').filter(|c| c.starts_with("dice_")).count();
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + 2 * num_classes {
            return Err(bad(
                i + 1,
                format!("expected {} fields, got {}", 4 + 2 * num_classes, fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| bad(i + 1, format!("bad float {s:?}: {e}")))
        };
        let mut dice = Vec::with_capacity(num_classes);
        let mut assd = Vec::with_capacity(num_classes);
        for k in 0..num_classes {
            dice.push(parse(fields[4 + k])?);
        }
        for k in 0..num_classes {
            let f = fields[4 + num_classes + k];
            assd.push(if f.is_empty() { None } else { Some(parse(f)?) });
        }
        records.push(MetricRecord {
            image_id: fields[0].to_string(),
            domain: fields[1].to_string(),
            round: fields[2]
                .parse()
                .map_err(|e| bad(i + 1, format!("bad round: {e}")))?,
            dice,
            assd,
            miou: parse(fields[3])?,
        });
    }
    Ok(records)
}

/// Aggregates per (round, domain). The tab separator cannot appear in
/// domain names, so the composite key splits back unambiguously.
pub fn summarize(records: &[MetricRecord]) -> Result<Vec<(usize, String, GroupSummary)>> {
    let groups = aggregate(records.iter(), |r| format!("{}\t{}", r.round, r.domain))?;
    groups
        .into_iter()
        .map(|g| {
            let (round, domain) = g
                .group
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument("malformed group key".into()))?;
            let round: usize = round
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad round in group key: {e}")))?;
            Ok((round, domain.to_string(), g))
        })
        .collect()
}

pub fn write_summary_csv(dir: &Path, records: &[MetricRecord]) -> Result<()> {
    let path = dir.join(SUMMARY_FILE);
    let mut out = String::from(
        "round,domain,count,dice_mean,dice_std,miou_mean,miou_std,assd_mean,assd_std,assd_excluded\n",
    );
    if !records.is_empty() {
        for (round, domain, g) in summarize(records)? {
            let _ = writeln!(
                out,
                "{round},{domain},{},{},{},{},{},{},{},{}",
                g.count,
                g.dice_mean,
                g.dice_std,
                g.miou_mean,
                g.miou_std,
                fmt_opt(g.assd_mean),
                fmt_opt(g.assd_std),
                g.assd_excluded
            );
        }
    }
    write_file(&path, &out)
}

/// Per-batch diagnostics series: the redundancy index and how many
/// candidates entered the bank, in stream order.
pub fn write_bri_series(dir: &Path, steps: &[StepRecord]) -> Result<()> {
    let path = dir.join(BRI_SERIES_FILE);
    let mut out = String::from("step,round,domain,bri,insertions\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.step,
            s.round,
            s.domain,
            fmt_opt(s.bri),
            s.insertions
        );
    }
    write_file(&path, &out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankEntryMeta {
    pub slot: usize,
    pub score: f64,
    pub insertion_step: u64,
}

/// Dumps the final bank: one tab-separated feature row per slot, plus the
/// slot metadata. The matrix feeds external embedding/plotting tools.
pub fn write_bank_snapshot<F: Scalar>(dir: &Path, state: &AdaptationState<F>) -> Result<()> {
    let mut matrix = String::new();
    let mut meta = Vec::new();
    for (slot, entry) in state.bank.entries().iter().enumerate() {
        let row: Vec<String> = entry
            .feature
            .iter()
            .map(|v| (*v).to_f64().to_string())
            .collect();
        matrix.push_str(&row.join("\t"));
        matrix.push('\n');
        meta.push(BankEntryMeta {
            slot,
            score: entry.score,
            insertion_step: entry.insertion_step,
        });
    }
    write_file(&dir.join(BANK_MATRIX_FILE), &matrix)?;
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format {
        path: dir.join(BANK_META_FILE),
        message: e.to_string(),
    })?;
    write_file(&dir.join(BANK_META_FILE), &json)
}

pub fn write_incidents(dir: &Path, incidents: &[String]) -> Result<()> {
    if incidents.is_empty() {
        return Ok(());
    }
    let mut out = String::new();
    for line in incidents {
        out.push_str(line);
        out.push('\n');
    }
    write_file(&dir.join(INCIDENTS_FILE), &out)
}

/// One run directory pulled back into memory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub meta: RunMeta,
    pub records: Vec<MetricRecord>,
    pub steps: Vec<StepRecord>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let meta = read_run_meta(dir)?;
    let records = read_metrics_csv(dir)?;
    let steps = if dir.join(RUN_LOG_FILE).exists() {
        read_run_log(dir)?
    } else {
        Vec::new()
    };
    Ok(LoadedRun {
        meta,
        records,
        steps,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CellStats {
    pub count: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub round: usize,
    pub domain: String,
    /// One entry per method column; `None` when that run has no images in
    /// this (round, domain) cell.
    pub cells: Vec<Option<CellStats>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Lines several runs up per (round, domain). Runs must agree on the label
/// space and share at least one domain with the first run; method names are
/// disambiguated with an index suffix when they repeat.
pub fn compare_runs(runs: &[LoadedRun]) -> Result<ComparisonTable> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to compare".into()));
    }
    let first = &runs[0];
    let first_domains: BTreeSet<&String> = first.meta.domains.iter().collect();
    for run in &runs[1..] {
        if run.meta.num_classes != first.meta.num_classes {
            return Err(Error::Incompatible(format!(
                "label spaces differ: {} classes ({}) vs {} classes ({})",
                first.meta.num_classes, first.meta.method, run.meta.num_classes, run.meta.method
            )));
        }
        let domains: BTreeSet<&String> = run.meta.domains.iter().collect();
        if first_domains.intersection(&domains).next().is_none() {
            return Err(Error::Incompatible(format!(
                "runs share no domains: {:?} ({}) vs {:?} ({})",
                first.meta.domains, first.meta.method, run.meta.domains, run.meta.method
            )));
        }
    }

    let mut methods: Vec<String> = runs.iter().map(|r| r.meta.method.clone()).collect();
    let mut seen = BTreeSet::new();
    let duplicated: BTreeSet<String> = methods
        .iter()
        .filter(|m| !seen.insert((*m).clone()))
        .cloned()
        .collect();
    for (i, m) in methods.iter_mut().enumerate() {
        if duplicated.contains(m.as_str()) {
            *m = format!("{m}#{i}");
        }
    }

    let mut keys: BTreeSet<(usize, String)> = BTreeSet::new();
    let mut per_run: Vec<Vec<(usize, String, GroupSummary)>> = Vec::with_capacity(runs.len());
    for run in runs {
        let summary = if run.records.is_empty() {
            Vec::new()
        } else {
            summarize(&run.records)?
        };
        for (round, domain, _) in &summary {
            keys.insert((*round, domain.clone()));
        }
        per_run.push(summary);
    }

    let rows = keys
        .into_iter()
        .map(|(round, domain)| {
            let cells = per_run
                .iter()
                .map(|summary| {
                    summary
                        .iter()
                        .find(|(r, d, _)| *r == round && *d == domain)
                        .map(|(_, _, g)| CellStats {
                            count: g.count,
                            dice_mean: g.dice_mean,
                            dice_std: g.dice_std,
                        })
                })
                .collect();
            ComparisonRow {
                round,
                domain,
                cells,
            }
        })
        .collect();

    Ok(ComparisonTable { methods, rows })
}

/// Machine-readable comparison: one `<method>_dice_mean/_dice_std` column
/// pair per run.
pub fn write_comparison_csv(dir: &Path, table: &ComparisonTable) -> Result<()> {
    let path = dir.join("comparison.csv");
    let mut out = String::from("round,domain");
    for m in &table.methods {
        let _ = write!(out, ",{m}_dice_mean,{m}_dice_std");
    }
    out.push('\n');
    for row in &table.rows {
        let _ = write!(out, "{},{}", row.round, row.domain);
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    let _ = write!(out, ",{},{}", c.dice_mean, c.dice_std);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    write_file(&path, &out)
}

/// Fixed-width text rendering of a comparison, `mean±std (n)` per cell.
pub fn render_comparison(table: &ComparisonTable) -> String {
    let mut headers = vec!["round".to_string(), "domain".to_string()];
    headers.extend(table.methods.iter().cloned());
    let mut grid: Vec<Vec<String>> = vec![headers];
    for row in &table.rows {
        let mut line = vec![row.round.to_string(), row.domain.clone()];
        for cell in &row.cells {
            line.push(match cell {
                Some(c) => format!("{:.4}±{:.4} (n={})", c.dice_mean, c.dice_std, c.count),
                None => "-".to_string(),
            });
        }
        grid.push(line);
    }
    let cols = grid[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &grid {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
