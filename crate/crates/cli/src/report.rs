//! Run reports: per-strategy accuracy rows, CSV emission, and the
//! human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use xaimb_core::MethodRanking;

pub const REPORT_HEADER: &str = "strategy,dataset,accuracy,seed,config_hash";

/// One accuracy measurement, as it appears in `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRow {
    pub strategy: String,
    pub dataset: String,
    pub accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl StrategyRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.strategy, self.dataset, self.accuracy, self.seed, self.config_hash
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            bail!("expected 5 fields, got {}: '{line}'", fields.len());
        }
        Ok(StrategyRow {
            strategy: fields[0].to_string(),
            dataset: fields[1].to_string(),
            accuracy: fields[2].parse()?,
            seed: fields[3].parse()?,
            config_hash: fields[4].to_string(),
        })
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub rows: Vec<StrategyRow>,
    pub curve_files: Vec<PathBuf>,
    pub ranking: Vec<MethodRanking>,
    pub config_hash: String,
    pub seed: u64,
    pub wall_seconds: f64,
}

/// Fixed strategy ordering for reports.
fn strategy_order(name: &str) -> usize {
    ["baseline", "binary_a", "binary_b", "soft"]
        .iter()
        .position(|s| *s == name)
        .unwrap_or(usize::MAX)
}

pub fn sort_rows(rows: &mut [StrategyRow]) {
    rows.sort_by(|a, b| {
        strategy_order(&a.strategy)
            .cmp(&strategy_order(&b.strategy))
            .then_with(|| a.strategy.cmp(&b.strategy))
            .then_with(|| a.seed.cmp(&b.seed))
            .then_with(|| a.config_hash.cmp(&b.config_hash))
    });
}

/// Appends a row to a results fragment, deduplicating exact repeats so a
/// cached rerun leaves the file byte-identical.
pub fn append_row(path: &Path, row: &StrategyRow) -> Result<()> {
    let mut rows = if path.exists() {
        read_rows(path)?
    } else {
        Vec::new()
    };
    let key = |r: &StrategyRow| (r.strategy.clone(), r.seed, r.config_hash.clone());
    rows.retain(|r| key(r) != key(row));
    rows.push(row.clone());
    sort_rows(&mut rows);
    write_rows(path, &rows)
}

pub fn read_rows(path: &Path) -> Result<Vec<StrategyRow>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading rows from {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != REPORT_HEADER {
                bail!("{}: unexpected header '{line}'", path.display());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        rows.push(StrategyRow::from_csv(line)?);
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[StrategyRow]) -> Result<()> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes the consolidated report CSV with a stable column and row order.
pub fn report_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut rows = report.rows.clone();
    sort_rows(&mut rows);
    write_rows(path, &rows)
}

/// Human-readable companion to the CSV. Wall time lives here, not in the
/// CSV, so byte-identical reruns stay byte-identical.
pub fn write_summary(report: &RunReport, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "run summary");
    let _ = writeln!(out, "===========");
    let _ = writeln!(out, "config hash: {}", report.config_hash);
    let _ = writeln!(out, "seed:        {}", report.seed);
    let _ = writeln!(out, "wall time:   {:.1}s", report.wall_seconds);
    let _ = writeln!(out);
    if !report.rows.is_empty() {
        let _ = writeln!(out, "accuracy by strategy");
        let mut rows = report.rows.clone();
        sort_rows(&mut rows);
        for row in &rows {
            let _ = writeln!(
                out,
                "  {:<10} {:<14} {:.4}  (seed {})",
                row.strategy, row.dataset, row.accuracy, row.seed
            );
        }
        let _ = writeln!(out);
    }
    if !report.ranking.is_empty() {
        let _ = writeln!(out, "attribution ranking (area between perturbation curves)");
        for (i, r) in report.ranking.iter().enumerate() {
            let _ = writeln!(out, "  {}. {:<22} abpc = {:.4}", i + 1, r.tag, r.abpc);
        }
        let _ = writeln!(out);
    }
    if !report.curve_files.is_empty() {
        let _ = writeln!(out, "curve files");
        for f in &report.curve_files {
            let _ = writeln!(out, "  {}", f.display());
        }
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
