//! Cross-method comparison tables rebuilt from run directories.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use htfl_core::metrics::{parse_rounds_row, summarize, summarize_repeat, RoundReport, MB, SummaryRow};

use crate::config::RunConfig;
use crate::error::{runtime, CliResult};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub run: String,
    pub method: String,
    pub repeats: usize,
    pub summary: Vec<SummaryRow>,
}

impl RunRow {
    fn metric(&self, name: &str) -> (f64, f64) {
        self.summary
            .iter()
            .find(|r| r.metric == name)
            .map(|r| (r.stat.mean, r.stat.std))
            .unwrap_or((f64::NAN, f64::NAN))
    }
}

/// Reads `rounds.csv` back into per-repeat report streams.
pub fn read_rounds(path: &Path) -> CliResult<Vec<Vec<RoundReport>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut by_repeat: BTreeMap<usize, Vec<RoundReport>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let fields: Vec<&str> = rec.iter().collect();
        let (rep, r) =
            parse_rounds_row(&fields).map_err(|e| runtime(format!("{} row {}: {e}", path.display(), i + 2)))?;
        by_repeat.entry(rep).or_default().push(r);
    }
    Ok(by_repeat.into_values().collect())
}

/// Summarises one run directory from its files alone.
pub fn load_run(dir: &Path) -> CliResult<RunRow> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| runtime(format!("{}: {e}", cfg_path.display())))?;
    let cfg = RunConfig::from_toml(&text).map_err(|e| runtime(format!("{}: {e}", cfg_path.display())))?;
    let streams = read_rounds(&dir.join(ROUNDS_FILE))?;
    if streams.is_empty() {
        return Err(runtime(format!("{}: no completed rounds", dir.join(ROUNDS_FILE).display())));
    }
    let exp = &cfg.experiment;
    let repeats = streams
        .iter()
        .map(|s| summarize_repeat(s, exp.convergence_window, exp.convergence_threshold))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let summary = summarize(&repeats).map_err(|e| runtime(e.to_string()))?;
    let run = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunRow {
        run,
        method: exp.method.method.name().to_string(),
        repeats: repeats.len(),
        summary,
    })
}

/// Run directories under `root`, or `root` itself when it is one.
pub fn find_runs(root: &Path) -> CliResult<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(runtime(format!("results directory {} does not exist", root.display())));
    }
    let is_run = |d: &Path| d.join(ROUNDS_FILE).is_file() && d.join(CONFIG_FILE).is_file();
    if is_run(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let p = entry?.path();
        if p.is_dir() && is_run(&p) {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        return Err(runtime(format!("no completed runs under {}", root.display())));
    }
    Ok(dirs)
}

/// Rows sorted by method name, ties broken by run name.
pub fn collect(root: &Path) -> CliResult<Vec<RunRow>> {
    let mut rows = find_runs(root)?
        .iter()
        .map(|d| load_run(d))
        .collect::<CliResult<Vec<_>>>()?;
    rows.sort_by(|a, b| (&a.method, &a.run).cmp(&(&b.method, &b.run)));
    Ok(rows)
}

pub fn render(rows: &[RunRow]) -> String {
    let header = [
        "method",
        "run",
        "repeats",
        "final_acc",
        "max_smoothed_acc",
        "converged_round",
        "up_MB/round",
        "down_MB/round",
    ];
    let pm = |(m, s): (f64, f64), scale: f64, prec: usize| format!("{:.prec$}±{:.prec$}", m * scale, s * scale);
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        table.push(vec![
            r.method.clone(),
            r.run.clone(),
            r.repeats.to_string(),
            pm(r.metric("final_acc"), 100.0, 2),
            pm(r.metric("max_smoothed_acc"), 100.0, 2),
            pm(r.metric("converged_round"), 1.0, 1),
            format!("{:.4}", r.metric("up_bytes_per_round").0 / MB),
            format!("{:.4}", r.metric("down_bytes_per_round").0 / MB),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|j| table.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(s, "{}", rule.join("  "));
        }
    }
    s
}
