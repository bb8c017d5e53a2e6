use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use htfl_core::data::{partition, Dataset, PartitionResult};
use htfl_core::engine::{run_experiment_with, ExperimentResult};
use htfl_core::metrics::{rounds_csv_header, rounds_csv_row, summary_csv, RoundReport};
use htfl_core::HtflError;

use crate::config::{parse_value, set_path, RunConfig};
use crate::error::{config, runtime, CliError, CliResult};
use crate::partition_file::{check_against, histogram_table, parse_partition, write_partition};
use crate::report::{self, CONFIG_FILE, ROUNDS_FILE, SUMMARY_FILE};

pub struct PartitionOutput {
    pub partition_path: PathBuf,
    pub histogram_path: PathBuf,
    pub histogram: String,
}

pub fn cmd_partition(cfg: &RunConfig) -> CliResult<PartitionOutput> {
    let ds = cfg.dataset.load()?;
    let part = partition(&ds, &cfg.experiment.scenario_for_run(), cfg.experiment.seed)?;
    let partition_path = if cfg.partition_file.is_empty() {
        cfg.output_dir.join("partition.txt")
    } else {
        PathBuf::from(&cfg.partition_file)
    };
    if let Some(parent) = partition_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&partition_path, write_partition(&part))?;
    let histogram = histogram_table(&part, &ds);
    let histogram_path = partition_path.with_extension("hist.tsv");
    fs::write(&histogram_path, &histogram)?;
    Ok(PartitionOutput {
        partition_path,
        histogram_path,
        histogram,
    })
}

pub fn load_partition_file(path: &Path, ds: &Dataset) -> CliResult<PartitionResult> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("cannot read partition {}: {e}", path.display())))?;
    let p = parse_partition(&text)?;
    check_against(&p, ds)?;
    Ok(p)
}

/// Runs `cfg` into `dir`, writing `config.toml`, then `rounds.csv` one
/// flushed row per round, then `summary.csv` once every repeat is done.
///
/// `on_round(repeat, report)` sees each round after its row is on disk;
/// an error from it stops the run.
pub fn run_to_dir(
    cfg: &RunConfig,
    dir: &Path,
    mut on_round: impl FnMut(usize, &RoundReport) -> CliResult<()>,
) -> CliResult<ExperimentResult> {
    let ds = cfg.dataset.load()?;
    let fixed = if cfg.partition_file.is_empty() {
        None
    } else {
        Some(load_partition_file(Path::new(&cfg.partition_file), &ds)?)
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let _ = fs::remove_file(dir.join(SUMMARY_FILE));
    let n = cfg.experiment.n_clients;
    let mut rounds = File::create(dir.join(ROUNDS_FILE))?;
    writeln!(rounds, "{}", rounds_csv_header(n))?;

    let mut hook_error = None;
    let result = run_experiment_with(&cfg.experiment, &ds, fixed.as_ref(), |j, r| {
        writeln!(rounds, "{}", rounds_csv_row(j, r, n)).map_err(HtflError::Io)?;
        rounds.flush().map_err(HtflError::Io)?;
        on_round(j, r).map_err(|e| {
            let msg = e.to_string();
            hook_error = Some(e);
            HtflError::InvalidArgument(msg)
        })
    });
    if let Some(e) = hook_error {
        return Err(e);
    }
    let result = result.map_err(|e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(m),
        CliError::Runtime(m) => runtime(format!("run failed: {m}")),
    })?;
    fs::write(dir.join(SUMMARY_FILE), summary_csv(&result.summary))?;
    Ok(result)
}

/// Directory of a plain `run`: `<output_dir>/<method>`.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(cfg.experiment.method.method.name())
}

pub fn cmd_run(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = run_dir(cfg);
    run_to_dir(cfg, &dir, |_, _| Ok(()))?;
    Ok(dir)
}

pub fn cmd_report(root: &Path) -> CliResult<String> {
    let rows = report::collect(root)?;
    Ok(report::render(&rows))
}

pub const SWEEP_AXES: [(&str, &str); 6] = [
    ("alpha", "experiment.scenario.alpha"),
    ("rho", "experiment.participation"),
    ("epochs", "experiment.local_epochs"),
    ("feature_dim", "experiment.zoo.feature_dim"),
    ("group", "experiment.group"),
    ("method", "experiment.method.method"),
];

pub fn sweep_key(axis: &str) -> CliResult<&'static str> {
    SWEEP_AXES
        .iter()
        .find(|(a, _)| *a == axis)
        .map(|(_, k)| *k)
        .ok_or_else(|| {
            let names: Vec<&str> = SWEEP_AXES.iter().map(|(a, _)| *a).collect();
            config(format!("sweep axis `{axis}` is not one of {}", names.join(", ")))
        })
}

/// Expands a sweep into one config per value.
pub fn sweep_configs(base: &RunConfig, axis: &str, values: &[String]) -> CliResult<Vec<(String, RunConfig)>> {
    let key = sweep_key(axis)?;
    if values.is_empty() {
        return Err(config(format!("sweep over `{axis}` needs at least one value")));
    }
    if axis == "alpha" && !base.partition_file.is_empty() {
        return Err(config("partition_file: an alpha sweep needs inline partitions, unset partition_file"));
    }
    let base_table = toml::Table::try_from(base).map_err(|e| config(e.to_string()))?;
    values
        .iter()
        .map(|v| {
            let mut t = base_table.clone();
            set_path(&mut t, key, parse_value(v))?;
            let cfg = RunConfig::from_table(t).map_err(|e| match e {
                CliError::Config(m) => config(format!("{axis}={v}: {m}")),
                other => other,
            })?;
            let label = format!("{}_{axis}={v}", cfg.experiment.method.method.name());
            Ok((label, cfg))
        })
        .collect()
}

pub fn cmd_sweep(base: &RunConfig, axis: &str, values: &[String]) -> CliResult<String> {
    let runs = sweep_configs(base, axis, values)?;
    let root = base.output_dir.clone();
    for (label, cfg) in &runs {
        run_to_dir(cfg, &root.join(label), |_, _| Ok(()))?;
    }
    let rows = report::collect(&root)?;
    let labels: Vec<&String> = runs.iter().map(|(l, _)| l).collect();
    let rows: Vec<_> = rows.into_iter().filter(|r| labels.contains(&&r.run)).collect();
    let table = report::render(&rows);
    fs::write(root.join(format!("sweep_{axis}.txt")), &table)?;
    Ok(table)
}

pub fn cmd_defaults() -> String {
    RunConfig::default().to_toml()
}
