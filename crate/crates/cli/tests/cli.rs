use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use htfl_cli::commands::{cmd_partition, run_to_dir, sweep_configs};
use htfl_cli::config::{default_keys, resolve, RunConfig};
use htfl_cli::partition_file::{parse_partition, write_partition};
use htfl_cli::report::{collect, render};
use htfl_cli::CliError;
use htfl_core::data::{gen_gaussian_mixture, partition, ScenarioSpec};

fn htfl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htfl"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HTFL_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn smoke_config(dir: &Path, method: &str) -> RunConfig {
    let overrides: Vec<(String, String)> = [
        ("output_dir", dir.to_str().unwrap()),
        ("experiment.n_clients", "4"),
        ("experiment.rounds", "5"),
        ("experiment.repeats", "2"),
        ("experiment.group", "mlp-2"),
        ("experiment.method.method", method),
        ("experiment.zoo.feature_dim", "32"),
        ("dataset.mixture.classes", "4"),
        ("dataset.mixture.samples", "800"),
        ("dataset.mixture.dims", "8"),
        ("experiment.record_timing", "false"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    resolve(None, &overrides, None).unwrap()
}

#[test]
fn defaults_round_trip_through_the_parser() {
    let text = RunConfig::default().to_toml();
    assert!(text.starts_with("config_version = 1"));
    assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
}

#[test]
fn unknown_keys_and_missing_version_are_rejected() {
    let bad = "config_version = 1\n[experiment]\nroundz = 3\n";
    let err = RunConfig::from_toml(bad).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(err.to_string().contains("roundz"), "{err}");
    assert!(RunConfig::from_toml("[experiment]\nrounds = 3\n").is_err());
    assert!(RunConfig::from_toml("config_version = 2\n").is_err());
}

#[test]
fn validation_errors_name_the_section() {
    let err = resolve(None, &[("experiment.participation".into(), "0".into())], None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("experiment"), "{err}");
}

#[test]
fn env_seed_overrides_config() {
    let cfg = resolve(None, &[("experiment.seed".into(), "5".into())], Some("11")).unwrap();
    assert_eq!(cfg.experiment.seed, 11);
    assert!(resolve(None, &[], Some("minus one")).is_err());
}

#[test]
fn every_config_key_is_a_flag_with_its_default_in_help() {
    let tmp = tempfile::tempdir().unwrap();
    let help = stdout(&htfl(&["run", "--help"], tmp.path()));
    let keys = default_keys();
    assert!(keys.len() > 50);
    for (k, _) in &keys {
        assert!(help.contains(&format!("--{k} ")), "missing flag --{k}");
    }
    assert!(help.contains("[default: fedproto]"));
}

#[test]
fn partition_histogram_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(tmp.path(), "fd");
    cfg.experiment.n_clients = 20;
    cfg.experiment.scenario = ScenarioSpec::dirichlet(20, 0.1);
    cfg.dataset.mixture.classes = 10;
    cfg.dataset.mixture.samples = 2000;
    let first = cmd_partition(&cfg).unwrap();
    let bytes = std::fs::read(&first.partition_path).unwrap();
    let rows: Vec<&str> = first.histogram.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    let total: usize = rows
        .iter()
        .map(|r| r.split('\t').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 2000);
    cmd_partition(&cfg).unwrap();
    assert_eq!(std::fs::read(&first.partition_path).unwrap(), bytes);

    cfg.experiment.scenario = ScenarioSpec::pathological(20, 2);
    let path = cmd_partition(&cfg).unwrap();
    for row in path.histogram.lines().skip(1) {
        let nonzero = row.split('\t').skip(2).filter(|v| *v != "0").count();
        assert_eq!(nonzero, 2, "{row}");
    }
}

#[test]
fn partition_file_round_trips() {
    let ds = gen_gaussian_mixture(5, 600, 4, 3.0, 1).unwrap();
    for spec in [
        ScenarioSpec::dirichlet(6, 0.3),
        ScenarioSpec::pathological(6, 2),
        ScenarioSpec::feature_shift(6, 3),
    ] {
        let p = partition(&ds, &spec, 9).unwrap();
        let text = write_partition(&p);
        assert_eq!(parse_partition(&text).unwrap(), p);
    }
    assert!(parse_partition("htfl-partition 1\nseed x\n").is_err());
    assert!(parse_partition("nonsense").is_err());
}

#[test]
fn run_writes_one_row_per_round_and_reports_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "fd");
    let started = Instant::now();
    let dir = tmp.path().join("fd");
    let result = run_to_dir(&cfg, &dir, |_, _| Ok(())).unwrap();
    assert!(started.elapsed().as_secs_f64() < 10.0);
    let rounds = std::fs::read_to_string(dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + 5 * 2);
    assert!(rounds.starts_with("repeat,round,avg_acc,unweighted_avg_acc,up_bytes,down_bytes,client_s,server_s,acc_0"));
    assert!(dir.join("summary.csv").is_file());

    let rows = collect(tmp.path()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].summary, result.summary);
    let table = render(&rows);
    assert_eq!(table.lines().count(), 3);
    assert_eq!(render(&collect(tmp.path()).unwrap()), table);
}

#[test]
fn interrupted_run_keeps_finished_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "fedproto");
    let dir = tmp.path().join("cut");
    let mut seen = 0;
    let err = run_to_dir(&cfg, &dir, |_, _| {
        seen += 1;
        if seen == 3 {
            Err(CliError::Runtime("interrupted".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(err.to_string().contains("interrupted"));
    let rounds = std::fs::read_to_string(dir.join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 1 + 3);
    assert!(!dir.join("summary.csv").exists());
}

#[test]
fn report_sorts_methods_and_fails_on_missing_dir() {
    let tmp = tempfile::tempdir().unwrap();
    for m in ["fedproto", "fd"] {
        let cfg = smoke_config(tmp.path(), m);
        run_to_dir(&cfg, &tmp.path().join(m), |_, _| Ok(())).unwrap();
    }
    let rows = collect(tmp.path()).unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["fd", "fedproto"]);

    let o = htfl(&["report", "does-not-exist"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn sweep_expands_axes_and_rejects_empty_lists() {
    let tmp = tempfile::tempdir().unwrap();
    let base = smoke_config(tmp.path(), "fd");
    let values: Vec<String> = ["0.01", "0.1", "0.5", "1"].iter().map(|s| s.to_string()).collect();
    let runs = sweep_configs(&base, "alpha", &values).unwrap();
    let alphas: Vec<f64> = runs.iter().map(|(_, c)| c.experiment.scenario.alpha).collect();
    assert_eq!(alphas, [0.01, 0.1, 0.5, 1.0]);
    let rho = sweep_configs(&base, "rho", &["0.1".into(), "0.5".into()]).unwrap();
    assert_eq!(rho[1].1.experiment.participation, 0.5);
    let methods = sweep_configs(&base, "method", &["fml".into(), "local".into()]).unwrap();
    assert_eq!(methods[0].0, "fml_method=fml");
    assert!(sweep_configs(&base, "alpha", &[]).is_err());
    assert!(sweep_configs(&base, "lr", &["0.1".into()]).is_err());
    assert!(sweep_configs(&base, "rho", &["2".into()]).is_err());

    let o = htfl(
        &["sweep", "--axis", "alpha", "--values", "", "--output_dir", "out"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn binary_smoke_run_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("smoke.toml");
    std::fs::write(
        &cfg_path,
        "config_version = 1\noutput_dir = \"out\"\n\
         [dataset.mixture]\nclasses = 4\nsamples = 800\ndims = 8\n\
         [experiment]\nn_clients = 4\nrounds = 5\nrepeats = 1\ngroup = \"mlp-2\"\n\
         [experiment.method]\nmethod = \"fd\"\n[experiment.zoo]\nfeature_dim = 32\n",
    )
    .unwrap();
    let started = Instant::now();
    let o = htfl(&["run", "-c", "smoke.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(started.elapsed().as_secs_f64() < 10.0);
    assert!(stdout(&o).contains("fd"));
    assert!(tmp.path().join("out/fd/rounds.csv").is_file());

    let o = htfl(&["report", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 3);

    assert_eq!(htfl(&["run", "--experiment.nope", "1"], tmp.path()).status.code(), Some(2));
    assert_eq!(htfl(&["run", "--experiment.rounds", "0"], tmp.path()).status.code(), Some(2));
    assert_eq!(htfl(&["run", "-c", "missing.toml"], tmp.path()).status.code(), Some(2));
    let o = htfl(&["defaults"], tmp.path());
    assert_eq!(RunConfig::from_toml(&stdout(&o)).unwrap(), RunConfig::default());
}
