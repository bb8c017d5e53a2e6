use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands::{cmd_defaults, cmd_partition, cmd_report, cmd_run, cmd_sweep, SWEEP_AXES};
use crate::config::{default_keys, resolve, RunConfig, SEED_ENV};
use crate::error::{runtime, CliResult};

fn config_args(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("TOML run config; keys not given keep their defaults"),
    );
    for (key, default) in default_keys() {
        let shown = default.trim_matches('"').to_string();
        cmd = cmd.arg(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .help_heading("Config keys")
                .help(format!("[default: {shown}]")),
        );
    }
    cmd
}

pub fn command() -> Command {
    let axes: Vec<&str> = SWEEP_AXES.iter().map(|(a, _)| *a).collect();
    Command::new("htfl")
        .about("Heterogeneous federated learning simulator and benchmark harness")
        .long_about(format!(
            "Heterogeneous federated learning simulator and benchmark harness.\n\n\
             Every config key is also a flag (`--experiment.rounds 50`). Values are \
             read as TOML literals, falling back to plain strings. {SEED_ENV} overrides \
             experiment.seed.\n\nExit codes: 0 success, 2 config error, 3 runtime error."
        ))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("partition").about("Write the client partition file and a per-client class histogram"),
        ))
        .subcommand(config_args(
            Command::new("run").about("Run an experiment, streaming rounds.csv and writing summary.csv"),
        ))
        .subcommand(
            config_args(Command::new("sweep").about("One run per value of an axis, then a combined report"))
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .required(true)
                        .value_parser(axes)
                        .help("Config axis to vary"),
                )
                .arg(
                    Arg::new("values")
                        .long("values")
                        .required(true)
                        .value_name("V1,V2,...")
                        .help("Comma-separated values"),
                ),
        )
        .subcommand(
            Command::new("report").about("Cross-method table from finished run directories").arg(
                Arg::new("dir")
                    .required(true)
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("Results directory or a single run directory"),
            ),
        )
        .subcommand(Command::new("defaults").about("Print the full default config"))
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .global(true)
                .action(ArgAction::SetTrue)
                .help("Only print errors"),
        )
}

fn load_config(m: &ArgMatches) -> CliResult<RunConfig> {
    let overrides: Vec<(String, String)> = default_keys()
        .into_iter()
        .filter_map(|(k, _)| m.get_one::<String>(&k).map(|v| (k, v.clone())))
        .collect();
    let env_seed = std::env::var(SEED_ENV).ok();
    resolve(
        m.get_one::<PathBuf>("config").map(PathBuf::as_path),
        &overrides,
        env_seed.as_deref(),
    )
}

fn dispatch(m: &ArgMatches, out: &mut dyn Write) -> CliResult<()> {
    let quiet = m.get_flag("quiet");
    let say = |out: &mut dyn Write, s: &str| -> CliResult<()> {
        if !quiet {
            out.write_all(s.as_bytes()).map_err(|e| runtime(e.to_string()))?;
        }
        Ok(())
    };
    match m.subcommand() {
        Some(("partition", sub)) => {
            let cfg = load_config(sub)?;
            let res = cmd_partition(&cfg)?;
            say(out, &res.histogram)?;
            say(out, &format!("wrote {}\n", res.partition_path.display()))
        }
        Some(("run", sub)) => {
            let cfg = load_config(sub)?;
            let dir = cmd_run(&cfg)?;
            say(out, &cmd_report(&dir)?)?;
            say(out, &format!("wrote {}\n", dir.display()))
        }
        Some(("sweep", sub)) => {
            let cfg = load_config(sub)?;
            let axis = sub.get_one::<String>("axis").expect("required");
            let values: Vec<String> = sub
                .get_one::<String>("values")
                .expect("required")
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(String::from)
                .collect();
            say(out, &cmd_sweep(&cfg, axis, &values)?)
        }
        Some(("report", sub)) => {
            let dir = sub.get_one::<PathBuf>("dir").expect("required");
            // The table is the output; print it even when quiet.
            out.write_all(cmd_report(dir)?.as_bytes()).map_err(|e| runtime(e.to_string()))
        }
        Some(("defaults", _)) => out.write_all(cmd_defaults().as_bytes()).map_err(|e| runtime(e.to_string())),
        _ => unreachable!("clap enforces a subcommand"),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
            } else {
                let _ = out.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match dispatch(&matches, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "htfl: {e}");
            e.exit_code()
        }
    }
}
