//! Plain-text partition files.
//!
//! ```text
//! htfl-partition 1
//! seed 7
//! scenario kind=dirichlet alpha=0.1 classes_per_client=2 shift_domains=1 split=uniform
//! clients 20
//! classes 10
//! 0 | 12 40 41 | 3 90
//! 1 | ... | ...
//! ```
//!
//! Each client line holds the id, its train indices and its test indices,
//! space-separated with `|` between the groups.

use std::fmt::Write;

use htfl_core::data::{Dataset, PartitionResult, ScenarioKind, ScenarioSpec, SplitMode};

use crate::error::{runtime, CliResult};

const MAGIC: &str = "htfl-partition 1";

fn split_name(s: SplitMode) -> &'static str {
    match s {
        SplitMode::Uniform => "uniform",
        SplitMode::Stratified => "stratified",
    }
}

pub fn write_partition(p: &PartitionResult) -> String {
    let sc = &p.scenario;
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "seed {}", p.seed);
    let _ = writeln!(
        s,
        "scenario kind={} alpha={} classes_per_client={} shift_domains={} split={}",
        sc.kind.as_str(),
        sc.alpha,
        sc.classes_per_client,
        sc.shift_domains,
        split_name(sc.split)
    );
    let _ = writeln!(s, "clients {}", p.n_clients());
    let _ = writeln!(s, "classes {}", p.num_classes);
    for (i, (tr, te)) in p.client_train.iter().zip(&p.client_test).enumerate() {
        let _ = write!(s, "{i} |");
        for x in tr {
            let _ = write!(s, " {x}");
        }
        s.push_str(" |");
        for x in te {
            let _ = write!(s, " {x}");
        }
        s.push('\n');
    }
    s
}

fn header<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, key: &str) -> CliResult<(usize, &'a str)> {
    let (no, line) = lines
        .next()
        .ok_or_else(|| runtime(format!("partition file ends before `{key}`")))?;
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .map(|r| (no, r.trim()))
        .ok_or_else(|| runtime(format!("partition file line {}: expected `{key} ...`", no + 1)))
}

fn num<T: std::str::FromStr>(no: usize, what: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| runtime(format!("partition file line {}: bad {what} `{v}`", no + 1)))
}

fn parse_scenario(no: usize, text: &str, n_clients: usize) -> CliResult<ScenarioSpec> {
    let mut sc = ScenarioSpec {
        n_clients,
        ..Default::default()
    };
    for kv in text.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| runtime(format!("partition file line {}: bad scenario field `{kv}`", no + 1)))?;
        match k {
            "kind" => {
                sc.kind = match v {
                    "pathological" => ScenarioKind::Pathological,
                    "dirichlet" => ScenarioKind::Dirichlet,
                    "feature_shift" => ScenarioKind::FeatureShift,
                    "real_world" => ScenarioKind::RealWorld,
                    _ => return Err(runtime(format!("partition file line {}: unknown scenario `{v}`", no + 1))),
                }
            }
            "alpha" => sc.alpha = num(no, k, v)?,
            "classes_per_client" => sc.classes_per_client = num(no, k, v)?,
            "shift_domains" => sc.shift_domains = num(no, k, v)?,
            "split" => {
                sc.split = match v {
                    "uniform" => SplitMode::Uniform,
                    "stratified" => SplitMode::Stratified,
                    _ => return Err(runtime(format!("partition file line {}: unknown split `{v}`", no + 1))),
                }
            }
            _ => return Err(runtime(format!("partition file line {}: unknown scenario field `{k}`", no + 1))),
        }
    }
    Ok(sc)
}

fn indices(no: usize, text: &str) -> CliResult<Vec<usize>> {
    text.split_whitespace().map(|v| num(no, "index", v)).collect()
}

pub fn parse_partition(text: &str) -> CliResult<PartitionResult> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(runtime(format!("not a partition file: first line must be `{MAGIC}`"))),
    }
    let (no, v) = header(&mut lines, "seed")?;
    let seed: u64 = num(no, "seed", v)?;
    let (sc_no, sc_text) = header(&mut lines, "scenario")?;
    let (no, v) = header(&mut lines, "clients")?;
    let n: usize = num(no, "client count", v)?;
    let (no, v) = header(&mut lines, "classes")?;
    let num_classes: usize = num(no, "class count", v)?;
    let scenario = parse_scenario(sc_no, sc_text, n)?;

    let mut client_train = Vec::with_capacity(n);
    let mut client_test = Vec::with_capacity(n);
    for (no, line) in lines {
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(runtime(format!(
                "partition file line {}: expected `id | train | test`",
                no + 1
            )));
        }
        let id: usize = num(no, "client id", parts[0].trim())?;
        if id != client_train.len() {
            return Err(runtime(format!(
                "partition file line {}: client {id} out of order (expected {})",
                no + 1,
                client_train.len()
            )));
        }
        client_train.push(indices(no, parts[1])?);
        client_test.push(indices(no, parts[2])?);
    }
    if client_train.len() != n {
        return Err(runtime(format!(
            "partition file lists {} clients but its header says {n}",
            client_train.len()
        )));
    }
    let client_domain = (0..n)
        .map(|i| match scenario.kind {
            ScenarioKind::FeatureShift => i % scenario.shift_domains.max(1),
            _ => 0,
        })
        .collect();
    Ok(PartitionResult {
        client_train,
        client_test,
        scenario,
        seed,
        num_classes,
        client_domain,
    })
}

/// Errors unless every index falls inside `ds` and the class counts agree.
pub fn check_against(p: &PartitionResult, ds: &Dataset) -> CliResult<()> {
    if p.num_classes != ds.num_classes() {
        return Err(runtime(format!(
            "partition has {} classes but the dataset has {}",
            p.num_classes,
            ds.num_classes()
        )));
    }
    for (i, (tr, te)) in p.client_train.iter().zip(&p.client_test).enumerate() {
        if let Some(&bad) = tr.iter().chain(te).find(|&&x| x >= ds.len()) {
            return Err(runtime(format!(
                "partition client {i} references sample {bad} but the dataset has {}",
                ds.len()
            )));
        }
    }
    Ok(())
}

/// One row per client: id, sample count, then per-class counts.
pub fn histogram_table(p: &PartitionResult, ds: &Dataset) -> String {
    let hist = p.class_histograms(ds);
    let mut s = String::from("client\tsamples");
    for c in 0..ds.num_classes() {
        let _ = write!(s, "\tc{c}");
    }
    s.push('\n');
    for (i, h) in hist.iter().enumerate() {
        let _ = write!(s, "{i}\t{}", h.iter().sum::<usize>());
        for v in h {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}
