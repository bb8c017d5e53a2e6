//! Evaluation, byte accounting, convergence detection and report
//! aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::methods::{GlobalKnowledge, KnowledgePacket};

/// Bytes per reported megabyte.
pub const MB: f64 = (1u64 << 20) as f64;

pub fn to_mb(bytes: u64) -> f64 {
    bytes as f64 / MB
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Empty on rounds that skip evaluation.
    pub per_client_accuracy: Vec<f64>,
    pub avg_accuracy: Option<f64>,
    pub unweighted_avg_accuracy: Option<f64>,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub client_seconds: f64,
    pub server_seconds: f64,
}

impl RoundReport {
    pub fn evaluated(&self) -> bool {
        self.avg_accuracy.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_client: Vec<f64>,
    pub weighted: f64,
    pub unweighted: f64,
}

/// Folds per-client `(correct, total)` pairs into accuracies.
pub fn evaluate(counts: &[(usize, usize)]) -> Result<Evaluation> {
    if counts.is_empty() {
        return Err(invalid("no clients to evaluate"));
    }
    let mut per_client = Vec::with_capacity(counts.len());
    let (mut hit, mut all) = (0usize, 0usize);
    for (i, &(c, n)) in counts.iter().enumerate() {
        if n == 0 || c > n {
            return Err(invalid(format!("client {i}: {c} correct of {n} test samples")));
        }
        per_client.push(c as f64 / n as f64);
        hit += c;
        all += n;
    }
    let unweighted = per_client.iter().sum::<f64>() / per_client.len() as f64;
    Ok(Evaluation {
        weighted: hit as f64 / all as f64,
        unweighted,
        per_client,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ByteTally {
    pub upload: u64,
    pub download: u64,
}

/// Upload is the sum of packet sizes; download counts the broadcast once
/// per receiving participant.
pub fn byte_account(packets: &[KnowledgePacket], broadcast: &GlobalKnowledge, receivers: usize) -> ByteTally {
    ByteTally {
        upload: packets.iter().map(KnowledgePacket::byte_size).sum(),
        download: broadcast.byte_size() * receivers as u64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    /// 1-based round index.
    pub converged_round: usize,
    pub window: usize,
    pub threshold: f64,
}

/// Trailing moving average of width `w`; entry `j` covers rounds
/// `j+1 ..= j+w` (1-based), so it belongs to round `j + w`.
pub fn smooth(series: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || series.len() < w {
        return Vec::new();
    }
    series.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

pub fn detect_convergence(series: &[f64], w: usize, threshold: f64) -> Result<ConvergenceSummary> {
    if w == 0 {
        return Err(invalid("smoothing window must be positive"));
    }
    if series.len() < w {
        return Err(invalid(format!("series of length {} is shorter than window {w}", series.len())));
    }
    let sm = smooth(series, w);
    let max = sm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let j = sm.iter().position(|&v| v >= threshold * max).unwrap_or(sm.len() - 1);
    Ok(ConvergenceSummary {
        converged_round: j + w,
        window: w,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub best: f64,
}

pub fn stat(values: &[f64], dir: Direction) -> Result<Stat> {
    if values.is_empty() {
        return Err(invalid("no repeats to summarise"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let best = match dir {
        Direction::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Direction::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
    };
    Ok(Stat {
        mean,
        std: var.sqrt(),
        best,
    })
}

/// Headline numbers of one repeat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub final_accuracy: f64,
    pub max_smoothed_accuracy: f64,
    pub converged_round: usize,
    pub upload_bytes_per_round: f64,
    pub download_bytes_per_round: f64,
}

/// Metric names, directions and extractors used in summary files.
pub const SUMMARY_METRICS: [(&str, Direction); 5] = [
    ("final_acc", Direction::Max),
    ("max_smoothed_acc", Direction::Max),
    ("converged_round", Direction::Min),
    ("up_bytes_per_round", Direction::Min),
    ("down_bytes_per_round", Direction::Min),
];

impl RepeatSummary {
    pub fn values(&self) -> [f64; 5] {
        [
            self.final_accuracy,
            self.max_smoothed_accuracy,
            self.converged_round as f64,
            self.upload_bytes_per_round,
            self.download_bytes_per_round,
        ]
    }
}

pub fn summarize_repeat(reports: &[RoundReport], window: usize, threshold: f64) -> Result<RepeatSummary> {
    if reports.is_empty() {
        return Err(invalid("repeat has no rounds"));
    }
    let acc: Vec<f64> = reports.iter().filter_map(|r| r.avg_accuracy).collect();
    let final_accuracy = *acc.last().ok_or_else(|| invalid("repeat has no evaluated rounds"))?;
    let w = window.min(acc.len()).max(1);
    let conv = detect_convergence(&acc, w, threshold)?;
    // map the index among evaluated rounds back to the round number
    let evaluated: Vec<usize> = reports.iter().filter(|r| r.evaluated()).map(|r| r.round).collect();
    let max_smoothed_accuracy = smooth(&acc, w).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let n = reports.len() as f64;
    Ok(RepeatSummary {
        final_accuracy,
        max_smoothed_accuracy,
        converged_round: evaluated[conv.converged_round - 1],
        upload_bytes_per_round: reports.iter().map(|r| r.upload_bytes as f64).sum::<f64>() / n,
        download_bytes_per_round: reports.iter().map(|r| r.download_bytes as f64).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub direction: Direction,
    pub stat: Stat,
}

pub fn summarize(repeats: &[RepeatSummary]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for (j, (name, dir)) in SUMMARY_METRICS.iter().enumerate() {
        let vals: Vec<f64> = repeats.iter().map(|r| r.values()[j]).collect();
        rows.push(SummaryRow {
            metric: name.to_string(),
            direction: *dir,
            stat: stat(&vals, *dir)?,
        });
    }
    Ok(rows)
}

pub fn rounds_csv_header(n_clients: usize) -> String {
    let mut s = String::from("repeat,round,avg_acc,unweighted_avg_acc,up_bytes,down_bytes,client_s,server_s");
    for i in 0..n_clients {
        let _ = write!(s, ",acc_{i}");
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rounds_csv_row(repeat: usize, r: &RoundReport, n_clients: usize) -> String {
    let mut s = format!(
        "{repeat},{},{},{},{},{},{},{}",
        r.round,
        opt(r.avg_accuracy),
        opt(r.unweighted_avg_accuracy),
        r.upload_bytes,
        r.download_bytes,
        r.client_seconds,
        r.server_seconds
    );
    for i in 0..n_clients {
        s.push(',');
        if let Some(a) = r.per_client_accuracy.get(i) {
            let _ = write!(s, "{a}");
        }
    }
    s
}

/// Parses a row written by [`rounds_csv_row`] back into `(repeat, report)`.
pub fn parse_rounds_row(fields: &[&str]) -> Result<(usize, RoundReport)> {
    if fields.len() < 8 {
        return Err(invalid(format!("rounds row has {} fields, expected at least 8", fields.len())));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .trim()
            .parse::<f64>()
            .map_err(|_| invalid(format!("field {i} `{}` is not numeric", fields[i])))
    };
    let optional = |i: usize| -> Result<Option<f64>> {
        if fields[i].trim().is_empty() {
            Ok(None)
        } else {
            num(i).map(Some)
        }
    };
    let per_client = fields[8..]
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.trim().is_empty())
        .map(|(i, _)| num(i + 8))
        .collect::<Result<_>>()?;
    Ok((
        num(0)? as usize,
        RoundReport {
            round: num(1)? as usize,
            avg_accuracy: optional(2)?,
            unweighted_avg_accuracy: optional(3)?,
            upload_bytes: num(4)? as u64,
            download_bytes: num(5)? as u64,
            client_seconds: num(6)?,
            server_seconds: num(7)?,
            per_client_accuracy: per_client,
        },
    ))
}

pub const SUMMARY_CSV_HEADER: &str = "metric,direction,mean,std,best";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let dir = match r.direction {
            Direction::Max => "max",
            Direction::Min => "min",
        };
        let _ = writeln!(s, "{},{dir},{},{},{}", r.metric, r.stat.mean, r.stat.std, r.stat.best);
    }
    s
}
