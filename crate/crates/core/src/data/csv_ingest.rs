use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HtflError, Result};

use super::dataset::{Dataset, FeatureShape};

/// Column layout of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label_col: String,
    #[serde(default)]
    pub group_col: Option<String>,
    /// Feature columns in order; every other column when absent.
    #[serde(default)]
    pub feature_cols: Option<Vec<String>>,
    /// Channel-major `(channels, length)` reading of the feature columns.
    #[serde(default)]
    pub sequence: Option<(usize, usize)>,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

impl CsvSchema {
    pub fn new(label_col: impl Into<String>) -> Self {
        Self {
            label_col: label_col.into(),
            group_col: None,
            feature_cols: None,
            sequence: None,
            standardize: true,
        }
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let fail = |row: usize, msg: String| HtflError::Csv {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| fail(0, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| fail(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| fail(1, format!("unknown column `{name}`")))
    };
    let label_at = col(&schema.label_col)?;
    let group_at = schema.group_col.as_deref().map(col).transpose()?;
    let feature_at: Vec<usize> = match &schema.feature_cols {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..header.len())
            .filter(|&i| i != label_at && Some(i) != group_at)
            .collect(),
    };
    if feature_at.is_empty() {
        return Err(fail(1, "no feature columns".into()));
    }
    let shape = match schema.sequence {
        Some((channels, length)) => {
            if channels * length != feature_at.len() {
                return Err(fail(
                    1,
                    format!(
                        "sequence layout {channels}×{length} needs {} feature columns, found {}",
                        channels * length,
                        feature_at.len()
                    ),
                ));
            }
            FeatureShape::Sequence { channels, length }
        }
        None => FeatureShape::Flat(feature_at.len()),
    };

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut raw_groups = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            fail(row, e.to_string())
        })?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(fail(
                row,
                format!("ragged row: {} fields, header has {}", rec.len(), header.len()),
            ));
        }
        for &j in &feature_at {
            let cell = rec[j].trim();
            let v: f32 = cell
                .parse()
                .map_err(|_| fail(row, format!("non-numeric value `{cell}` in `{}`", header[j])))?;
            if !v.is_finite() {
                return Err(fail(row, format!("non-finite value in `{}`", header[j])));
            }
            features.push(v);
        }
        raw_labels.push(rec[label_at].trim().to_string());
        if let Some(g) = group_at {
            raw_groups.push(rec[g].trim().to_string());
        }
    }
    if raw_labels.is_empty() {
        return Err(fail(1, "no data rows".into()));
    }
    let (labels, num_classes) = encode(&raw_labels);
    let group_id = group_at.map(|_| encode(&raw_groups).0);
    if schema.standardize {
        standardize(&mut features, feature_at.len());
    }
    Dataset::new(features, shape, labels, group_id, num_classes)
}

/// Maps categorical strings to dense indices: numeric order when every value
/// parses as an integer, lexicographic otherwise.
fn encode(values: &[String]) -> (Vec<usize>, usize) {
    let numeric: Option<Vec<i64>> = values.iter().map(|v| v.parse().ok()).collect();
    match numeric {
        Some(nums) => {
            let codes: BTreeMap<i64, usize> = nums
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i))
                .collect();
            (nums.iter().map(|v| codes[v]).collect(), codes.len())
        }
        None => {
            let codes: BTreeMap<&str, usize> = values
                .iter()
                .map(String::as_str)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i))
                .collect();
            (values.iter().map(|v| codes[v.as_str()]).collect(), codes.len())
        }
    }
}

fn standardize(x: &mut [f32], cols: usize) {
    let rows = x.len() / cols;
    for j in 0..cols {
        let mean: f64 = (0..rows).map(|i| x[i * cols + j] as f64).sum::<f64>() / rows as f64;
        let var: f64 = (0..rows)
            .map(|i| (x[i * cols + j] as f64 - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let sd = var.sqrt();
        for i in 0..rows {
            let v = x[i * cols + j] as f64 - mean;
            x[i * cols + j] = if sd > 0.0 { (v / sd) as f32 } else { v as f32 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn four_rows_two_labels() {
        let f = file("a,b,y\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n");
        let ds = ingest_csv(f.path(), &CsvSchema::new("y")).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.feature_dims(), 2);
        let col0: f64 = (0..4).map(|i| ds.sample(i)[0] as f64).sum();
        assert!(col0.abs() < 1e-6);
    }

    #[test]
    fn missing_label_column_is_named() {
        let f = file("a,b\n1,2\n");
        let err = ingest_csv(f.path(), &CsvSchema::new("label")).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn group_column_populates_every_sample() {
        let f = file("x,y,subj\n1,a,s1\n2,b,s2\n3,a,s1\n");
        let mut s = CsvSchema::new("y");
        s.group_col = Some("subj".into());
        let ds = ingest_csv(f.path(), &s).unwrap();
        assert_eq!(ds.group_id().unwrap(), &[0, 1, 0]);
        assert_eq!(ds.feature_dims(), 1);
    }

    #[test]
    fn ragged_and_non_numeric_rows_report_row() {
        let f = file("a,y\n1,0\n2\n");
        let err = ingest_csv(f.path(), &CsvSchema::new("y")).unwrap_err();
        assert!(matches!(err, HtflError::Csv { row: 3, .. }), "{err}");
        let f = file("a,y\n1,0\nzz,1\n");
        let err = ingest_csv(f.path(), &CsvSchema::new("y")).unwrap_err();
        assert!(matches!(err, HtflError::Csv { row: 3, .. }), "{err}");
    }

    #[test]
    fn sequence_layout_checked() {
        let f = file("c0t0,c0t1,c1t0,c1t1,y\n1,2,3,4,5\n");
        let mut s = CsvSchema::new("y");
        s.sequence = Some((2, 2));
        s.standardize = false;
        let ds = ingest_csv(f.path(), &s).unwrap();
        assert_eq!(ds.shape(), FeatureShape::Sequence { channels: 2, length: 2 });
        assert_eq!(ds.sample(0), &[1.0, 2.0, 3.0, 4.0]);
        s.sequence = Some((3, 2));
        assert!(ingest_csv(f.path(), &s).is_err());
    }

    #[test]
    fn integer_labels_sort_numerically() {
        assert_eq!(encode(&["10".into(), "9".into(), "10".into()]), (vec![1, 0, 1], 2));
    }
}
