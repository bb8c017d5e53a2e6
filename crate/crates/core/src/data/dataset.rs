use serde::{Deserialize, Serialize};

use crate::error::{invalid, HtflError, Result};

/// Per-sample layout of the feature block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureShape {
    Flat(usize),
    /// Channel-major `channels × length` window.
    Sequence { channels: usize, length: usize },
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Flat(d) => d,
            FeatureShape::Sequence { channels, length } => channels * length,
        }
    }
}

/// Labelled samples, optionally tagged with a collection unit (subject,
/// sensor, hospital).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    shape: FeatureShape,
    labels: Vec<usize>,
    group_id: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        shape: FeatureShape,
        labels: Vec<usize>,
        group_id: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let d = shape.numel();
        if features.len() != labels.len() * d {
            return Err(HtflError::Shape {
                op: "dataset",
                lhs: vec![labels.len(), d],
                rhs: vec![features.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(HtflError::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        if let Some(g) = &group_id {
            if g.len() != labels.len() {
                return Err(invalid("group_id length differs from sample count"));
            }
        }
        Ok(Self {
            features,
            shape,
            labels,
            group_id,
            num_classes,
        })
    }

    /// Label-only dataset with a single zero feature per sample. Enough for
    /// partition statistics and byte accounting.
    pub fn labels_only(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        Self::new(vec![0.0; n], FeatureShape::Flat(1), labels, None, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> FeatureShape {
        self.shape
    }

    pub fn feature_dims(&self) -> usize {
        self.shape.numel()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn group_id(&self) -> Option<&[usize]> {
        self.group_id.as_deref()
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.feature_dims();
        &self.features[i * d..(i + 1) * d]
    }

    /// Indices of every sample, bucketed by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}
