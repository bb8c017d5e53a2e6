use serde::{Deserialize, Serialize};

use crate::data::FeatureShape;
use crate::error::{invalid, HtflError, Result};
use crate::numcore::conv_out_len;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    /// Fully connected stack; each width is followed by ReLU.
    Mlp { widths: Vec<usize> },
    /// Conv → ReLU → pool blocks, then fully connected layers.
    Cnn1d {
        conv_layers: usize,
        stride: usize,
        channels: Vec<usize>,
        kernel: usize,
        fc: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub extractor: Extractor,
    pub input: FeatureShape,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Hidden `K → K` layers in front of the final `K → C` classifier.
    pub head_hidden: usize,
    pub fully_heterogeneous_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Extractor,
    Adapter,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Stage {
    Flatten,
    ToSequence { channels: usize, length: usize },
    Conv { w: usize, b: usize, stride: usize, pool: bool },
    Dense { w: usize, b: usize, relu: bool },
    Pool { out: usize },
}

/// Parameter shapes and the forward program of a spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub params: Vec<(String, Part, Vec<usize>, usize)>,
    pub extractor: Vec<Stage>,
    pub adapter: Vec<Stage>,
    pub head: Vec<Stage>,
    /// Flattened length of the extractor output before the adapter.
    pub raw_dim: usize,
}

impl Layout {
    fn add(&mut self, name: String, part: Part, shape: Vec<usize>, fan_in: usize) -> usize {
        self.params.push((name, part, shape, fan_in));
        self.params.len() - 1
    }

    fn dense(&mut self, prefix: &str, part: Part, i: Option<usize>, fan_in: usize, out: usize) -> (usize, usize) {
        let base = match i {
            Some(i) => format!("{prefix}.{i}"),
            None => prefix.to_string(),
        };
        let w = self.add(format!("{base}.weight"), part, vec![fan_in, out], fan_in);
        let b = self.add(format!("{base}.bias"), part, vec![out], 0);
        (w, b)
    }
}

impl ModelSpec {
    pub fn mlp(name: impl Into<String>, widths: Vec<usize>, input: FeatureShape, k: usize, c: usize) -> Self {
        Self {
            name: name.into(),
            extractor: Extractor::Mlp { widths },
            input,
            feature_dim: k,
            num_classes: c,
            head_hidden: 0,
            fully_heterogeneous_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    pub(crate) fn layout(&self) -> Result<Layout> {
        let (k, c) = (self.feature_dim, self.num_classes);
        if k == 0 || c == 0 {
            return Err(invalid(format!("{}: feature_dim and num_classes must be positive", self.name)));
        }
        if self.input.numel() == 0 {
            return Err(invalid(format!("{}: empty input", self.name)));
        }
        let mut lay = Layout {
            params: Vec::new(),
            extractor: Vec::new(),
            adapter: Vec::new(),
            head: Vec::new(),
            raw_dim: 0,
        };
        let mut width = match &self.extractor {
            Extractor::Mlp { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(invalid(format!("{}: MLP widths must be non-empty and positive", self.name)));
                }
                lay.extractor.push(Stage::Flatten);
                let mut d = self.input.numel();
                for (i, &wd) in widths.iter().enumerate() {
                    let (w, b) = lay.dense("extractor", Part::Extractor, Some(i), d, wd);
                    lay.extractor.push(Stage::Dense { w, b, relu: true });
                    d = wd;
                }
                d
            }
            Extractor::Cnn1d {
                conv_layers,
                stride,
                channels,
                kernel,
                fc,
            } => self.cnn_layout(&mut lay, *conv_layers, *stride, channels, *kernel, fc)?,
        };
        lay.raw_dim = width;
        if width % k == 0 {
            lay.adapter.push(Stage::Pool { out: k });
        } else {
            let (w, b) = lay.dense("adapter", Part::Adapter, None, width, k);
            lay.adapter.push(Stage::Dense { w, b, relu: false });
        }
        width = k;
        for i in 0..self.head_hidden {
            let (w, b) = lay.dense("head", Part::Head, Some(i), width, k);
            lay.head.push(Stage::Dense { w, b, relu: true });
        }
        let (w, b) = lay.dense("head", Part::Head, Some(self.head_hidden), width, c);
        lay.head.push(Stage::Dense { w, b, relu: false });
        Ok(lay)
    }

    fn cnn_layout(
        &self,
        lay: &mut Layout,
        conv_layers: usize,
        stride: usize,
        channels: &[usize],
        kernel: usize,
        fc: &[usize],
    ) -> Result<usize> {
        if conv_layers == 0 || conv_layers > channels.len() {
            return Err(invalid(format!(
                "{}: {conv_layers} conv layers need as many channel widths (have {})",
                self.name,
                channels.len()
            )));
        }
        if stride == 0 || kernel == 0 {
            return Err(invalid(format!("{}: stride and kernel must be positive", self.name)));
        }
        let (mut cin, mut len) = match self.input {
            FeatureShape::Sequence { channels, length } => (channels, length),
            FeatureShape::Flat(d) => (1, d),
        };
        lay.extractor.push(Stage::ToSequence { channels: cin, length: len });
        for (i, &cout) in channels.iter().take(conv_layers).enumerate() {
            if len == 0 {
                return Err(HtflError::Shape {
                    op: "cnn1d",
                    lhs: vec![cin, len],
                    rhs: vec![kernel],
                });
            }
            // Short maps get a kernel that still fits.
            let kk = kernel.min(len);
            let w = lay.add(format!("extractor.{i}.weight"), Part::Extractor, vec![cout, cin, kk], cin * kk);
            let b = lay.add(format!("extractor.{i}.bias"), Part::Extractor, vec![cout], 0);
            len = conv_out_len(len, kk, stride);
            let pool = len >= 2;
            if pool {
                len /= 2;
            }
            lay.extractor.push(Stage::Conv { w, b, stride, pool });
            cin = cout;
        }
        lay.extractor.push(Stage::Flatten);
        let mut d = cin * len;
        let base = conv_layers;
        for (j, &wd) in fc.iter().enumerate() {
            if wd == 0 {
                return Err(invalid(format!("{}: zero-width FC layer", self.name)));
            }
            let (w, b) = lay.dense("extractor", Part::Extractor, Some(base + j), d, wd);
            lay.extractor.push(Stage::Dense { w, b, relu: true });
            d = wd;
        }
        Ok(d)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .layout()?
            .params
            .iter()
            .map(|(_, _, s, _)| s.iter().product::<usize>())
            .sum())
    }

    /// Element count of the classifier head.
    pub fn head_parameter_count(&self) -> Result<usize> {
        Ok(self
            .layout()?
            .params
            .iter()
            .filter(|(_, p, _, _)| *p == Part::Head)
            .map(|(_, _, s, _)| s.iter().product::<usize>())
            .sum())
    }

    /// Per-layer spatial `(channels, length)` after each conv block.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let lay = self.layout()?;
        let mut out = Vec::new();
        let mut len = 0;
        for st in &lay.extractor {
            match st {
                Stage::ToSequence { length, .. } => len = *length,
                Stage::Conv { w, stride, pool, .. } => {
                    let shape = &lay.params[*w].2;
                    len = conv_out_len(len, shape[2], *stride);
                    if *pool {
                        len /= 2;
                    }
                    out.push((shape[0], len));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGroup {
    pub name: String,
    pub specs: Vec<ModelSpec>,
}

impl ModelGroup {
    pub fn degree(&self) -> usize {
        self.specs.len()
    }

    pub fn fully_heterogeneous_head(&self) -> bool {
        self.specs.iter().any(|s| s.fully_heterogeneous_head)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .specs
            .first()
            .ok_or_else(|| invalid(format!("model group `{}` is empty", self.name)))?;
        for s in &self.specs {
            s.validate()?;
            if s.num_classes != first.num_classes || s.feature_dim != first.feature_dim {
                return Err(invalid(format!(
                    "group `{}` mixes class counts or feature dims",
                    self.name
                )));
            }
            if !self.fully_heterogeneous_head() && s.head_hidden != first.head_hidden {
                return Err(invalid(format!("group `{}` mixes head shapes", self.name)));
            }
        }
        Ok(())
    }
}

/// The `(i mod X)`-th spec of the group.
pub fn assign_model(client: usize, group: &ModelGroup) -> Result<&ModelSpec> {
    if group.specs.is_empty() {
        return Err(invalid(format!("model group `{}` is empty", group.name)));
    }
    Ok(&group.specs[client % group.specs.len()])
}

/// Smallest spec by parameter count; earlier specs win ties.
pub fn auxiliary_spec(group: &ModelGroup) -> Result<&ModelSpec> {
    let mut best: Option<(&ModelSpec, usize)> = None;
    for s in &group.specs {
        let n = s.parameter_count()?;
        if best.is_none_or(|(_, b)| n < b) {
            best = Some((s, n));
        }
    }
    best.map(|(s, _)| s)
        .ok_or_else(|| invalid(format!("model group `{}` is empty", group.name)))
}
