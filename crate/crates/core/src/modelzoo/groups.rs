use serde::{Deserialize, Serialize};

use crate::data::FeatureShape;
use crate::error::{HtflError, Result};

use super::spec::{Extractor, ModelGroup, ModelSpec};

/// Shared knobs for resolving a named group against a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooConfig {
    pub feature_dim: usize,
    pub cnn_channels: Vec<usize>,
    pub cnn_kernel: usize,
    /// Hidden FC widths after the conv blocks.
    pub cnn_fc: Vec<usize>,
}

impl Default for ZooConfig {
    fn default() -> Self {
        Self {
            feature_dim: 512,
            cnn_channels: vec![32, 64, 128],
            cnn_kernel: 9,
            cnn_fc: vec![1024, 512],
        }
    }
}

pub const BUILTIN_GROUPS: &[&str] = &[
    "mlp-2", "mlp-4", "mlp-8", "sen-2", "sen-3", "sen-5", "sen-8", "htc-4", "htm-4",
];

const MLP_2: &[&[usize]] = &[&[64], &[128, 64]];
const MLP_4: &[&[usize]] = &[&[32], &[64], &[64, 32], &[128, 64]];
const MLP_8: &[&[usize]] = &[
    &[16],
    &[32],
    &[64],
    &[128],
    &[32, 32],
    &[64, 32],
    &[128, 64],
    &[128, 128, 64],
];

/// `(conv_layers, stride)`; sen-5 extends sen-3 and sen-8 extends sen-5.
const SEN_8: &[(usize, usize)] = &[
    (2, 1),
    (2, 2),
    (2, 3),
    (1, 1),
    (3, 1),
    (1, 2),
    (1, 3),
    (3, 2),
];

pub fn builtin_group(
    name: &str,
    cfg: &ZooConfig,
    input: FeatureShape,
    num_classes: usize,
) -> Result<ModelGroup> {
    let k = cfg.feature_dim;
    let mlp = |widths: &[&[usize]]| -> Vec<ModelSpec> {
        widths
            .iter()
            .map(|w| {
                let tag = w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x");
                ModelSpec::mlp(format!("mlp[{tag}]"), w.to_vec(), input, k, num_classes)
            })
            .collect()
    };
    let sen = |n: usize| -> Vec<ModelSpec> {
        SEN_8[..n]
            .iter()
            .map(|&(conv_layers, stride)| ModelSpec {
                name: format!("harcnn{conv_layers}-s{stride}"),
                extractor: Extractor::Cnn1d {
                    conv_layers,
                    stride,
                    channels: cfg.cnn_channels.clone(),
                    kernel: cfg.cnn_kernel,
                    fc: cfg.cnn_fc.clone(),
                },
                input,
                feature_dim: k,
                num_classes,
                head_hidden: 0,
                fully_heterogeneous_head: false,
            })
            .collect()
    };
    let heads = |mut specs: Vec<ModelSpec>| -> Vec<ModelSpec> {
        for (h, s) in specs.iter_mut().enumerate() {
            s.head_hidden = h % 4;
            s.fully_heterogeneous_head = true;
            s.name = format!("{}+head{}", s.name, s.head_hidden);
        }
        specs
    };
    let specs = match name {
        "mlp-2" => mlp(MLP_2),
        "mlp-4" => mlp(MLP_4),
        "mlp-8" => mlp(MLP_8),
        "sen-2" => sen(2),
        "sen-3" => sen(3),
        "sen-5" => sen(5),
        "sen-8" => sen(8),
        // one extractor, four head depths
        "htc-4" => heads(vec![ModelSpec::mlp("mlp[64]", vec![64], input, k, num_classes); 4]),
        "htm-4" => heads(mlp(MLP_4)),
        _ => {
            return Err(HtflError::Unknown {
                kind: "model group",
                name: name.to_string(),
            })
        }
    };
    let group = ModelGroup {
        name: name.to_string(),
        specs,
    };
    group.validate()?;
    Ok(group)
}
