//! The federated protocol layer: what each client uploads, how the server
//! aggregates it, and what the client's local loss adds on top of
//! cross-entropy.

mod carrier;
mod client;
mod generator;
mod server;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, HtflError, Result};
use crate::modelzoo::ModelGroup;

pub use carrier::{
    aggregate_weighted, Carrier, CarrierKind, ClassEntry, ClassMeans, ClassVectors, ClassWeighting,
    GlobalKnowledge, KnowledgePacket, SvdEntry, BYTES_PER_FLOAT,
};
pub use client::{
    evaluate, local_steps, run_local_epoch, ClientData, ClientState, FusionHead, LocalContext, LocalStats,
};
pub use generator::Generator;
pub use server::{fedgen_train_generator, fedgh_train_head, fedtgp_refine, GeneratorJob, Server, TgpReport};

/// Stream tags mixed into [`crate::data::substream`].
pub(crate) mod purpose {
    pub const BATCH: u64 = 10;
    pub const METHOD: u64 = 11;
    pub const MODEL_INIT: u64 = 12;
    pub const AUX_INIT: u64 = 13;
    pub const SERVER: u64 = 14;
    pub const SAMPLE: u64 = 15;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    /// No communication; the reference baseline.
    Local,
    LgFedAvg,
    FedGen,
    FedGh,
    Fml,
    FedKd,
    FedMrl,
    Fd,
    FedProto,
    FedTgp,
}

impl MethodKind {
    pub const ALL: [MethodKind; 10] = [
        MethodKind::Local,
        MethodKind::LgFedAvg,
        MethodKind::FedGen,
        MethodKind::FedGh,
        MethodKind::Fml,
        MethodKind::FedKd,
        MethodKind::FedMrl,
        MethodKind::Fd,
        MethodKind::FedProto,
        MethodKind::FedTgp,
    ];

    /// The nine collaborative methods.
    pub const FEDERATED: [MethodKind; 9] = [
        MethodKind::LgFedAvg,
        MethodKind::FedGen,
        MethodKind::FedGh,
        MethodKind::Fml,
        MethodKind::FedKd,
        MethodKind::FedMrl,
        MethodKind::Fd,
        MethodKind::FedProto,
        MethodKind::FedTgp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Local => "local",
            MethodKind::LgFedAvg => "lgfedavg",
            MethodKind::FedGen => "fedgen",
            MethodKind::FedGh => "fedgh",
            MethodKind::Fml => "fml",
            MethodKind::FedKd => "fedkd",
            MethodKind::FedMrl => "fedmrl",
            MethodKind::Fd => "fd",
            MethodKind::FedProto => "fedproto",
            MethodKind::FedTgp => "fedtgp",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| HtflError::Unknown {
                kind: "method",
                name: name.to_string(),
            })
    }

    /// Methods that aggregate a shared classifier head.
    pub fn shares_head(&self) -> bool {
        matches!(self, MethodKind::LgFedAvg | MethodKind::FedGen | MethodKind::FedGh)
    }

    pub fn uses_aux(&self) -> bool {
        matches!(self, MethodKind::Fml | MethodKind::FedKd | MethodKind::FedMrl)
    }

    /// Methods whose upload is a per-class feature mean.
    pub fn uses_prototypes(&self) -> bool {
        matches!(self, MethodKind::FedGh | MethodKind::FedProto | MethodKind::FedTgp)
    }

    /// Head-sharing methods need identical heads across the group.
    pub fn check_group(&self, group: &ModelGroup) -> Result<()> {
        if self.shares_head() && group.fully_heterogeneous_head() {
            return Err(HtflError::Inapplicable {
                method: self.name().to_string(),
                group: group.name.clone(),
                reason: "classifier heads differ across clients, so they cannot be aggregated".into(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = HtflError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub method: MethodKind,
    /// Prototype / logit / generator regulariser weight.
    pub lambda_reg: f64,
    /// Distillation weight for the auxiliary-model methods.
    pub lambda_kd: f64,
    pub temperature: f64,
    /// Server optimisation steps (FedGH, FedGen, FedTGP).
    pub server_epochs: usize,
    pub server_lr: f64,
    pub svd_energy: f64,
    pub margin_cap: f64,
    pub noise_dim: usize,
    pub generator_batch: usize,
    /// Interpolation toward the downloaded head: 1 replaces, 0 ignores it.
    pub head_mix: f64,
    /// Gradient scale from the FedMRL fusion loss into both extractors.
    pub fusion_feedback: f64,
    pub class_weighting: ClassWeighting,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::FedProto,
            lambda_reg: 1.0,
            lambda_kd: 1.0,
            temperature: 1.0,
            server_epochs: 100,
            server_lr: 0.01,
            svd_energy: 0.95,
            margin_cap: 100.0,
            noise_dim: 32,
            generator_batch: 32,
            head_mix: 1.0,
            fusion_feedback: 1.0,
            class_weighting: ClassWeighting::ClassCounts,
        }
    }
}

impl MethodConfig {
    pub fn for_method(method: MethodKind) -> Self {
        Self {
            method,
            ..Default::default()
        }
    }

    /// Turns off everything a method adds to plain local training.
    pub fn regularizers_off(method: MethodKind) -> Self {
        Self {
            method,
            lambda_reg: 0.0,
            lambda_kd: 0.0,
            head_mix: 0.0,
            fusion_feedback: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_reg", self.lambda_reg),
            ("lambda_kd", self.lambda_kd),
            ("fusion_feedback", self.fusion_feedback),
        ];
        for (k, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("method.{k} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(invalid("method.temperature must be positive"));
        }
        if !(self.server_lr.is_finite() && self.server_lr > 0.0) {
            return Err(invalid("method.server_lr must be positive"));
        }
        if !(self.svd_energy > 0.0 && self.svd_energy <= 1.0) {
            return Err(invalid("method.svd_energy must lie in (0, 1]"));
        }
        if !(self.margin_cap.is_finite() && self.margin_cap >= 0.0) {
            return Err(invalid("method.margin_cap must be finite and ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.head_mix) {
            return Err(invalid("method.head_mix must lie in [0, 1]"));
        }
        if self.noise_dim == 0 || self.generator_batch == 0 {
            return Err(invalid("method.noise_dim and method.generator_batch must be positive"));
        }
        Ok(())
    }
}
