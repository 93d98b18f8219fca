use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::router::ClassifierTrainConfig;
use crate::synthdata::splitmix64;
use crate::trainer::{PretrainConfig, TrainConfig};

/// Environment variable naming the directory that relative output paths
/// are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "CATCH_OUTPUT_ROOT";

/// Adapter learning rate used by experiments. The trainer default of 2e-4
/// barely moves adapters within five epochs at this model size.
pub const DESK_ADAPTER_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Main,
    Ablation,
    Crossdomain,
    Routing,
    LayersSweep,
    PrefixSweep,
}

impl ExperimentId {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Main => "main",
            ExperimentId::Ablation => "ablation",
            ExperimentId::Crossdomain => "crossdomain",
            ExperimentId::Routing => "routing",
            ExperimentId::LayersSweep => "layers_sweep",
            ExperimentId::PrefixSweep => "prefix_sweep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Hard,
    Soft,
    Random,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub layers: Option<Vec<usize>>,
    pub prefix_len: Option<usize>,
    pub policy: Option<PolicyName>,
    pub temperature: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Samples generated per domain before the split.
    pub n_per_domain: usize,
    /// Size per domain of the separate backbone pretraining corpus.
    pub pretrain_per_domain: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_per_domain: 2500,
            pretrain_per_domain: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    /// Existing dataset directory; generated under the output directory when absent.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub overrides: Overrides,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierTrainConfig,
    /// Temperature of the soft policy.
    pub soft_temperature: f64,
    /// Stand-in for the zero-temperature limit of the soft policy.
    pub limit_temperature: f64,
    pub random_repeats: usize,
    /// Train missing artifacts instead of failing.
    pub train_missing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentId::Main,
            manifest: None,
            output_dir: PathBuf::from("catch-out"),
            seed: 0,
            overrides: Overrides::default(),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig {
                learning_rate: DESK_ADAPTER_LR,
                ..TrainConfig::default()
            },
            classifier: ClassifierTrainConfig::default(),
            soft_temperature: 1.0,
            limit_temperature: 1e-4,
            random_repeats: 100,
            train_missing: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.effective_adapter().validate(&self.backbone)?;
        self.train.validate()?;
        if self.data.n_per_domain < 10 {
            return Err(Error::Config(format!(
                "n_per_domain must be at least 10, got {}",
                self.data.n_per_domain
            )));
        }
        for (name, t) in [
            ("soft_temperature", Some(self.soft_temperature)),
            ("limit_temperature", Some(self.limit_temperature)),
            ("overrides.temperature", self.overrides.temperature),
        ] {
            if let Some(t) = t.filter(|t| !(*t > 0.0)) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        Ok(())
    }

    /// Adapter configuration after applying overrides and the master seed.
    pub fn effective_adapter(&self) -> AdapterConfig {
        let mut a = self.adapter.clone();
        if let Some(l) = &self.overrides.layers {
            a.layers = l.clone();
        }
        if let Some(p) = self.overrides.prefix_len {
            a.prefix_len = p;
        }
        a.seed = derive_seed(self.seed, 3);
        a
    }

    pub fn effective_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            init_seed: derive_seed(self.seed, 1),
            ..self.backbone.clone()
        }
    }

    pub fn effective_pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            seed: derive_seed(self.seed, 2),
            ..self.pretrain.clone()
        }
    }

    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 4),
            ..self.train.clone()
        }
    }

    pub fn effective_classifier(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            seed: derive_seed(self.seed, 5),
            ..self.classifier.clone()
        }
    }

    pub fn soft_temperature(&self) -> f64 {
        self.overrides.temperature.unwrap_or(self.soft_temperature)
    }

    /// Output directory, resolved against the output root variable when relative.
    pub fn resolved_output(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// SHA-256 over every field except the output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Independent sub-seed `k` of a master seed.
pub fn derive_seed(master: u64, k: u64) -> u64 {
    splitmix64(master ^ splitmix64(k))
}

/// Short content key for artifacts that depend on `parts`.
pub fn key_of(parts: &[&serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_string().as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..6])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_every_field_but_output() {
        let base = ExperimentConfig::default();
        let h = base.hash();
        let mut c = base.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(c.hash(), h);
        c.seed = 1;
        assert_ne!(c.hash(), h);
        let mut c = base.clone();
        c.overrides.prefix_len = Some(5);
        assert_ne!(c.hash(), h);
        let mut c = base.clone();
        c.train.learning_rate *= 2.0;
        assert_ne!(c.hash(), h);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: std::result::Result<ExperimentConfig, _> = serde_json::from_str(r#"{"experimnt": "main"}"#);
        assert!(r.is_err());
        let c: ExperimentConfig = serde_json::from_str(r#"{"experiment": "routing", "seed": 7}"#).unwrap();
        assert_eq!(c.experiment, ExperimentId::Routing);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn overrides_reach_the_adapter() {
        let mut c = ExperimentConfig::default();
        c.overrides.layers = Some(vec![10, 12]);
        c.overrides.prefix_len = Some(20);
        let a = c.effective_adapter();
        assert_eq!(a.layers, vec![10, 12]);
        assert_eq!(a.prefix_len, 20);
        c.overrides.layers = Some(vec![13]);
        assert!(c.validate().is_err());
    }
}
