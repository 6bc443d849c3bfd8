//! Experiment configuration: a TOML document with the sections `data`,
//! `model`, `federation`, `strategy`, `attack`, `defense` and `eval`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackKind};
use crate::defense::DefenseKind;
use crate::error::{Error, Result};
use crate::model::MlpConfig;
use crate::strategy::{LocalTrainConfig, StrategyKind};

fn default_alpha() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian blobs, one per class.
    Synthetic { num_classes: usize, dim: usize, n_per_class: usize, spread: f64 },
    /// Headed CSV file; features are min-max scaled per column.
    Table {
        path: String,
        label_column: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        feature_columns: Vec<String>,
    },
}

// Unknown keys are rejected by the flattened source variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Dirichlet concentration of the non-IID partition.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    #[serde(default)]
    pub malicious_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Per-client stratified holdout fraction.
    pub test_fraction: f64,
    /// `E_p`.
    pub personalize_epochs: usize,
    pub personalize_lr: f64,
    pub personalize_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub strategy: StrategyKind,
    pub attack: AttackConfig,
    pub defense: DefenseKind,
    pub eval: EvalConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Parses `text` and applies `key=value` overrides addressed by dotted
    /// paths. Values are TOML literals; anything that does not parse as one
    /// is taken as a string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(config_err)?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        fill_dnc_fraction(&mut doc);
        doc.try_into().map_err(config_err)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    pub fn malicious_count(&self) -> usize {
        (self.federation.malicious_fraction * self.federation.num_clients as f64).round() as usize
    }

    pub fn local_train(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.federation.local_epochs,
            lr: self.federation.local_lr,
            batch_size: self.federation.batch_size,
        }
    }

    pub fn personalize_train(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.eval.personalize_epochs,
            lr: self.eval.personalize_lr,
            batch_size: self.eval.personalize_batch_size,
        }
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        let bad = |m: String| Err(Error::Config(m));
        if f.num_clients == 0 || f.clients_per_round == 0 || f.clients_per_round > f.num_clients {
            return bad(format!("clients_per_round must be in 1..={}", f.num_clients));
        }
        if !(0.0..=1.0).contains(&f.malicious_fraction) {
            return bad("malicious_fraction must be in [0,1]".into());
        }
        if !(f.local_lr >= 0.0) || !(self.eval.personalize_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if f.batch_size == 0 || self.eval.personalize_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.data.alpha > 0.0) {
            return bad("data.alpha must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval.test_fraction) {
            return bad("eval.test_fraction must be in [0,1)".into());
        }
        if self.attack.kind != AttackKind::None && self.malicious_count() == 0 {
            return bad("an attack is configured but malicious_fraction yields no malicious clients".into());
        }
        if let DataSource::Synthetic { num_classes, dim, n_per_class, spread } = self.data.source {
            if num_classes < 2 || dim == 0 || n_per_class == 0 || !(spread > 0.0) {
                return bad("synthetic data needs ≥ 2 classes, positive dim, n_per_class and spread".into());
            }
        }
        self.defense.validate(f.clients_per_round)
    }

    /// Model shape for the given data dimensions.
    pub fn mlp(&self, dim: usize, num_classes: usize) -> Result<MlpConfig> {
        MlpConfig::new(dim, self.model.hidden_dims.clone(), num_classes).map_err(config_err)
    }
}

/// DnC filters the assumed malicious fraction unless told otherwise.
fn fill_dnc_fraction(doc: &mut toml::Table) {
    let frac = doc.get("federation").and_then(|f| f.get("malicious_fraction")).cloned();
    let Some(defense) = doc.get_mut("defense").and_then(|d| d.as_table_mut()) else { return };
    if defense.get("kind").and_then(|k| k.as_str()) == Some("dnc") && !defense.contains_key("filter_frac") {
        if let Some(frac) = frac {
            defense.insert("filter_frac".into(), frac);
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in `doc`, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{key}' passes through non-table '{p}'")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
[data]
source = "synthetic"
num_classes = 4
dim = 12
n_per_class = 40
spread = 0.1
alpha = 0.5

[model]
hidden_dims = [16]

[federation]
num_clients = 10
clients_per_round = 5
rounds = 3
malicious_fraction = 0.1
seed = 7
local_epochs = 1
local_lr = 0.1
batch_size = 8

[strategy]
kind = "fed_prox_ft"
mu = 0.01

[attack]
kind = "sybil"
mask = [0, 1, 2]

[defense]
kind = "multi_krum"
m_assumed = 1

[eval]
test_fraction = 0.2
personalize_epochs = 1
personalize_lr = 0.05
personalize_batch_size = 8
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        c.validate().unwrap();
        assert_eq!(c.strategy, StrategyKind::FedProxFt { mu: 0.01 });
        assert_eq!(c.attack.poison_rate, 0.25);
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string().unwrap(), text);
        assert_eq!(c.hash().unwrap().len(), 16);
    }

    #[test]
    fn dnc_fraction_defaults_to_malicious_fraction() {
        let ov = ["defense={ kind = \"dnc\" }".to_string()];
        let c = ExperimentConfig::from_toml_with_overrides(SAMPLE, &ov).unwrap();
        assert_eq!(c.defense, DefenseKind::Dnc { filter_frac: 0.1, subsample_dim: None, n_iters: 1 });
        let ov = ["defense={ kind = \"dnc\", filter_frac = 0.3 }".to_string()];
        let c = ExperimentConfig::from_toml_with_overrides(SAMPLE, &ov).unwrap();
        assert_eq!(c.defense, DefenseKind::Dnc { filter_frac: 0.3, subsample_dim: None, n_iters: 1 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SAMPLE.replace("alpha = 0.5", "alpha = 0.5\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = SAMPLE.replace("mu = 0.01", "mu = 0.01\nnu = 2");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn overrides_replace_values_and_variants() {
        let ov = vec![
            "federation.seed=99".to_string(),
            "attack.kind=pfedba".to_string(),
            "strategy={ kind = \"ditto\", lambda = 0.5 }".to_string(),
        ];
        let c = ExperimentConfig::from_toml_with_overrides(SAMPLE, &ov).unwrap();
        assert_eq!(c.federation.seed, 99);
        assert_eq!(c.attack.kind, AttackKind::Pfedba);
        assert_eq!(c.strategy, StrategyKind::Ditto { lambda: 0.5 });
        assert!(ExperimentConfig::from_toml_with_overrides(SAMPLE, &["nokey".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides(SAMPLE, &["federation.seed.x=1".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let c = ExperimentConfig::from_toml_with_overrides(SAMPLE, &["federation.clients_per_round=11".into()]).unwrap();
        assert!(c.validate().is_err());
        let c = ExperimentConfig::from_toml_with_overrides(SAMPLE, &["federation.malicious_fraction=0.0".into()]).unwrap();
        assert!(c.validate().is_err());
    }
}
