//! Experiment configuration: one TOML document, overridable with dotted `key=value` pairs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{input_err, Error, Result};
use crate::network::NetworkConfig;
use crate::objectives::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training dataset file written by `gen-data`.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub context: usize,
    pub horizon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            context: 10,
            horizon: 10,
        }
    }
}

/// When the exit condition of a phase is tested relative to its optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitCheck {
    /// Score, step, then test the scores measured before the step. Every phase takes at least one step.
    #[default]
    AfterStep,
    /// Score, test, and step only if the phase continues. A phase may take zero steps.
    BeforeStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adversarial: bool,
    /// Train the second half of the run on predicted feedback past the context window.
    pub long_term: bool,
    /// Iterations after which a phase is forced to end.
    pub guard: usize,
    /// Decay of the moving average of real scores that sets the tolerances.
    /// 0 takes them from the latest real score alone.
    pub score_ema: f64,
    pub exit_check: ExitCheck,
    /// Evaluate on the test set every this many batches (0 = only at epoch ends).
    pub eval_every: usize,
    /// Cap on test sequences used by evaluation snapshots (0 = all).
    pub eval_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr_generator: 1e-3,
            lr_discriminator: 1e-8,
            adversarial: true,
            long_term: false,
            guard: 200,
            score_ema: 0.9,
            exit_check: ExitCheck::AfterStep,
            eval_every: 0,
            eval_sequences: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub first_step: f64,
    pub adversarial: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            first_step: w.first_step,
            adversarial: w.adversarial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `key=value` overrides (dotted keys, TOML values;
    /// a value that does not parse as TOML is taken as a string).
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = parse_toml_with(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.data.horizon == 0 || self.data.context == 0 {
            return Err(input_err!("context and horizon must be at least 1"));
        }
        if self.train.batch_size == 0 {
            return Err(input_err!("batch_size must be positive"));
        }
        if self.train.guard == 0 {
            return Err(input_err!("guard must be positive"));
        }
        if !(0.0..1.0).contains(&self.train.score_ema) {
            return Err(input_err!("score_ema must be in [0, 1)"));
        }
        if self.train.adversarial
            && (self.discriminator.height, self.discriminator.width) != (self.network.height, self.network.width)
        {
            return Err(input_err!(
                "discriminator resolution {}x{} differs from network {}x{}",
                self.discriminator.height,
                self.discriminator.width,
                self.network.height,
                self.network.width
            ));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            levels: self.network.levels,
            first_step: self.loss.first_step,
            adversarial: self.loss.adversarial,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.data.context + self.data.horizon
    }

    /// Hash of everything that shapes the trained parameters (data paths excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.data.train = None;
        c.data.test = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Deserializes any TOML document after applying dotted `key=value` overrides.
pub fn parse_toml_with<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut doc: toml::Table = text.parse().map_err(|e| input_err!("config: {e}"))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| input_err!("config: {}", e.message()))
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| input_err!("override {spec:?} is not key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(input_err!("override key {key:?} is malformed"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| input_err!("override {key:?}: {p} is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.lr_discriminator, 1e-8);
        assert_eq!(c.train.guard, 200);
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = ExperimentConfig::from_toml_with(
            "seed = 1\n[network]\nlevels = 2\n",
            &[
                "network.hidden=8".into(),
                "train.adversarial=false".into(),
                "data.train=some/path.safetensors".into(),
                "train.lr_generator=5e-4".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.network.levels, 2);
        assert_eq!(c.network.hidden, 8);
        assert!(!c.train.adversarial);
        assert_eq!(c.data.train.as_deref(), Some(Path::new("some/path.safetensors")));
        assert_eq!(c.train.lr_generator, 5e-4);
        assert_eq!(c.loss_weights().levels, 2);
    }

    #[test]
    fn unknown_and_invalid_rejected() {
        assert!(ExperimentConfig::from_toml("[network]\nlayers = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[network]\nheight = 50\n").is_err());
        assert!(ExperimentConfig::from_toml_with("", &["novalue".into()]).is_err());
    }

    #[test]
    fn fingerprint_ignores_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.data.train = Some("x".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.network.hidden = 3;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
