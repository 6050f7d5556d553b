//! Resolved run configuration: defaults, then the `--config` TOML file, then
//! `--set key=value` overrides, then `--seed`.

use std::path::Path;

use anomaly_expert::features::SynthConfig;
use anomaly_expert::pipeline::DEDUP_THRESHOLD;
use anomaly_expert::scoring::Thresholds;
use anomaly_expert::training::TrainConfig;
use anomaly_expert::{Error, ExpertConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Fraction of every (class, label) group held out by `synth`.
    pub heldout_fraction: f64,
    pub dedup_threshold: f64,
    pub thresholds: Thresholds,
    pub synth: SynthConfig,
    pub model: ExpertConfig,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.2,
            dedup_threshold: DEDUP_THRESHOLD,
            thresholds: Thresholds::default(),
            synth: SynthConfig::default(),
            model: ExpertConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, Error> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: AppConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(s) = seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.thresholds.validate()?;
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config(format!("heldout_fraction must lie in [0, 1), got {}", self.heldout_fraction)));
        }
        if !(-1.0..=1.0).contains(&self.dedup_threshold) {
            return Err(Error::Config(format!("dedup_threshold must lie in [-1, 1], got {}", self.dedup_threshold)));
        }
        Ok(())
    }

    /// Synth output must fit the model.
    pub fn check_model_fits_synth(&self) -> Result<(), Error> {
        if self.model.g != self.synth.g || self.model.d_enc != self.synth.d_enc {
            return Err(Error::Config(format!(
                "model (g={}, d_enc={}) does not match synth (g={}, d_enc={})",
                self.model.g, self.model.d_enc, self.synth.g, self.synth.d_enc
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`. The value is read as a TOML literal, or as a bare string
/// when it does not parse as one.
fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), Error> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = AppConfig::resolve(None, &["train.lr0=1e-3".into(), "synth.n_classes = 3".into()], Some(9)).unwrap();
        assert_eq!(cfg.train.lr0, 1e-3);
        assert_eq!(cfg.synth.n_classes, 3);
        assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
        assert!(AppConfig::resolve(None, &["train.lr=1".into()], None).is_err());
        assert!(AppConfig::resolve(None, &["bogus=1".into()], None).is_err());
        assert!(AppConfig::resolve(None, &["train.precision=f64".into()], None).is_ok());
        assert!(AppConfig::resolve(None, &["noequals".into()], None).is_err());
        assert!(AppConfig::resolve(None, &["heldout_fraction=1.5".into()], None).is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let cfg = AppConfig::resolve(None, &["train.restart_period=7".into()], None).unwrap();
        let text = cfg.to_toml();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, text).unwrap();
        assert_eq!(AppConfig::resolve(Some(&path), &[], None).unwrap(), cfg);
    }
}
