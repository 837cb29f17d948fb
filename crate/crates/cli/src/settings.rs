//! Layered configuration: built-in defaults, then the `--config` TOML file,
//! then `--set section.key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mftts::model::ModelConfig;
use mftts::textfront::OovPolicy;
use mftts::trainer::TrainConfig;
use mftts::vocoder::GriffinLimConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeSettings {
    pub oov: OovPolicy,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocoder: GriffinLimConfig,
    pub featurize: FeaturizeSettings,
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form section.key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} has an empty component");
    }
    let (leaf, sections) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for s in sections {
        let entry = cur.entry(s.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override key {key:?}: {s} is not a section"),
        };
    }
    cur.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Settings {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| mftts::Error::ConfigError(e.message().to_string()).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mftts::model::Variant;

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[model]\nvariant = \"PHONE_WORD\"\n[train]\nbatch_size = 4\n").unwrap();
        let s = Settings::load(
            Some(&path),
            &["train.batch_size=2".into(), "model.width_multiplier=0.25".into(), "featurize.oov=spell".into()],
        )
        .unwrap();
        assert_eq!(s.model.variant, Variant::PhoneWord);
        assert_eq!(s.train.batch_size, 2);
        assert_eq!(s.model.width_multiplier, 0.25);
        assert_eq!(s.featurize.oov, OovPolicy::Spell);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Settings::load(None, &["train.batchsize=2".into()]).is_err());
        assert!(Settings::load(None, &["nonsense".into()]).is_err());
    }
}
