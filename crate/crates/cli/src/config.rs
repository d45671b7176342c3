//! JSON run configuration: a preset overlaid with a partial user document.

use std::path::Path;

use lsta_core::synth::ToyTaskConfig;
use lsta_core::train::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// JSON Schema of the configuration file.
pub const CONFIG_SCHEMA: &str = include_str!("../config.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: ToyTaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset, variant: Variant) -> Self {
        let train = match preset {
            Preset::Desk => TrainConfig::desk(variant),
            Preset::Paper => TrainConfig::paper(variant),
        };
        RunConfig {
            task: ToyTaskConfig::default(),
            train,
        }
    }

    /// Preset values overlaid with `overlay`, key by key. Keys the preset
    /// lacks survive the merge and are rejected by deserialization.
    pub fn from_overlay(preset: Preset, variant: Variant, overlay: &Value) -> Result<Self> {
        if !overlay.is_object() {
            return Err(CliError::Validation("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(Self::preset(preset, variant)).expect("config serializes");
        merge(&mut base, overlay);
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset, variant: Variant) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_overlay(preset, variant, &overlay)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.train.stage1.epochs == 0 {
            return Err(CliError::Validation("stage1.epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.task.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// First eight bytes of the SHA-256 of the compact training-config JSON.
pub fn config_hash(cfg: &TrainConfig) -> u64 {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overlay_changes_only_named_keys() {
        let cfg = RunConfig::from_overlay(
            Preset::Desk,
            Variant::Lsta,
            &json!({"train": {"stage1": {"lr": 0.5}}, "task": {"seed": 9}}),
        )
        .unwrap();
        let mut want = RunConfig::preset(Preset::Desk, Variant::Lsta);
        want.train.stage1.lr = 0.5;
        want.task.seed = 9;
        assert_eq!(cfg, want);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            json!({"trian": {}}),
            json!({"train": {"stage1": {"learning_rate": 1.0}}}),
            json!({"task": {"hieght": 3}}),
        ] {
            let e = RunConfig::from_overlay(Preset::Desk, Variant::Lsta, &bad).unwrap_err();
            assert!(e.to_string().contains("unknown field"), "{e}");
            assert_eq!(e.exit_code(), 1);
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let e = RunConfig::from_overlay(Preset::Desk, Variant::Lsta, &json!({"train": {"stage1": {"lr": 0.0}}}))
            .unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = RunConfig::from_overlay(Preset::Desk, Variant::Lsta, &json!({"train": {"variant": "lstm"}}))
            .unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = TrainConfig::desk(Variant::Lsta);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&TrainConfig::desk(Variant::Baseline)));
    }

    fn keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
        if let Value::Object(m) = v {
            for (k, x) in m {
                let p = format!("{prefix}/{k}");
                out.push(p.clone());
                keys(x, &p, out);
            }
        }
    }

    fn schema_keys(s: &Value, prefix: &str, out: &mut Vec<String>) {
        if let Some(Value::Object(props)) = s.get("properties") {
            assert_eq!(s["additionalProperties"], json!(false), "{prefix}");
            for (k, x) in props {
                let p = format!("{prefix}/{k}");
                out.push(p.clone());
                schema_keys(x, &p, out);
            }
        }
    }

    #[test]
    fn schema_matches_config_shape() {
        let schema: Value = serde_json::from_str(CONFIG_SCHEMA).unwrap();
        let mut want = Vec::new();
        keys(&serde_json::to_value(RunConfig::preset(Preset::Desk, Variant::Lsta)).unwrap(), "", &mut want);
        let mut got = Vec::new();
        schema_keys(&schema, "", &mut got);
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }
}
