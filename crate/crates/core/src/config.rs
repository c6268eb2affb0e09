// SPDX-License-Identifier: Apache-2.0

//! One experiment record shared by every subcommand: `world.*`, `data.*`,
//! `model.*`, `train.*`, `eval.*`. Files are TOML or JSON; `key=value`
//! overrides are applied on top and win over file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::eval::EvalConfig;
use crate::model::ModelSpec;
use crate::train::TrainConfig;
use crate::world::{DataConfig, WorldConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// File syntax, picked from the extension (`.json` or anything else = TOML).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

impl Config {
    pub fn parse(text: &str, format: Format) -> Result<Config> {
        let cfg: Config = match format {
            Format::Toml => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            Format::Json => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, Format::from_path(path))
    }

    /// Apply `section.key=value` assignments in order. Values are read as
    /// JSON when they parse as such, otherwise as a bare string; `null`
    /// clears an optional field.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Config> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = parse_override(o.as_ref())?;
            set_path(&mut tree, &key, value)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("override: {e}")))
    }

    /// Keep the derived fields consistent: the model's retina width follows
    /// the world's sensor.
    pub fn resolve(mut self) -> Result<Config> {
        self.model.retina_len = self.world.bins * self.world.feature_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.world.landmarks == 0 {
            return Err(Error::Config("world.landmarks must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        // TOML cannot encode `None`; going through JSON drops those keys.
        let tree = strip_nulls(serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?);
        toml::to_string_pretty(&tree).map_err(|e| Error::Config(e.to_string()))
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(map) => Value::Object(
            map.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.into_iter().map(strip_nulls).collect()),
        other => other,
    }
}

pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    let parts: Vec<String> = key.split('.').map(str::to_owned).collect();
    if parts.len() < 2 || parts.iter().any(String::is_empty) {
        return Err(Error::Config(format!(
            "override key `{key}` must look like section.field"
        )));
    }
    let raw = raw.trim();
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((parts, value))
}

fn set_path(tree: &mut Value, key: &[String], value: Value) -> Result<()> {
    let dotted = key.join(".");
    let mut node = tree;
    for (i, part) in key.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{dotted}`: `{part}` is not a section")))?;
        if i + 1 == key.len() {
            // Optional fields serialize as null and are still valid targets.
            if !map.contains_key(part) {
                return Err(Error::Config(format!("unknown config key `{dotted}`")));
            }
            map.insert(part.clone(), value);
            return Ok(());
        }
        node = map
            .get_mut(part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{dotted}`")))?;
    }
    unreachable!("override keys have at least two parts")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(Config::parse("", Format::Toml).unwrap(), Config::default());
        assert_eq!(Config::parse("{}", Format::Json).unwrap(), Config::default());
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = Config::default();
        cfg.model.tf_heads = Some(2);
        cfg.eval.lengths = vec![40, 80];
        let text = cfg.to_toml().unwrap();
        assert_eq!(Config::parse(&text, Format::Toml).unwrap(), cfg);
    }

    #[test]
    fn overrides_win_and_type_check() {
        let cfg = Config::parse("[train]\nbatch_size = 8\n", Format::Toml).unwrap();
        let o = cfg
            .with_overrides(&[
                "train.batch_size=4",
                "model.family=gru",
                "model.tf_heads=3",
                "eval.lengths=[1,2]",
            ])
            .unwrap();
        assert_eq!(o.train.batch_size, 4);
        assert_eq!(o.model.family, Family::Gru);
        assert_eq!(o.model.tf_heads, Some(3));
        assert_eq!(o.eval.lengths, vec![1, 2]);
        assert_eq!(o.with_overrides(&["model.tf_heads=null"]).unwrap().model.tf_heads, None);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let cfg = Config::default();
        for bad in [
            "train.nope=1",
            "train=1",
            "batch_size",
            "train.batch_size=abc",
            "world.bins.x=1",
        ] {
            let e = cfg.with_overrides(&[bad]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(Config::parse("[train]\nbatchsize = 8\n", Format::Toml).is_err());
        assert!(Config::parse("[extra]\n", Format::Toml).is_err());
    }

    #[test]
    fn resolve_ties_retina_to_world() {
        let cfg = Config::default()
            .with_overrides(&["world.bins=4"])
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.model.retina_len, 4 * cfg.world.feature_dim);
    }
}
