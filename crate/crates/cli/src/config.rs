//! Run configuration file. Every section is optional and falls back to the
//! library defaults; command-line flags override the file.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "scene": { "n_train": 16, "n_test": 8, "imbalance_exponent": 2.0 },
//!   "train": { "epochs": 200, "batch_size": 2 },
//!   "stage1": { "k_groups": 16, "arch": { "max_points_per_token": 64 } },
//!   "stage2": { "mask_ratio": 0.6, "train": { "base_lr": 0.0001 } },
//!   "probe": { "epochs": 300 }
//! }
//! ```
//!
//! `train` is shared by both stages; a `train` object inside `stage1` or
//! `stage2` overrides individual keys for that stage only.

use std::path::Path;

use anyhow::{bail, Context, Result};
use sam3d::eval::ProbeConfig;
use sam3d::scene::SceneSpec;
use sam3d::train::{Stage1Options, Stage2Options, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSection {
    pub n_train: usize,
    pub n_test: usize,
    #[serde(flatten)]
    pub spec: SceneSpec,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            n_train: 16,
            n_test: 8,
            spec: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub seed: Option<u64>,
    pub scene: SceneSection,
    pub stage1: Stage1Options,
    pub stage1_train: TrainConfig,
    pub stage2: Stage2Options,
    pub stage2_train: TrainConfig,
    pub probe: ProbeConfig,
}

const SECTIONS: [&str; 6] = ["seed", "scene", "train", "stage1", "stage2", "probe"];

fn section<T: DeserializeOwned>(root: &Map<String, Value>, name: &str) -> Result<T> {
    let v = root.get(name).cloned().unwrap_or_else(|| Value::Object(Map::new()));
    serde_json::from_value(v).with_context(|| format!("config section `{name}`"))
}

/// Splits a stage section into its own options and the merged training
/// settings.
fn stage<T: DeserializeOwned>(root: &Map<String, Value>, name: &str) -> Result<(T, TrainConfig)> {
    let mut own = match root.get(name) {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => bail!("config section `{name}` must be an object"),
    };
    let mut train = match root.get("train") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => bail!("config section `train` must be an object"),
    };
    match own.remove("train") {
        None => {}
        Some(Value::Object(m)) => train.extend(m),
        Some(_) => bail!("`{name}.train` must be an object"),
    }
    let options = serde_json::from_value(Value::Object(own)).with_context(|| format!("config section `{name}`"))?;
    let train = serde_json::from_value(Value::Object(train)).with_context(|| format!("training settings for `{name}`"))?;
    Ok((options, train))
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let root = match serde_json::from_str::<Value>(text)? {
            Value::Object(m) => m,
            _ => bail!("config must be a JSON object"),
        };
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            bail!("unknown config section `{k}`");
        }
        let (stage1, stage1_train) = stage(&root, "stage1")?;
        let (stage2, stage2_train) = stage(&root, "stage2")?;
        Ok(Self {
            seed: match root.get("seed") {
                None => None,
                Some(v) => Some(serde_json::from_value(v.clone()).context("config `seed` must be an unsigned integer")?),
            },
            scene: section(&root, "scene")?,
            stage1,
            stage1_train,
            stage2,
            stage2_train,
            probe: section(&root, "probe")?,
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    /// Applies the run seed (flag first, then file) to every seeded section.
    pub fn with_seed(mut self, flag: Option<u64>) -> Self {
        if let Some(s) = flag.or(self.seed) {
            self.seed = Some(s);
            self.scene.spec.seed = s;
            self.stage1_train.seed = s;
            self.stage2_train.seed = s;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
    }

    #[test]
    fn stage_training_overrides_are_per_key() {
        let c = Config::from_json(
            r#"{"train": {"epochs": 7, "base_lr": 0.01},
                "stage2": {"mask_ratio": 0.5, "train": {"base_lr": 0.0001}},
                "scene": {"n_train": 3, "imbalance_exponent": 2.0}}"#,
        )
        .unwrap();
        assert_eq!(c.stage1_train.epochs, 7);
        assert_eq!(c.stage1_train.base_lr, 0.01);
        assert_eq!(c.stage2_train.epochs, 7);
        assert_eq!(c.stage2_train.base_lr, 0.0001);
        assert_eq!(c.stage2.mask_ratio, 0.5);
        assert_eq!(c.scene.n_train, 3);
        assert_eq!(c.scene.n_test, 8);
        assert_eq!(c.scene.spec.imbalance_exponent, 2.0);
    }

    #[test]
    fn partial_arch_keeps_other_defaults() {
        let c = Config::from_json(r#"{"stage1": {"arch": {"max_points_per_token": 64}}}"#).unwrap();
        assert_eq!(c.stage1.arch.max_points_per_token, 64);
        assert_eq!(c.stage1.arch.embed_dim, Config::default().stage1.arch.embed_dim);
    }

    #[test]
    fn flag_seed_wins() {
        let c = Config::from_json(r#"{"seed": 4}"#).unwrap();
        assert_eq!(c.clone().with_seed(None).stage1_train.seed, 4);
        let c = c.with_seed(Some(9));
        assert_eq!((c.scene.spec.seed, c.stage2_train.seed, c.seed), (9, 9, Some(9)));
    }

    #[test]
    fn unknown_sections_and_bad_values_are_rejected() {
        assert!(Config::from_json(r#"{"stage3": {}}"#).is_err());
        assert!(Config::from_json(r#"{"train": 3}"#).is_err());
        assert!(Config::from_json(r#"{"train": {"epochs": "many"}}"#).is_err());
    }
}
