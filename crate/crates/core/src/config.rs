//! Run configuration: one TOML file holding every tunable.
//!
//! ```toml
//! [grid]
//! image_w = 320
//! image_h = 320
//! strides = [8, 16, 32, 64]
//! # anchors = [[[12, 16], [19, 36], [40, 28]], ...]   # optional, one list per stride
//!
//! [schema]
//! parts = ["face"]
//!
//! [loss]       # LossWeights
//! [inference]  # Thresholds
//! [scene]      # SceneConfig, part names must match [schema]
//! [train]      # TrainConfig, weights come from [loss]
//! ```
//!
//! Unknown keys are rejected. Omitted sections take their defaults.

use crate::association::Thresholds;
use crate::losses::LossWeights;
use crate::representation::{default_anchors, Anchor, GridLevel, GridSpec, PartSchema, DEFAULT_STRIDES};
use crate::synthscene::SceneConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {error}")]
    Read { path: String, error: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid [{section}]: {message}")]
    Invalid { section: &'static str, message: String },
}

fn invalid(section: &'static str, e: impl ToString) -> ConfigError {
    ConfigError::Invalid { section, message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub image_w: u32,
    pub image_h: u32,
    pub strides: Vec<u32>,
    /// `[w, h]` pairs per stride; built-in anchors when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<Vec<[f64; 2]>>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { image_w: 320, image_h: 320, strides: DEFAULT_STRIDES.to_vec(), anchors: None }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec, ConfigError> {
        let levels = match &self.anchors {
            None => self.strides.iter().map(|&stride| GridLevel { stride, anchors: default_anchors(stride) }).collect(),
            Some(lists) => {
                if lists.len() != self.strides.len() {
                    return Err(invalid(
                        "grid",
                        format!("{} anchor lists for {} strides", lists.len(), self.strides.len()),
                    ));
                }
                self.strides
                    .iter()
                    .zip(lists)
                    .map(|(&stride, list)| GridLevel {
                        stride,
                        anchors: list.iter().map(|&[w, h]| Anchor::new(w, h)).collect(),
                    })
                    .collect()
            }
        };
        let spec = GridSpec { image_w: self.image_w, image_h: self.image_h, levels };
        spec.validate().map_err(|e| invalid("grid", e))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub parts: Vec<String>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self { parts: vec!["face".into()] }
    }
}

impl SchemaConfig {
    pub fn schema(&self) -> Result<PartSchema, ConfigError> {
        let names: Vec<&str> = self.parts.iter().map(String::as_str).collect();
        PartSchema::new(&names).map_err(|e| invalid("schema", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub schema: SchemaConfig,
    pub loss: LossWeights,
    pub inference: Thresholds,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            schema: SchemaConfig::default(),
            loss: LossWeights::default(),
            inference: Thresholds::default(),
            scene: SceneConfig::faces(0),
            train: TrainConfig::default(),
        }
    }
}

/// Validated pieces ready for the library calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub spec: GridSpec,
    pub schema: PartSchema,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.train.weights = cfg.loss.clone();
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|error| ConfigError::Read { path: path.display().to_string(), error })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Echo embedded in reports.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Replaces the scene and train seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Checks every section and the cross-section constraints.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let spec = self.grid.spec()?;
        let schema = self.schema.schema()?;
        self.loss.validate().map_err(|e| invalid("loss", e))?;
        self.inference.validate().map_err(|e| invalid("inference", e))?;
        self.scene.validate().map_err(|e| invalid("scene", e))?;
        let scene_names: Vec<&String> = self.scene.parts.iter().map(|p| &p.name).collect();
        if scene_names != schema.part_names.iter().collect::<Vec<_>>() {
            return Err(invalid("scene", format!("part rules {scene_names:?} do not match schema {:?}", schema.part_names)));
        }
        if (self.scene.image_w, self.scene.image_h) != (spec.image_w, spec.image_h) {
            return Err(invalid(
                "scene",
                format!(
                    "image {}x{} differs from grid {}x{}",
                    self.scene.image_w, self.scene.image_h, spec.image_w, spec.image_h
                ),
            ));
        }
        let train = TrainConfig { weights: self.loss.clone(), ..self.train.clone() };
        train.validate().map_err(|e| invalid("train", e))?;
        Ok(Resolved { spec, schema, train })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHECKED_IN: &str = include_str!("../../../configs/default.toml");

    #[test]
    fn checked_in_default_matches_code() {
        assert_eq!(RunConfig::from_toml_str(CHECKED_IN).unwrap(), RunConfig::default());
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[grid]\nimage_w = 320\nimage_h = 320\nstrides = [8]\ncolour = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[extra]\n").is_err());
        assert!(RunConfig::from_toml_str("[loss]\nalpah = 0.1\n").is_err());
    }

    #[test]
    fn invalid_sections_named() {
        let cases = [
            ("[loss]\nalpha = -1.0\n", "loss"),
            ("[inference]\nbody_conf = 2.0\n", "inference"),
            ("[train]\nlr = 0.0\n", "train"),
            ("[schema]\nparts = [\"left\", \"right\"]\n", "scene"),
            ("[grid]\nimage_w = 100\nimage_h = 320\nstrides = [8, 16, 32, 64]\n", "grid"),
        ];
        for (text, section) in cases {
            match RunConfig::from_toml_str(text) {
                Err(ConfigError::Invalid { section: s, .. }) => assert_eq!(s, section, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn loss_weights_flow_into_training() {
        let cfg = RunConfig::from_toml_str("[loss]\nlambda = 0.0\n").unwrap();
        assert_eq!(cfg.train.weights.lambda, 0.0);
        assert_eq!(cfg.resolve().unwrap().train.weights.lambda, 0.0);
    }

    #[test]
    fn explicit_anchors() {
        let text = "[grid]\nimage_w = 64\nimage_h = 64\nstrides = [8, 16]\nanchors = [[[10.0, 12.0]], [[30.0, 40.0], [20.0, 20.0]]]\n\
                    [scene]\nseed = 0\nimage_w = 64\nimage_h = 64\nbodies = [1, 1]\nbody_width = [10.0, 12.0]\nbody_aspect = [2.0, 2.0]\n\
                    crowding = 0.5\n[[scene.parts]]\nname = \"face\"\ncenter = [0.0, -0.3]\njitter = [0.0, 0.0]\nsize = [0.3, 0.3]\n\
                    aspect = [1.0, 1.0]\nvisible_prob = 1.0\n";
        let spec = RunConfig::from_toml_str(text).unwrap().resolve().unwrap().spec;
        assert_eq!(spec.levels[1].anchors, vec![Anchor::new(30.0, 40.0), Anchor::new(20.0, 20.0)]);
    }
}
