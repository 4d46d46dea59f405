//! Run configuration: a flat `key=value` text format with dotted namespaces.
//!
//! ```text
//! # comments start with '#'
//! data.root = toy_data
//! fusion.mechanism = g_rgb_h
//! semantic.channel_plan = 8,16,32,64
//! train.augment.noise_prob = 0
//! ```
//!
//! The key set is exactly the set of leaves of [`RunConfig`]'s serialized
//! defaults, so an unknown key is rejected by name. `model.preset` is
//! applied before every other key regardless of where it appears. Lists
//! are comma separated; `auto` or an empty value clears an optional value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ablation::Axis;
use crate::error::{Error, Result};
use crate::evaluation::Protocol;
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, Pathway};
use crate::rgb_branch::RgbBranchConfig;
use crate::semantic_branch::SemanticBranchConfig;
use crate::toy::ToySpec;
use crate::training::{Stage, TrainConfig};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "SEMATTN_DATA_ROOT";

/// Keys filled in from the dataset manifest rather than the config.
const DERIVED_KEYS: [&str; 2] = ["fusion.num_scene_classes", "semantic.num_semantic_classes"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Narrow widths that train in minutes on a CPU.
    Tiny,
    /// Residual18 + conv4 at full width.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "full" => Ok(Preset::Full),
            other => Err(Error::config("model.preset", format!("expected tiny or full, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root; defaults to `$SEMATTN_DATA_ROOT`, else `data`.
    pub root: PathBuf,
    /// Keep only this many semantic labels (0: all of them).
    pub semantic_subset: usize,
    pub subset_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSection {
    /// Directory receiving checkpoints, logs, metrics and figures.
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    /// Branch checkpoints the fusion stage starts from; empty means
    /// `<out.dir>/branch_rgb.ckpt` and `<out.dir>/branch_semantic.ckpt`.
    pub rgb: Option<PathBuf>,
    pub semantic: Option<PathBuf>,
    /// Continue a stage from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Checkpoint read by `eval` and `explain`.
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: Protocol,
    /// Pathway to score; empty means the checkpoint's own stage.
    pub pathway: Option<Pathway>,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    /// Label-subset sizes compared by the `semantic_subset` axis.
    pub subset_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    /// Validation samples to explain; empty means all of them.
    pub sample_ids: Vec<String>,
    pub pathway: Pathway,
}

/// Everything a command may need, merged from defaults, a config file and
/// `--set` overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub rgb: RgbBranchConfig,
    pub semantic: SemanticBranchConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub out: OutSection,
    pub checkpoint: CheckpointSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub explain: ExplainSection,
    pub toy: ToySpec,
}

impl RunConfig {
    pub fn defaults(preset: Preset, data_root: PathBuf) -> Self {
        // class counts are placeholders until a manifest is read
        let model = match preset {
            Preset::Tiny => ModelConfig::tiny(2, 2),
            Preset::Full => ModelConfig::full(2, 2),
        };
        let train = match preset {
            Preset::Tiny => TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs: 12,
                lr_step_epochs: 8,
                ..TrainConfig::new(Stage::BranchRgb)
            },
            Preset::Full => TrainConfig::new(Stage::BranchRgb),
        };
        Self {
            model: ModelSection { preset },
            rgb: model.rgb,
            semantic: model.semantic,
            fusion: model.fusion,
            train,
            data: DataSection {
                root: data_root,
                semantic_subset: 0,
                subset_seed: 0,
            },
            out: OutSection { dir: PathBuf::from("runs") },
            checkpoint: CheckpointSection {
                rgb: None,
                semantic: None,
                resume: None,
                eval: None,
            },
            eval: EvalSection {
                protocol: Protocol::Single,
                pathway: None,
                batch_size: 16,
            },
            ablate: AblateSection {
                axis: Axis::Mechanism,
                seeds: vec![0, 1, 2],
                subset_sizes: vec![12, 8, 4],
            },
            explain: ExplainSection {
                sample_ids: Vec::new(),
                pathway: Pathway::Fused,
            },
            toy: ToySpec::default(),
        }
    }

    /// Root from `$SEMATTN_DATA_ROOT`, falling back to `data`.
    pub fn default_data_root() -> PathBuf {
        std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
    }

    /// Defaults, then `text` (a config file body), then `overrides`, in order.
    pub fn resolve(text: Option<&str>, overrides: &[(String, String)], data_root: PathBuf) -> Result<Self> {
        let mut pairs = match text {
            Some(t) => parse_pairs(t)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        let preset = match pairs.iter().rev().find(|(k, _)| k == "model.preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Tiny,
        };
        let mut tree = to_tree(&Self::defaults(preset, data_root))?;
        for (key, raw) in pairs.iter().filter(|(k, _)| k != "model.preset") {
            set_key(&mut tree, key, raw)?;
            // surface type errors against the key that caused them
            serde_json::from_value::<Self>(tree.clone()).map_err(|e| Error::config(key.clone(), e.to_string()))?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.train.validate()?;
        cfg.toy.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)], data_root: PathBuf) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::resolve(text.as_deref(), overrides, data_root)
    }

    /// The model for a dataset with `k` scene and `l` semantic classes.
    pub fn model_config(&self, k: usize, l: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            rgb: self.rgb.clone(),
            semantic: SemanticBranchConfig {
                num_semantic_classes: l,
                ..self.semantic.clone()
            },
            fusion: FusionConfig {
                num_scene_classes: k,
                ..self.fusion.clone()
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, sorted.
    pub fn to_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = BTreeMap::new();
        flatten("", &to_tree(self)?, &mut out);
        Ok(out.into_iter().collect())
    }

    /// The config in its own file format.
    pub fn to_text(&self) -> Result<String> {
        Ok(self.to_pairs()?.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect())
    }
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).map_err(|_| Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?);
    }
    Ok(out)
}

/// Split one `key=value` assignment.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::config(s, "expected key=value")),
    }
}

fn to_tree(cfg: &RunConfig) -> Result<Value> {
    serde_json::to_value(cfg).map_err(|e| Error::config("config", e.to_string()))
}

fn set_key(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    if DERIVED_KEYS.contains(&key) {
        return Err(Error::config(key, "taken from the dataset manifest"));
    }
    let unknown = || Error::config(key, "unknown key");
    let mut node = tree;
    for part in key.split('.') {
        node = node.as_object_mut().and_then(|m| m.get_mut(part)).ok_or_else(unknown)?;
    }
    if node.is_object() {
        return Err(unknown());
    }
    *node = typed_value(node, raw).map_err(|reason| Error::config(key, reason))?;
    Ok(())
}

/// Interpret `raw` using the current value's JSON type as the schema.
fn typed_value(current: &Value, raw: &str) -> std::result::Result<Value, String> {
    match current {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got `{raw}`")),
        Value::Number(n) => scalar_number(raw, n.is_f64()),
        Value::Array(items) => {
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let template = items.first();
            raw.split(',')
                .map(|s| {
                    let s = s.trim();
                    match template {
                        Some(Value::String(_)) => Ok(Value::String(s.to_string())),
                        _ => scalar_number(s, false).or_else(|_| Ok(Value::String(s.to_string()))),
                    }
                })
                .collect::<std::result::Result<Vec<_>, String>>()
                .map(Value::Array)
        }
        Value::Null => Ok(if raw.is_empty() || raw == "auto" {
            Value::Null
        } else {
            scalar_number(raw, false).unwrap_or_else(|_| Value::String(raw.to_string()))
        }),
        _ => Ok(Value::String(raw.to_string())),
    }
}

fn scalar_number(raw: &str, float: bool) -> std::result::Result<Value, String> {
    if !float {
        if let Ok(u) = raw.parse::<u64>() {
            return Ok(Value::from(u));
        }
    }
    raw.parse::<f64>()
        .ok()
        .and_then(serde_json::Number::from_f64)
        .map(Value::Number)
        .ok_or_else(|| format!("expected a number, got `{raw}`"))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => flatten_map(prefix, m, out),
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(render_scalar).collect();
            out.insert(prefix.to_string(), parts.join(","));
        }
        other => {
            out.insert(prefix.to_string(), render_scalar(other));
        }
    }
}

fn flatten_map(prefix: &str, m: &Map<String, Value>, out: &mut BTreeMap<String, String>) {
    for (k, v) in m {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if !DERIVED_KEYS.contains(&key.as_str()) {
            flatten(&key, v, out);
        }
    }
}

fn render_scalar(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Mechanism;
    use crate::semantic_branch::SemanticBackbone;

    fn resolve(text: &str, sets: &[(&str, &str)]) -> Result<RunConfig> {
        let sets: Vec<(String, String)> = sets.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig::resolve(Some(text), &sets, PathBuf::from("data"))
    }

    #[test]
    fn file_then_overrides() {
        let cfg = resolve(
            "# toy\nfusion.mechanism = hadamard\ntrain.batch_size=8\nsemantic.backbone = conv3\nsemantic.channel_plan = 4,8,16\n",
            &[("train.batch_size", "4"), ("checkpoint.resume", "a.ckpt")],
        )
        .unwrap();
        assert_eq!(cfg.fusion.mechanism, Mechanism::Hadamard);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.semantic.backbone, SemanticBackbone::Conv3);
        assert_eq!(cfg.semantic.channel_plan, vec![4, 8, 16]);
        assert_eq!(cfg.checkpoint.resume, Some(PathBuf::from("a.ckpt")));
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_key() {
        for (text, key) in [
            ("fusion.mechanizm = hadamard", "fusion.mechanizm"),
            ("train = 3", "train"),
            ("train.batch_size = many", "train.batch_size"),
            ("fusion.mechanism = product", "fusion.mechanism"),
            ("fusion.num_scene_classes = 3", "fusion.num_scene_classes"),
        ] {
            match resolve(text, &[]) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(resolve("no equals sign", &[]), Err(Error::Config { .. })));
    }

    #[test]
    fn preset_applies_first() {
        let cfg = resolve("fusion.dropout_p = 0.25\nmodel.preset = full\n", &[]).unwrap();
        assert_eq!(cfg.model.preset, Preset::Full);
        assert_eq!(cfg.fusion.out_channels, 1024);
        assert_eq!(cfg.fusion.dropout_p, 0.25);
    }

    #[test]
    fn text_round_trips() {
        let cfg = resolve("semantic.cham_reduction = 4\neval.pathway = rgb\nablate.seeds = 5,6\n", &[]).unwrap();
        let again = resolve(&cfg.to_text().unwrap(), &[]).unwrap();
        assert_eq!(again, cfg);
        let defaults = resolve("", &[]).unwrap();
        assert_eq!(resolve(&defaults.to_text().unwrap(), &[]).unwrap(), defaults);
    }

    #[test]
    fn validation_reaches_nested_sections() {
        assert!(matches!(resolve("train.max_epochs = 0", &[]), Err(Error::Config { .. })));
    }
}
