//! Pipeline configuration: built-in defaults, an optional `preset` for the
//! model section, a TOML or JSON file, then `key=value` overrides. Unknown
//! keys are rejected at every level.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use objsdf::datagen::DatasetOptions;
use objsdf::evalmesh::EvalConfig;
use objsdf::fields::FieldConfig;
use objsdf::geometry::SceneSpec;
use objsdf::rendering::RenderConfig;
use objsdf::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model size preset (`full`, `desk` or `compact`) the `model` section
    /// starts from.
    pub preset: String,
    /// Scene to render; the built-in reference scene when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    pub dataset: DatasetOptions,
    pub model: FieldConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn with_preset(preset: &str) -> Result<Self> {
        Ok(Self {
            preset: preset.into(),
            scene: None,
            dataset: DatasetOptions::default(),
            model: FieldConfig::preset(preset, 3)?,
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        })
    }

    /// Layers `file` (if any) and `overrides` over the defaults.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match file {
            Some(path) => parse_file(path)?,
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset = match user.get("preset") {
            None => "desk".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(other) => bail!("preset must be a string, got {other}"),
        };
        let mut merged = serde_json::to_value(Self::with_preset(&preset)?)?;
        merge(&mut merged, user);
        let cfg: Self =
            serde_json::from_value(merged).map_err(|e| anyhow!("invalid configuration: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.render.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn scene(&self) -> SceneSpec {
        self.scene.clone().unwrap_or_else(SceneSpec::reference)
    }
}

fn parse_file(path: &Path) -> Result<Value> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let v: Value = if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let t: toml::Value =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(t)?
    };
    if !v.is_object() {
        bail!("{}: configuration must be a table", path.display());
    }
    Ok(v)
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, falling back
/// to a plain string.
pub fn apply_override(target: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override `{assignment}` has an empty key segment");
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed key"))?,
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut node = target;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{part}` is not inside a table"))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("override `{key}` does not address a table entry"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursive object merge; non-object values in `top` replace `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}
