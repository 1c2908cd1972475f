//! Config-file handling shared by the `invflow` binary and its tests.
//!
//! Training configs are flat TOML files whose keys are the fields of
//! [`TrainConfig`]. Keys missing from the file come from the preset of the
//! selected model; command-line flags override both.

use std::path::Path;

use anyhow::{bail, Context, Result};
use invflow::harness::{BenchmarkSpec, Preset};
use invflow::train::{ModelKind, TrainConfig};

/// Preset for `model`; classifiers have their own recipes.
pub fn preset_config(model: ModelKind, preset: Preset) -> TrainConfig {
    match (model, preset) {
        (ModelKind::Classifier, Preset::Desk) => TrainConfig::classification_desk(),
        (ModelKind::Classifier, Preset::Full) => TrainConfig::classification(),
        (m, p) => p.config(m),
    }
}

/// Parses flat TOML text on top of the preset for the model named by
/// `model`, or by the file's `model` key, or ANM.
pub fn parse_train_config(text: &str, model: Option<ModelKind>, preset: Preset) -> Result<TrainConfig> {
    let file: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
    if let Some((k, _)) = file.iter().find(|(_, v)| v.is_table()) {
        bail!("config must be flat; key '{k}' holds a table");
    }
    let from_file = match file.get("model") {
        Some(v) => Some(
            v.as_str()
                .context("'model' must be a string")?
                .parse::<ModelKind>()?,
        ),
        None => None,
    };
    let model = model.or(from_file).unwrap_or(ModelKind::Anm);
    let mut merged = toml::Table::try_from(preset_config(model, preset))?;
    merged.extend(file);
    merged.insert("model".into(), toml::Value::String(model.to_string()));
    let cfg: TrainConfig = merged.try_into().context("bad config")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: Option<&Path>, model: Option<ModelKind>, preset: Preset) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    parse_train_config(&text, model, preset).with_context(|| match path {
        Some(p) => format!("in {}", p.display()),
        None => "in default config".into(),
    })
}

/// Flat TOML text of `cfg`, readable by [`parse_train_config`].
pub fn train_config_to_toml(cfg: &TrainConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}

pub fn load_bench_spec(path: &Path) -> Result<BenchmarkSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: BenchmarkSpec = toml::from_str(&text).with_context(|| format!("in {}", path.display()))?;
    Ok(spec)
}

/// Comma-separated model names.
pub fn parse_models(list: &str) -> Result<Vec<ModelKind>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| Ok(s.parse::<ModelKind>()?))
        .collect()
}
