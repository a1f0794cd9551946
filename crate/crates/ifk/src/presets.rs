//! Experiment presets, shipped as embedded config documents.

use crate::config::ExperimentConfig;
use crate::error::{IfkError, Result};

pub const PRESET_NAMES: &[&str] = &["kf-wodf", "kf-wdf", "ekf", "ekf-wodf", "ekf-wdf"];

/// Raw JSON of a preset.
pub fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "kf-wodf" => include_str!("../presets/kf-wodf.json"),
        "kf-wdf" => include_str!("../presets/kf-wdf.json"),
        "ekf" => include_str!("../presets/ekf.json"),
        "ekf-wodf" => include_str!("../presets/ekf-wodf.json"),
        "ekf-wdf" => include_str!("../presets/ekf-wdf.json"),
        _ => return None,
    })
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let src = preset_source(name).ok_or_else(|| IfkError::UnknownPreset(name.to_string()))?;
    ExperimentConfig::from_json(src)
}

/// The preset built on a model, if any; otherwise the closest preset
/// with the model swapped in.
pub fn config_for_model(spec: &str) -> Result<ExperimentConfig> {
    let (name, variant) =
        ifk_core::models::parse_model_spec(spec).map_err(|e| IfkError::config("model", e.to_string()))?;
    use ifk_core::models::{ModelName, Variant};
    let base = match (name, variant) {
        (ModelName::Linear3, Variant::WithDf) => "kf-wdf",
        (ModelName::Linear3, _) => "kf-wodf",
        (ModelName::Fm, Variant::NoInput) => "ekf",
        (ModelName::Fm, Variant::WithoutDf) => "ekf-wodf",
        (ModelName::Fm, Variant::WithDf) => "ekf-wdf",
    };
    let mut cfg = preset(base)?;
    cfg.model = crate::config::ModelSpec::Builtin(spec.to_string());
    Ok(cfg)
}

/// Apply the keys of a JSON object on top of a base config.
pub fn merge_json(base: &ExperimentConfig, overrides: &str) -> Result<ExperimentConfig> {
    let over: serde_json::Value =
        serde_json::from_str(overrides).map_err(|e| IfkError::config("<root>", e.to_string()))?;
    let serde_json::Value::Object(over) = over else {
        return Err(IfkError::config("<root>", "expected a JSON object"));
    };
    let mut merged = serde_json::to_value(base).expect("config serializes");
    let obj = merged.as_object_mut().expect("config is an object");
    for (k, v) in over {
        obj.insert(k, v);
    }
    ExperimentConfig::from_json(&merged.to_string())
}
