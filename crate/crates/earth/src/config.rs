//! TOML configuration files.

use std::path::Path;

use earth_core::data::SynthConfig;
use earth_core::train::TrainConfig;
use serde::Deserialize;

use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn toml_error(path: &Path, text: &str, err: toml::de::Error) -> Error {
    match err.span() {
        Some(span) => {
            let line = text[..span.start].matches('\n').count() as u64 + 1;
            Error::format(path, line, err.message().to_owned())
        }
        None => Error::file(path, err.message().to_owned()),
    }
}

/// Keys mirror the `TrainConfig` fields; missing keys take their defaults.
pub fn parse_train_config(path: &Path, text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| toml_error(path, text, e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    parse_train_config(path, &read(path)?)
}

pub fn train_config_to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("TrainConfig serializes to TOML")
}

/// The seasonal ring benchmark, selected with `preset = "benchmark"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preset {
    preset: String,
    #[serde(default = "default_regions")]
    regions: usize,
    #[serde(default = "default_length")]
    length: usize,
    #[serde(default = "default_noise")]
    noise_rel: f64,
    #[serde(default)]
    seed: u64,
}

fn default_regions() -> usize {
    8
}

fn default_length() -> usize {
    300
}

fn default_noise() -> f64 {
    0.02
}

/// Either a preset or every `SynthConfig` field spelled out.
pub fn parse_synth_config(path: &Path, text: &str) -> Result<SynthConfig> {
    let table: toml::Table = text.parse().map_err(|e| toml_error(path, text, e))?;
    let cfg = if table.contains_key("preset") {
        let p: Preset = toml::from_str(text).map_err(|e| toml_error(path, text, e))?;
        if p.preset != "benchmark" {
            return Err(Error::file(path, format!("unknown preset `{}`, expected `benchmark`", p.preset)));
        }
        SynthConfig::benchmark(p.regions, p.length, p.noise_rel, p.seed)
    } else {
        toml::from_str(text).map_err(|e| toml_error(path, text, e))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_synth_config(path: &Path) -> Result<SynthConfig> {
    parse_synth_config(path, &read(path)?)
}
