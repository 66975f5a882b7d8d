use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use headstage::acquisition::ClockPlan;
use headstage::evaluation::ComparisonSettings;
use headstage::predictor::TrainingConfig;
use headstage::synth::SynthConfig;
use headstage::telemetry::SessionSettings;
use headstage::Execution;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Everything a command can be told, in one document. Every section is
/// optional; missing keys take their defaults and unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub execution: Execution,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub training: TrainingConfig,
    pub clock: ClockPlan,
    pub session: SessionSettings,
    pub compare: ComparisonSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory written by `synth` and read by the other commands.
    pub dataset: PathBuf,
    /// Predictor cache.
    pub models: PathBuf,
    /// Reports, logs and config vectors.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "out/dataset".into(),
            models: "out/models".into(),
            output: "out".into(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key.path=value` overrides, validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = Value::Table(doc).try_into().context("invalid configuration")?;
        Ok(cfg)
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(doc: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override '{spec}' is not of the form key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override '{spec}' has an empty key segment");
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!("override '{spec}': '{p}' is not a section"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
