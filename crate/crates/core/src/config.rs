//! Run configuration: TOML file, `CSGEMOS__SECTION__KEY` environment overrides and
//! `section.key=value` command-line overrides, applied in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::MixtureConfig;
use crate::error::{Error, Result};
use crate::pipeline::{EmosSettings, PipelineSettings, QmSettings, VerifySettings};
use crate::synth::ScenarioConfig;

pub const ENV_PREFIX: &str = "CSGEMOS__";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Long-format member CSV; observations may be embedded.
    pub forecasts: Option<PathBuf>,
    /// Companion observation CSV, overriding embedded observations.
    pub observations: Option<PathBuf>,
    /// Reforecast archive in the forecast format; required for quantile mapping.
    pub reforecasts: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    /// Dump QM+W weights for every verification date instead of only the first per lead.
    pub all_weight_dates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub mixtures: Vec<MixtureConfig>,
    pub paths: PathsConfig,
    pub output: OutputSettings,
    /// Synthetic scenario for `simulate`; its mixtures are replaced by the run's.
    pub scenario: ScenarioConfig,
    pub emos: EmosSettings,
    pub qm: QmSettings,
    pub verify: VerifySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineSettings::default();
        RunConfig {
            seed: p.seed,
            threads: 0,
            mixtures: p.mixtures,
            paths: PathsConfig {
                output: PathBuf::from("out"),
                ..Default::default()
            },
            output: OutputSettings::default(),
            scenario: ScenarioConfig::default(),
            emos: p.emos,
            qm: p.qm,
            verify: p.verify,
        }
    }
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("invalid override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds the configuration from an optional file, environment variables and
    /// `key=value` overrides.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase().replace("__", "."), v)))
            .collect();
        env.sort();
        for (k, v) in env {
            set_path(&mut table, &k, parse_value(&v))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineSettings {
        PipelineSettings {
            mixtures: self.mixtures.clone(),
            emos: self.emos.clone(),
            qm: self.qm.clone(),
            verify: self.verify.clone(),
            seed: self.seed,
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            mixtures: self.mixtures.clone(),
            ..self.scenario.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.scenario().validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
