//! Flat `key=value` configuration files with environment overrides.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Consumers read only
//! the prefixes they own, so one file can configure several subsystems.
//! Every key can be overridden by an environment variable: uppercase, dots
//! and dashes replaced by underscores, prefixed with `NETMIL_`
//! (`NETMIL_TRAINING_EPOCHS` overrides `training.epochs`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::Cardinality;
use crate::synth::{RelationSpec, SynthConfig};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "NETMIL_";

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn empty() -> KvConfig {
        KvConfig::default()
    }

    pub fn parse_str(content: &str, origin: &str) -> Result<KvConfig> {
        let mut values = BTreeMap::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(origin, idx + 1, "expected `key = value`"));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(origin, idx + 1, "empty key"));
            }
            values.insert(key, value);
        }
        Ok(KvConfig { values })
    }

    pub fn from_file(path: &Path) -> Result<KvConfig> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvConfig::parse_str(&content, &path.display().to_string())
    }

    /// Applies `NETMIL_*` environment overrides on top of the file values.
    pub fn apply_env(&mut self) {
        for (key, value) in std::env::vars() {
            if let Some(rest) = key.strip_prefix(ENV_PREFIX) {
                let dotted = rest.to_lowercase().replace('_', ".");
                self.values.insert(dotted, value);
            }
        }
    }

    /// Command-line `key=value` overrides, highest precedence.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!(
                    "override `{item}` is not of the form key=value"
                )));
            };
            self.values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key `{key}`: cannot parse `{raw}`"))
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    /// All resolved values, for run manifests.
    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

impl TrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            minibatch_size: kv.get_or("training.minibatch_size", d.minibatch_size)?,
            minibatches_per_graph: kv
                .get_or("training.minibatches_per_graph", d.minibatches_per_graph)?,
            epochs: kv.get_or("training.epochs", d.epochs)?,
            omega0: kv.get_or("training.omega0", d.omega0)?,
            omega1: kv.get_or("training.omega1", d.omega1)?,
            learning_rate: kv.get_or("training.learning_rate", d.learning_rate)?,
            k_minus: kv.get_or("sampling.k_minus", d.k_minus)?,
            entity_degree_cap: kv.get_parsed("transform.entity_degree_cap")?,
            seed: kv.get_or("training.seed", d.seed)?,
            arch: kv.get("training.arch").unwrap_or(&d.arch).to_string(),
            steps: kv.get_or("training.steps", d.steps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl SynthConfig {
    /// Reads `synth.*` keys plus one `relation.<name> =
    /// <cardinality>,<n_entities>,<exponent>` line per relation. Relations
    /// default to the built-in three when none are given.
    pub fn from_kv(kv: &KvConfig) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        let mut relations = Vec::new();
        for (key, value) in kv.values() {
            if let Some(name) = key.strip_prefix("relation.") {
                let parts: Vec<&str> = value.split(',').map(|p| p.trim()).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "relation `{name}`: expected `<cardinality>,<n_entities>,<exponent>`"
                    )));
                }
                let cardinality = Cardinality::parse(parts[0]).ok_or_else(|| {
                    Error::Config(format!("relation `{name}`: unknown cardinality `{}`", parts[0]))
                })?;
                let n_entities = parts[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("relation `{name}`: bad entity count")))?;
                let exponent = parts[2]
                    .parse()
                    .map_err(|_| Error::Config(format!("relation `{name}`: bad exponent")))?;
                relations.push(RelationSpec {
                    name: name.to_string(),
                    cardinality,
                    n_entities,
                    exponent,
                });
            }
        }
        if relations.is_empty() {
            relations = d.relations.clone();
        }
        let cfg = SynthConfig {
            label: kv.get("synth.label").unwrap_or(&d.label).to_string(),
            n_domains: kv.get_or("synth.n_domains", d.n_domains)?,
            relations,
            n_campaigns: kv.get_or("synth.n_campaigns", d.n_campaigns)?,
            campaign_size: kv.get_or("synth.campaign_size", d.campaign_size)?,
            p_in: kv.get_or("synth.p_in", d.p_in)?,
            p_bg: kv.get_or("synth.p_bg", d.p_bg)?,
            coverage: kv.get_or("synth.coverage", d.coverage)?,
            seed: kv.get_or("synth.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
