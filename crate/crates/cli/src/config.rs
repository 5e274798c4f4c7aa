//! Run configuration: one JSON file holding the scenario, adaptation and
//! protocol settings, with command-line overrides applied on top.

use std::path::Path;

use edaod::adapt::AdaptConfig;
use edaod::eval::Protocol;
use edaod::simenv::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub adapt: AdaptConfig,
    pub protocol: Protocol,
}

/// Flags shared by every command. Each one, when given, wins over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tau1: Option<f64>,
    /// Comma-separated merge thresholds
    #[arg(long, global = true, value_delimiter = ',')]
    pub tau2: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub protocol: Option<Protocol>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Failure::config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Reads the file (defaults when absent), applies overrides and
    /// validates every section.
    pub fn load(overrides: &Overrides) -> Result<Self, Failure> {
        let mut cfg = match &overrides.config {
            Some(path) => Self::from_json(&read_text(path)?)?,
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.scenario.seed = seed;
            cfg.adapt.seed = seed;
        }
        if let Some(t) = overrides.tau1 {
            cfg.adapt.tau1 = t;
        }
        if let Some(t) = &overrides.tau2 {
            cfg.adapt.tau2_list = t.clone();
        }
        if let Some(e) = overrides.epochs {
            cfg.adapt.epochs = e;
        }
        if let Some(p) = overrides.protocol {
            cfg.protocol = p;
        }
        cfg.scenario.validate()?;
        cfg.adapt.validate()?;
        Ok(cfg)
    }
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}
