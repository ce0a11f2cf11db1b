use std::path::Path;

use serde::Deserialize;
use skillforge::build::BuildConfig;
use skillforge::runtime::NluConfig;

use crate::{usage, CliResult};

/// Contents of `--config`. Top-level keys are build settings
/// (`epochs`, `seed`, `samples_per_intent`, ...); runtime settings live in
/// an `[nlu]` table.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    #[serde(flatten)]
    pub build: BuildConfig,
    pub nlu: NluConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
            .map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, String> {
        if json {
            serde_json::from_str(text).map_err(|e| e.to_string())
        } else {
            toml::from_str(text).map_err(|e| e.to_string())
        }
    }
}
