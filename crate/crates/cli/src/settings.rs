use std::path::{Path, PathBuf};

use abpem::objective::Mode;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every value a command can take from a flag or a config file. Unset fields
/// fall through to the next source: flags, then the config file, then the
/// command's built-in defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<PathBuf>>,
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($field:ident),*) => {
        Settings { $($field: $top.$field.or($base.$field)),* }
    };
}

impl Settings {
    /// Field-wise `self` over `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(
            self, base, preset, seed, corrupt, mode, k, lambda, lr, batch_size, epochs, n_train, n_test, split, out,
            checkpoint, dataset, runs
        )
    }

    /// Reads a TOML file, or a JSON file. A JSON run manifest is accepted
    /// too, in which case its `config` object is used.
    pub fn load(path: &Path) -> Result<Settings, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let bad = |msg: String| CliError::Config { path: path.to_path_buf(), msg };
        if path.extension().is_some_and(|e| e == "json") {
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            if let Some(config) = value.get_mut("config") {
                value = config.take();
            }
            serde_json::from_value(value).map_err(|e| bad(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }
}
