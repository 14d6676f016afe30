//! Effective run configuration: defaults, then the config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use dinet::config::RunConfig;
use dinet::train::TrainMode;

use crate::commands::CliError;
use crate::Common;

pub const CONFIG_ECHO: &str = "config.toml";

/// Parses a config file by extension: `.json` as JSON, anything else as TOML.
pub fn read_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Path(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Builds the effective configuration. The global seed always overrides the
/// per-section seeds.
pub fn effective(common: &Common, mode: Option<TrainMode>) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => read_config_file(path)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(mode) = mode {
        cfg.train.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.out_dir
        .clone()
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out_dir".into()))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| CliError::Path(format!("{}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Refused(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Path(format!("{}: {e}", dir.display())))
}

pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, text).map_err(|e| CliError::Path(format!("{}: {e}", path.display())))
}
