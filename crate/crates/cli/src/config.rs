//! Option layering: built-in defaults, then a `key = value` config file,
//! then command-line flags. The fully resolved options are written beside
//! every run's outputs and can be passed back with `--config` to replay it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Bad flags, config files or parameter values; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub const RESOLVED_CONFIG: &str = "config.toml";

/// Reads a config file of the same shape as a command's flags.
pub fn read_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

pub fn write_resolved<T: Serialize>(dir: &Path, options: &T) -> Result<()> {
    let text = toml::to_string(options).context("serializing the resolved config")?;
    fs::write(dir.join(RESOLVED_CONFIG), text).with_context(|| format!("writing config into {}", dir.display()))
}

pub fn required(value: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.clone().ok_or_else(|| usage(format!("--{flag} is required")))
}

pub fn out_dir(value: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = required(value, "out")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Takes each listed field from the flags, falling back to the file.
macro_rules! layer {
    ($flags:expr, $file:expr; $($field:ident),+ $(,)?) => {
        $( if $flags.$field.is_none() { $flags.$field = $file.$field.take(); } )+
    };
}

/// Fills each listed field that is still unset with its default.
macro_rules! defaults {
    ($opts:expr; $($field:ident = $value:expr),+ $(,)?) => {
        $( if $opts.$field.is_none() { $opts.$field = Some($value); } )+
    };
}

pub(crate) use {defaults, layer};
