//! Flat `key = value` config files, spliced into argv ahead of the flags so
//! that command-line flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`, got `{text}`")]
    Syntax {
        path: String,
        line: usize,
        text: String,
    },
    #[error("--config needs a path")]
    MissingPath,
}

/// Parses the file into `--key value` tokens. Blank lines and lines
/// starting with `#` are skipped; `true`/`false` toggle switches.
pub fn parse_config(text: &str, path: &str) -> Result<Vec<OsString>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            path: path.into(),
            line: n + 1,
            text: line.into(),
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            return Err(ConfigError::Syntax {
                path: path.into(),
                line: n + 1,
                text: line.into(),
            });
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Removes every `--config` occurrence and inserts the file's tokens right
/// after the subcommand name.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut path = None;
    let mut iter = args.into_iter();
    while let Some(a) = iter.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = Some(iter.next().ok_or(ConfigError::MissingPath)?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let shown = Path::new(&path).display().to_string();
    let text = fs::read_to_string(&path).map_err(|source| ConfigError::Read {
        path: shown.clone(),
        source,
    })?;
    let injected = parse_config(&text, &shown)?;
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(rest.len(), |i| i + 2);
    rest.splice(at..at, injected);
    Ok(rest)
}
