use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    projtune::data::write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).expect("outputs serialize");
    s.push('\n');
    write_text(path, &s)
}

pub fn require(path: &Path) -> CliResult<PathBuf> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        });
    }
    Ok(path.to_path_buf())
}
