use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

fn out_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {}", path.display(), e))
}

/// Writes `path` via a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut Vec<u8>) -> Result<(), String>,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(|e| out_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| out_err(path, "not a file path"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{}.tmp{}", name, std::process::id()));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(&buf)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(out_err(path, e));
    }
    Ok(())
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    write_atomic(path, |buf| {
        serde_json::to_writer_pretty(&mut *buf, value).map_err(|e| e.to_string())?;
        buf.push(b'\n');
        Ok(())
    })
}

pub fn write_csv(
    path: &Path,
    fill: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>,
) -> Result<(), CliError> {
    write_atomic(path, |buf| fill(buf).map_err(|e| e.to_string()))
}

/// Resolves `--out` for a single file: an existing directory gets `default_name` inside it.
pub fn file_target(out: &Path, default_name: &str) -> PathBuf {
    if out.is_dir() {
        out.join(default_name)
    } else {
        out.to_path_buf()
    }
}
