//! Line-delimited JSON helpers shared by every stage.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, UaeError};

pub fn read_to_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(UaeError::MissingInput(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| UaeError::io(path, e))
}

/// Parses one record per line. Blank lines are skipped; any other line that
/// fails to parse aborts the whole read with its 1-based line number.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_to_string(path)?;
    parse_records(&text, &path.display().to_string())
}

pub fn parse_records<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| UaeError::MalformedLine {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| UaeError::io(path, e))
}

/// Writes through a sibling temp file and renames, so readers never observe a
/// half-written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| UaeError::io(parent, e))?;
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!("{name}.tmp"));
    let mut f = std::fs::File::create(&tmp).map_err(|e| UaeError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| UaeError::io(&tmp, e))?;
    f.sync_all().map_err(|e| UaeError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| UaeError::io(path, e))
}
