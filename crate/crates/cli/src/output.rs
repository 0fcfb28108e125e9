use std::fs;
use std::io::Write;
use std::path::Path;

use negadapt::evalkit::Sidecar;

use crate::error::CliError;

/// Writes `bytes` to a temporary file next to `path`, then renames it over.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Writes a CSV table and its `.json` sidecar.
pub fn write_csv(path: &Path, csv: &str, kind: &str, config_bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, csv.as_bytes())?;
    let sidecar = path.with_extension("csv.json");
    write_atomic(&sidecar, Sidecar::new(kind, config_bytes).to_json().as_bytes())
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
