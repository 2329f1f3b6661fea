//! Small shared helpers.

use std::path::Path;

use crate::error::{LrfError, Result};

/// Writes `bytes` to `path` atomically: the data lands in a temporary file
/// in the destination directory and is renamed into place, so readers never
/// observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .map_err(|e| LrfError::Io(e.error))?;
    Ok(())
}
