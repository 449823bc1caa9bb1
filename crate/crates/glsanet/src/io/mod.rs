//! Everything that crosses the filesystem boundary: PPM/PGM codecs, binary
//! checkpoints, dataset loading, and metric records. All writes are atomic
//! (temp file in the same directory, then rename).

pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod pnm;

use crate::error::Result;
use std::path::Path;

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
