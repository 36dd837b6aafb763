//! Library half of the command-line crate: run configuration, detection
//! result files, and pipeline orchestration with stage timing. The
//! binary in `main.rs` is a thin argument-parsing layer over these.

pub mod config;
pub mod detfile;
pub mod pipeline;
pub mod ppm;

use std::path::Path;

use kernelspot::tensor::write_ptm;
use kernelspot::{Error, Result, TensorMap};

/// Writes through a sibling temp file plus rename, so readers never see
/// a half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("cannot write to {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.partial", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn atomic_write_ptm(t: &TensorMap, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_ptm(t, &mut buf)?;
    atomic_write(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_behind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
