//! Outputs are built in a sibling temp location and renamed into place, so a
//! failed run never leaves a half-written directory behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use patchground::Result;
use tempfile::TempDir;

pub struct StagedDir {
    target: PathBuf,
    tmp: TempDir,
}

fn parent_of(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    Ok(parent)
}

impl StagedDir {
    pub fn new(target: &Path) -> Result<Self> {
        let tmp = tempfile::Builder::new()
            .prefix(".patchground-")
            .tempdir_in(parent_of(target)?)?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
        })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    /// Moves the staged tree to the target, replacing any previous output.
    pub fn commit(self) -> Result<PathBuf> {
        let staged = self.tmp.keep();
        if self.target.exists() {
            let old = staged.with_extension("old");
            std::fs::rename(&self.target, &old)?;
            std::fs::rename(&staged, &self.target)?;
            std::fs::remove_dir_all(&old)?;
        } else {
            std::fs::rename(&staged, &self.target)?;
        }
        Ok(self.target)
    }
}

pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::Builder::new()
        .prefix(".patchground-")
        .tempfile_in(parent_of(path)?)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
