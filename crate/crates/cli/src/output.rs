use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::error::{CliError, Result};

/// Files a command will produce, held in memory until every one is ready.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Write everything under `dir`. Existing targets are refused unless
    /// `force`; each file is staged in `dir` and renamed into place, so a
    /// failure leaves no half-written file behind.
    pub fn commit(self, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
        let targets: Vec<PathBuf> = self.files.iter().map(|(n, _)| dir.join(n)).collect();
        if !force {
            if let Some(t) = targets.iter().find(|t| t.exists()) {
                return Err(CliError::Exists(t.clone()));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut staged = Vec::with_capacity(targets.len());
        for (_, bytes) in &self.files {
            let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
            tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
            tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
            staged.push(tmp);
        }
        for (tmp, target) in staged.into_iter().zip(&targets) {
            tmp.persist(target).map_err(|e| CliError::io(target, e.error))?;
        }
        Ok(targets)
    }
}
