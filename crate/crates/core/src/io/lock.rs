//! Exclusive ownership of a run directory through a lock file.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const LOCK_FILE: &str = ".scda.lock";

/// Held for as long as a process writes into a run directory. The lock file
/// is removed on drop.
#[derive(Debug)]
pub struct RunDirLock {
    path: PathBuf,
}

impl RunDirLock {
    /// Creates `dir` if needed and takes the lock, failing with
    /// [`Error::Locked`] if another process holds it.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
