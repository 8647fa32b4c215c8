//! Removal of partial outputs when a command fails.

use std::path::{Path, PathBuf};

use iid_core::Error;

/// Paths written by a command. Unless [`Cleanup::keep`] is called, they are
/// deleted when the guard is dropped.
#[derive(Debug, Default)]
pub struct Cleanup {
    paths: Vec<PathBuf>,
    keep: bool,
}

impl Cleanup {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a file about to be written.
    pub fn file(&mut self, path: impl AsRef<Path>) -> PathBuf {
        let p = path.as_ref().to_path_buf();
        self.paths.push(p.clone());
        p
    }

    /// Create a directory, registering it for removal only when it did not
    /// exist before.
    pub fn dir(&mut self, path: impl AsRef<Path>) -> Result<PathBuf, Error> {
        let p = path.as_ref().to_path_buf();
        if !p.exists() {
            // Register the outermost missing ancestor so nested creations
            // are undone as well.
            let mut top = p.clone();
            while let Some(parent) = top.parent() {
                if parent.as_os_str().is_empty() || parent.exists() {
                    break;
                }
                top = parent.to_path_buf();
            }
            std::fs::create_dir_all(&p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            self.paths.push(top);
        }
        Ok(p)
    }

    /// Keep everything written so far.
    pub fn keep(mut self) {
        self.keep = true;
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for p in self.paths.iter().rev() {
            let res = if p.is_dir() {
                std::fs::remove_dir_all(p)
            } else if p.exists() {
                std::fs::remove_file(p)
            } else {
                Ok(())
            };
            if let Err(e) = res {
                log::warn!("could not remove partial output {}: {e}", p.display());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_new_paths_and_keeps_existing_dirs() {
        let root = tempfile::tempdir().unwrap();
        let existing = root.path().join("existing");
        std::fs::create_dir(&existing).unwrap();
        {
            let mut c = Cleanup::new();
            c.dir(&existing).unwrap();
            let f = c.file(existing.join("a.txt"));
            std::fs::write(&f, "x").unwrap();
            c.dir(root.path().join("new/nested")).unwrap();
        }
        assert!(existing.is_dir());
        assert!(!existing.join("a.txt").exists());
        assert!(!root.path().join("new").exists());
        let mut c = Cleanup::new();
        let f = c.file(existing.join("b.txt"));
        std::fs::write(&f, "y").unwrap();
        c.keep();
        assert!(existing.join("b.txt").exists());
    }
}
