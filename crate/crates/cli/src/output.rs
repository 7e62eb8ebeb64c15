//! All-or-nothing output: files are staged in a hidden directory inside the
//! output directory and moved into place only after the whole run succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    entries: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        fs::create_dir_all(target).with_context(|| format!("creating {}", target.display()))?;
        let dir = target.join(format!(".staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Staging {
            target: target.to_path_buf(),
            dir,
            entries: Vec::new(),
            committed: false,
        })
    }

    /// Path inside the staging area for a top-level entry `name`.
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.entries.iter().any(|e| e == name) {
            self.entries.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    /// Moves every staged entry into the output directory, replacing older
    /// files of the same name.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for name in &self.entries {
            let from = self.dir.join(name);
            let to = self.target.join(name);
            if to.is_dir() {
                fs::remove_dir_all(&to)?;
            }
            fs::rename(&from, &to).with_context(|| format!("moving {} into place", to.display()))?;
            written.push(to);
        }
        self.committed = true;
        fs::remove_dir_all(&self.dir)?;
        Ok(written)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
