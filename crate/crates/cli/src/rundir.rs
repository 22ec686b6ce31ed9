use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Output directory written under a temporary name and renamed into place
/// once every file is complete.
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    force: bool,
}

impl RunDir {
    /// Fails early if `target` exists and `force` is not set.
    pub fn create(target: &Path, force: bool) -> Result<Self> {
        if target.exists() && !force {
            bail!("{} already exists (use --force to replace it)", target.display());
        }
        let name = target
            .file_name()
            .with_context(|| format!("output path {} has no final component", target.display()))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
            force,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    pub fn write(&self, file: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let mut f = fs::File::create(self.path(file))?;
        f.write_all(contents.as_ref())?;
        Ok(())
    }

    pub fn write_json(&self, file: &str, value: &impl serde::Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(file, text)
    }

    pub fn write_jsonl<T: serde::Serialize>(&self, file: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(&r)?);
            text.push('\n');
        }
        self.write(file, text)
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            if !self.force {
                bail!("{} appeared while the run was in progress", self.target.display());
            }
            fs::remove_dir_all(&self.target)
                .with_context(|| format!("removing previous run {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving run into {}", self.target.display()))?;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
