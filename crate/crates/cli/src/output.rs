//! Tracked artifact writing: everything a command creates is removed again
//! if the command fails.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Default)]
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
    new_dirs: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self> {
        let mut out = Outputs {
            root: root.to_path_buf(),
            ..Default::default()
        };
        out.ensure_dir(root)?;
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        missing.reverse();
        self.new_dirs.extend(missing);
        Ok(())
    }

    /// Path of `rel` under the root, with parent directories created.
    pub fn path(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            self.ensure_dir(parent)?;
        }
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        Ok(p)
    }

    pub fn write_with<F>(&mut self, rel: impl AsRef<Path>, write: F) -> Result<PathBuf>
    where
        F: FnOnce(&Path) -> meritluck::Result<()>,
    {
        let p = self.path(rel)?;
        write(&p).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let p = self.path(rel)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_table(&mut self, rel: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let p = self.path(rel)?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&p)
            .with_context(|| format!("writing {}", p.display()))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(p)
    }

    /// Files written so far, relative to the root and sorted.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self
            .files
            .iter()
            .filter(|p| p.is_file())
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).to_path_buf())
            .collect();
        v.sort();
        v
    }

    /// Removes every file and directory this tracker created.
    pub fn discard(self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.new_dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}

/// Runs `body` with a fresh tracker under `root`; on error the partial
/// outputs are deleted.
pub fn tracked<T, F>(root: &Path, body: F) -> Result<T>
where
    F: FnOnce(&mut Outputs) -> Result<T>,
{
    let mut out = Outputs::new(root)?;
    match body(&mut out) {
        Ok(v) => Ok(v),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Plain decimal rendering that round-trips through `f64::from_str`.
pub fn num(x: f64) -> String {
    x.to_string()
}
