//! Per-stage manifests, content hashes and the working-directory lock.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use dismob_core::io::write_atomic;
use dismob_core::nn::checkpoint::VERSION as CHECKPOINT_VERSION;
use dismob_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Record of one completed stage. Paths are relative to the output directory
/// and nothing time-dependent is stored, so identical runs write identical
/// manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub args: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("dismob".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format".to_string(), CHECKPOINT_VERSION.to_string()),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// Everything a stage needs to decide whether it can be skipped.
pub struct Stage<'a> {
    pub name: String,
    pub args: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub root: &'a Path,
    pub config_sha256: &'a str,
    pub seed: u64,
}

impl Stage<'_> {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", self.name))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    fn hashes(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((self.rel(p), file_hash(p)?))).collect()
    }

    fn missing_inputs(&self) -> Result<()> {
        if let Some(p) = self.inputs.iter().find(|p| !p.exists()) {
            return Err(Error::Precondition(format!(
                "missing artifact {} needed by `{}`",
                p.display(),
                self.name
            )));
        }
        Ok(())
    }

    /// True when a manifest exists for the same config, arguments and input
    /// hashes, and every recorded output is still present and unchanged.
    fn up_to_date(&self) -> Result<bool> {
        let Ok(text) = fs::read_to_string(self.manifest_path()) else {
            return Ok(false);
        };
        let Ok(old) = serde_json::from_str::<Manifest>(&text) else {
            return Ok(false);
        };
        if old.config_sha256 != self.config_sha256 || old.args != self.args || old.versions != versions() {
            return Ok(false);
        }
        if old.inputs != self.hashes(&self.inputs)? {
            return Ok(false);
        }
        let want: BTreeSet<String> = self.outputs.iter().map(|p| self.rel(p)).collect();
        if old.outputs.keys().ne(want.iter()) {
            return Ok(false);
        }
        for p in &self.outputs {
            if !p.exists() || file_hash(p)? != old.outputs[&self.rel(p)] {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Runs `work` unless the stage is up to date, then records the manifest.
    pub fn run(&self, work: impl FnOnce() -> Result<()>) -> Result<Outcome> {
        self.missing_inputs()?;
        if self.up_to_date()? {
            println!("{}: up to date", self.name);
            return Ok(Outcome::UpToDate);
        }
        work()?;
        let m = Manifest {
            stage: self.name.clone(),
            config_sha256: self.config_sha256.to_string(),
            seed: self.seed,
            versions: versions(),
            args: self.args.clone(),
            inputs: self.hashes(&self.inputs)?,
            outputs: self.hashes(&self.outputs)?,
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        write_atomic(&self.manifest_path(), text.as_bytes())?;
        println!("{}: done", self.name);
        Ok(Outcome::Ran)
    }
}

/// Exclusive lock on an output directory, released on drop.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(dir: &Path) -> Result<Lock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".dismob.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Precondition(format!(
                "{} exists: another command is using this directory (remove the file if no command is running)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
