use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use stochint::json::{self, Ordered};

#[derive(Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub seed: Option<u64>,
    pub version: &'static str,
    /// SHA-256 of every input file, keyed by path as given.
    pub inputs: Ordered<String>,
    pub timestamp_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

pub fn digests(paths: &[&Path]) -> Result<Ordered<String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect::<Result<Vec<_>>>()
        .map(Ordered)
}

/// Output sink for one command: the primary result always goes to stdout;
/// with an output directory it is also written there beside its manifest.
pub struct Sink<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl<C: Serialize> Sink<'_, C> {
    fn manifest(&self) -> Result<String> {
        let inputs: Vec<&Path> = self.inputs.iter().map(|p| p.as_path()).collect();
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            inputs: digests(&inputs)?,
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        Ok(json::to_string(&m)?)
    }

    fn dir(&self) -> Result<Option<&Path>> {
        match &self.out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
                Ok(Some(d.as_path()))
            }
            None => Ok(None),
        }
    }

    /// Prints the primary JSON and writes `<stem>.json` plus `<stem>.manifest.json`.
    pub fn primary<T: Serialize>(&self, stem: &str, value: &T) -> Result<()> {
        let text = json::to_string(value)?;
        print!("{text}");
        if let Some(dir) = self.dir()? {
            write(&dir.join(format!("{stem}.json")), &text)?;
            write(&dir.join(format!("{stem}.manifest.json")), &self.manifest()?)?;
        }
        Ok(())
    }

    /// Auxiliary CSV, written only with an output directory.
    pub fn csv(&self, name: &str, text: &str) -> Result<()> {
        if let Some(dir) = self.dir()? {
            write(&dir.join(name), text)?;
        }
        Ok(())
    }

    /// Manifest for an output written to an explicit path.
    pub fn manifest_beside(&self, path: &Path) -> Result<()> {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
        write(&path.with_file_name(format!("{stem}.manifest.json")), &self.manifest()?)
    }
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Float in the same fixed 17-significant-digit form the JSON output uses.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}
