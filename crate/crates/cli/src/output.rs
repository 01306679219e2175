//! CSV artifacts and the run manifest.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Full-precision float cell (17 significant digits).
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Space-separated full-precision entries.
pub fn vec_cell(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(" ")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<OutputEntry>,
    pub created_unix: u64,
}

/// Collects the files written by one run.
pub struct Artifacts {
    dir: PathBuf,
    outputs: Vec<OutputEntry>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<(), Box<dyn std::error::Error>> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.record(name)?;
        Ok(())
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, name: &str) -> std::io::Result<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.outputs.push(OutputEntry {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn finish(
        self,
        subcommand: &str,
        config_path: &Path,
        config_bytes: &[u8],
        seed: u64,
        workers: usize,
    ) -> std::io::Result<()> {
        let versions = BTreeMap::from([
            ("condit".to_string(), condit::VERSION.to_string()),
            (
                "condit-cli".to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            ),
        ]);
        let manifest = Manifest {
            subcommand: subcommand.to_string(),
            config_path: config_path.display().to_string(),
            config_sha256: sha256_hex(config_bytes),
            seed,
            workers,
            versions,
            outputs: self.outputs,
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        std::fs::write(self.dir.join("manifest.json"), json + "\n")
    }
}
