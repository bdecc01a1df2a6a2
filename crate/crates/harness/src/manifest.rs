//! Output directory bookkeeping and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fracfp_core::spectral::Field;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantOutcome {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub index: usize,
    pub t: f64,
    pub csv: String,
    pub bin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NumericalFailure,
    AcceptanceFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub config: RunConfig,
    pub status: RunStatus,
    pub timings: Vec<StageTiming>,
    pub invariants: Vec<InvariantOutcome>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
    /// Evolution snapshots, used by `gauge` to reload a run.
    pub snapshots: Vec<SnapshotEntry>,
    /// Evolution step size, when the run evolved.
    pub h: Option<f64>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> std::io::Result<RunManifest> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn all_invariants_passed(&self) -> bool {
        self.invariants.iter().all(|i| i.passed)
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes artifacts under a run directory and assembles the manifest.
pub struct RunOutput {
    root: PathBuf,
    files: Vec<PathBuf>,
    pub manifest: RunManifest,
    stage_start: Option<(String, Instant)>,
}

impl RunOutput {
    pub fn create(root: &Path, command: &str, config: &RunConfig) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(RunOutput {
            root: root.to_path_buf(),
            files: Vec::new(),
            manifest: RunManifest {
                artifact_version: ARTIFACT_VERSION.into(),
                command: command.into(),
                config: config.clone(),
                status: RunStatus::Ok,
                timings: Vec::new(),
                invariants: Vec::new(),
                warnings: Vec::new(),
                errors: Vec::new(),
                snapshots: Vec::new(),
                h: None,
                files: Vec::new(),
            },
            stage_start: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn begin_stage(&mut self, name: &str) {
        self.end_stage();
        self.stage_start = Some((name.to_string(), Instant::now()));
    }

    pub fn end_stage(&mut self) {
        if let Some((stage, t0)) = self.stage_start.take() {
            self.manifest.timings.push(StageTiming { stage, seconds: t0.elapsed().as_secs_f64() });
        }
    }

    pub fn invariant(&mut self, name: &str, value: f64, threshold: f64, passed: bool) {
        self.manifest.invariants.push(InvariantOutcome { name: name.into(), passed, value, threshold });
    }

    fn register(&mut self, rel: &str) -> std::io::Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|p| p == Path::new(rel)) {
            self.files.push(PathBuf::from(rel));
        }
        Ok(path)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> std::io::Result<()> {
        let path = self.register(rel)?;
        fs::write(path, text)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        self.write_text(rel, &text)
    }

    /// CSV from a header and rows of numbers.
    pub fn write_table(&mut self, rel: &str, header: &[&str], rows: &[Vec<f64>]) -> std::io::Result<()> {
        let mut text = header.join(",");
        text.push('\n');
        for r in rows {
            let line: Vec<String> = r.iter().map(|v| format!("{v:.17e}")).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        self.write_text(rel, &text)
    }

    /// Writes `fields/<stem>.csv` and `fields/<stem>.bin`; returns their relative paths.
    pub fn write_field(&mut self, stem: &str, field: &Field) -> Result<(String, String), fracfp_core::io::IoError> {
        let csv = format!("fields/{stem}.csv");
        let bin = format!("fields/{stem}.bin");
        let p = self.register(&csv)?;
        fracfp_core::io::write_field_csv(field, &p)?;
        let p = self.register(&bin)?;
        fracfp_core::io::write_field_bin(field, &p)?;
        Ok((csv, bin))
    }

    /// Checksums every registered file and writes `manifest.json` via rename.
    pub fn finish(mut self) -> std::io::Result<RunManifest> {
        self.end_stage();
        let mut entries = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let path = self.root.join(rel);
            entries.push(FileEntry {
                path: rel.to_string_lossy().into_owned(),
                bytes: fs::metadata(&path)?.len(),
                sha256: sha256_file(&path)?,
            });
        }
        self.manifest.files = entries;
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let tmp = self.root.join(".manifest.json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.root.join("manifest.json"))?;
        Ok(self.manifest)
    }
}
