//! Artifact file names, deterministic writers, and per-stage manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::StageError;

pub const MODEL: &str = "model.casm";
pub const CORPUS: &str = "corpus.jsonl";
pub const PROBE: &str = "probe.jsonl";
pub const CALIBRATION_IMAGES: &str = "calibration_images.jsonl";
pub const EVAL_IMAGES: &str = "eval_images.jsonl";
pub const ANNOTATIONS: &str = "annotations.json";
pub const VFV: &str = "vfv.json";
pub const MRV: &str = "mrv.json";
pub const EXTRACTION_REPORT: &str = "extraction_report.json";
pub const PRIOR: &str = "prior.json";
pub const CALIBRATION_REPORT: &str = "calibration_report.json";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const EVAL_REPORT_CSV: &str = "eval_report.csv";
pub const EVAL_CAPTIONS: &str = "eval_captions.jsonl";
pub const LATENCY_REPORT: &str = "latency_report.json";
pub const QA_REPORT: &str = "qa_report.json";

pub fn sweep_json(mode: &str) -> String {
    format!("sweep_{mode}.json")
}

pub fn sweep_csv(mode: &str) -> String {
    format!("sweep_{mode}.csv")
}

pub fn manifest_name(stage: &str) -> String {
    format!("manifest_{stage}.json")
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, StageError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    let text = read_input(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Read a file a stage depends on, reporting absence as a missing input.
pub fn read_input(path: &Path) -> Result<String, StageError> {
    if !path.is_file() {
        return Err(StageError::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

pub fn require(path: &Path) -> Result<(), StageError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(StageError::MissingInput(path.to_path_buf()))
    }
}

pub fn file_hash(path: &Path) -> Result<String, StageError> {
    require(path)?;
    Ok(ctxsteer::content_hash(&std::fs::read(path)?))
}

/// Hash of the configuration with the output location removed, so moving a
/// run does not change its manifests.
pub fn config_hash(config: &ExperimentConfig) -> Result<String, StageError> {
    let mut c = config.clone();
    c.output_dir = None;
    Ok(ctxsteer::content_hash(serde_json::to_string(&c)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    /// Artifact label → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects the files a stage read and wrote, then hashes them.
#[derive(Debug, Default)]
pub struct ManifestBuilder {
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

fn label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

impl ManifestBuilder {
    pub fn input(&mut self, path: &Path) {
        self.inputs.push((label(path), path.to_path_buf()));
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push((label(path), path.to_path_buf()));
    }

    pub fn write(self, stage: &str, config: &ExperimentConfig, out_dir: &Path) -> Result<Manifest, StageError> {
        let hash_all = |files: Vec<(String, PathBuf)>| -> Result<BTreeMap<String, String>, StageError> {
            files.into_iter().map(|(k, p)| Ok((k, file_hash(&p)?))).collect()
        };
        let manifest = Manifest {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_hash: config_hash(config)?,
            inputs: hash_all(self.inputs)?,
            outputs: hash_all(self.outputs)?,
        };
        write_json(&out_dir.join(manifest_name(stage)), &manifest)?;
        Ok(manifest)
    }
}
