use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One measured source-to-target transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub target_id: String,
    pub source_export_path: PathBuf,
    pub target_export_path: PathBuf,
    /// Measured accuracy after finetuning, in `[0, 1]`.
    pub transfer_accuracy: f64,
}

fn default_metric() -> String {
    "unspecified".into()
}

/// Records for a correlation study. `metric` names what `transfer_accuracy`
/// measures (pixel accuracy, mIoU, ...); it is carried through uninterpreted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    #[serde(default)]
    pub metadata: serde_json::Value,
    #[serde(default = "default_metric")]
    pub metric: String,
    pub records: Vec<ManifestRecord>,
}

impl EvalManifest {
    pub fn new(metric: impl Into<String>, records: Vec<ManifestRecord>) -> Self {
        EvalManifest {
            metadata: serde_json::Value::Null,
            metric: metric.into(),
            records,
        }
    }

    /// Reads a manifest; relative export paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: EvalManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut manifest.records {
            if r.source_export_path.is_relative() {
                r.source_export_path = base.join(&r.source_export_path);
            }
            if r.target_export_path.is_relative() {
                r.target_export_path = base.join(&r.target_export_path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("manifest", e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Validation("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert((&r.source_id, &r.target_id)) {
                return Err(Error::Validation(format!(
                    "duplicate record for source {:?} -> target {:?}",
                    r.source_id, r.target_id
                )));
            }
            if !(r.transfer_accuracy.is_finite() && (0.0..=1.0).contains(&r.transfer_accuracy)) {
                return Err(Error::Validation(format!(
                    "accuracy {} for {:?} -> {:?} is not in [0, 1]",
                    r.transfer_accuracy, r.source_id, r.target_id
                )));
            }
        }
        Ok(())
    }
}
