use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One utterance record of a JSON Lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Relative paths are resolved against the manifest's directory on load.
    pub audio_path: PathBuf,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

impl ManifestEntry {
    pub fn tokens(&self) -> Vec<String> {
        self.transcript
            .as_deref()
            .map(|t| t.split_whitespace().map(str::to_owned).collect())
            .unwrap_or_default()
    }
}

/// Reads a manifest, one JSON object per line. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let mut entry: ManifestEntry =
            serde_json::from_str(line).map_err(|e| err(format!("malformed entry: {e}")))?;
        if entry.utt_id.is_empty() {
            return Err(err("empty utt_id".into()));
        }
        if !(entry.duration_s > 0.0 && entry.duration_s.is_finite()) {
            return Err(err(format!("duration_s must be > 0, got {}", entry.duration_s)));
        }
        if !seen.insert(entry.utt_id.clone()) {
            return Err(err(format!("duplicate utt_id `{}`", entry.utt_id)));
        }
        if entry.audio_path.is_relative() {
            entry.audio_path = base.join(&entry.audio_path);
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Serializes entries as JSON Lines (paths written as given).
pub fn manifest_to_string(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    crate::tensor_file::write_atomic(path, manifest_to_string(entries)?.as_bytes())
}
