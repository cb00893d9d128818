//! JSON Lines manifests.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusError, SluLabels};
use crate::featpipe::Modality;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub modality: Modality,
    pub transcript: String,
    #[serde(default)]
    pub labels: SluLabels,
    /// Feature file path relative to the manifest directory; null for text.
    pub features: Option<String>,
}

impl ManifestEntry {
    /// Resolves the feature path against the manifest's directory.
    pub fn feature_path(&self, base_dir: &Path) -> Option<PathBuf> {
        self.features.as_ref().map(|f| base_dir.join(f))
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|err| CorpusError::Manifest {
            line: i + 1,
            msg: err.to_string(),
        })?;
        e.labels
            .validate(&e.id, &e.transcript)
            .map_err(|err| CorpusError::Manifest {
                line: i + 1,
                msg: err.to_string(),
            })?;
        out.push(e);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CorpusError> {
    let mut text = String::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| CorpusError::Manifest {
            line: 0,
            msg: err.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}
