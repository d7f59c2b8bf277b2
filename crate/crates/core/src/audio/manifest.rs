//! CSV dataset manifest: `audio_path,label,subject_id[,split_hint]`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("row {row}: label {value:?} is not 0 (control) or 1 (dementia)")]
    BadLabel { row: usize, value: String },
    #[error("manifest header lacks column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: duplicate audio path {path}")]
    DuplicatePath { row: usize, path: PathBuf },
    #[error("manifest parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    /// 0 = control, 1 = dementia.
    pub label: u8,
    pub subject_id: String,
    pub split_hint: Option<String>,
}

/// Parses a manifest. Rows keep file order; relative paths are resolved
/// against the manifest's directory and `#` lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ManifestError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let path_col = col("audio_path").ok_or(ManifestError::MissingColumn("audio_path"))?;
    let label_col = col("label").ok_or(ManifestError::MissingColumn("label"))?;
    let subject_col = col("subject_id").ok_or(ManifestError::MissingColumn("subject_id"))?;
    let hint_col = col("split_hint");

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let raw_path = Path::new(&record[path_col]);
        let audio_path = if raw_path.is_absolute() { raw_path.to_path_buf() } else { base.join(raw_path) };
        let label = match &record[label_col] {
            "0" => 0,
            "1" => 1,
            other => return Err(ManifestError::BadLabel { row, value: other.to_string() }),
        };
        if !seen.insert(audio_path.clone()) {
            return Err(ManifestError::DuplicatePath { row, path: audio_path });
        }
        let split_hint = hint_col.map(|c| record.get(c).unwrap_or("").to_string()).filter(|s| !s.is_empty());
        entries.push(ManifestEntry { audio_path, label, subject_id: record[subject_col].to_string(), split_hint });
    }
    Ok(entries)
}

/// Writes entries with paths relative to the manifest directory where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["audio_path", "label", "subject_id", "split_hint"])?;
    for e in entries {
        let rel = e.audio_path.strip_prefix(base).unwrap_or(&e.audio_path);
        w.write_record([rel.to_string_lossy().as_ref(), &e.label.to_string(), &e.subject_id, e.split_hint.as_deref().unwrap_or("")])?;
    }
    w.flush()?;
    Ok(())
}
