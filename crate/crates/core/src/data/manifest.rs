use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{load_volume, Label, ScanMeta, Volume};
use crate::error::{Error, Result};

/// One row of a cohort manifest CSV
/// (`subject_id,scan_id,timepoint,label,path`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub scan_id: String,
    pub timepoint: u32,
    pub label: Label,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

impl ManifestRow {
    pub fn meta(&self) -> ScanMeta {
        ScanMeta::new(&self.subject_id, &self.scan_id, self.timepoint, self.label)
    }
}

#[derive(Deserialize)]
struct RawRow {
    subject_id: String,
    scan_id: String,
    timepoint: u32,
    label: String,
    path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    if !path.is_file() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "manifest not found".into(),
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.deserialize::<RawRow>() {
        let raw = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let resolved = if raw.path.is_absolute() {
            raw.path
        } else {
            base.join(raw.path)
        };
        rows.push(ManifestRow {
            subject_id: raw.subject_id,
            scan_id: raw.scan_id,
            timepoint: raw.timepoint,
            label: raw.label.parse()?,
            path: resolved,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyData(format!(
            "manifest {} has no rows",
            path.display()
        )));
    }
    Ok(rows)
}

/// Writes rows with paths made relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "scan_id", "timepoint", "label", "path"])?;
    for r in rows {
        let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
        w.write_record([
            r.subject_id.as_str(),
            r.scan_id.as_str(),
            &r.timepoint.to_string(),
            &r.label.to_string(),
            &rel.to_string_lossy(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest_volumes(path: &Path) -> Result<Vec<Volume>> {
    read_manifest(path)?
        .iter()
        .map(|row| load_volume(&row.path, row.meta()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        let rows = vec![ManifestRow {
            subject_id: "s1".into(),
            scan_id: "s1_t0".into(),
            timepoint: 0,
            label: Label::Anomalous,
            path: dir.path().join("vols/s1_t0.nii"),
        }];
        write_manifest(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("vols/s1_t0.nii"));
        assert!(!text.contains(dir.path().to_str().unwrap()));
        assert_eq!(read_manifest(&p).unwrap(), rows);
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let err = read_manifest(Path::new("/nonexistent/manifest.csv")).unwrap_err();
        assert_eq!(err.code(), "FORMAT_ERROR");
    }
}
