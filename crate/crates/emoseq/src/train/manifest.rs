//! Clip manifest: CSV with header `clip_id,speaker_id,label,audio_path,video_path`.
//! Labels are class indices 0-5 or the canonical emotion names
//! (case-insensitive). Relative paths resolve against the manifest's
//! directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use super::TrainError;
use crate::parse_label;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub speaker_id: String,
    pub label: usize,
    pub audio_path: PathBuf,
    pub video_path: PathBuf,
}

pub const MANIFEST_HEADER: [&str; 5] = ["clip_id", "speaker_id", "label", "audio_path", "video_path"];

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, TrainError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| TrainError::Manifest(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| TrainError::Manifest(format!("{}: {e}", path.display())))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != MANIFEST_HEADER {
        return Err(TrainError::Manifest(format!(
            "{}: expected header {:?}, found {:?}",
            path.display(),
            MANIFEST_HEADER.join(","),
            got.join(",")
        )));
    }

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| TrainError::Manifest(format!("row {}: {e}", i + 2)))?;
        if record.len() != 5 {
            return Err(TrainError::Manifest(format!("row {}: expected 5 fields", i + 2)));
        }
        let clip_id = record[0].to_string();
        if clip_id.is_empty() || record[1].is_empty() || record[3].is_empty() || record[4].is_empty() {
            return Err(TrainError::Manifest(format!("row {}: empty field", i + 2)));
        }
        if !seen.insert(clip_id.clone()) {
            return Err(TrainError::Manifest(format!("duplicate clip_id {clip_id:?}")));
        }
        let label = parse_label(&record[2])
            .ok_or_else(|| TrainError::Manifest(format!("row {}: bad label {:?}", i + 2, &record[2])))?;
        entries.push(ManifestEntry {
            clip_id,
            speaker_id: record[1].to_string(),
            label,
            audio_path: resolve(base, &record[3]),
            video_path: resolve(base, &record[4]),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), TrainError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| TrainError::Manifest(format!("{}: {e}", path.display())))?;
    w.write_record(MANIFEST_HEADER)
        .map_err(|e| TrainError::Manifest(e.to_string()))?;
    for entry in entries {
        let audio = relative_to(base, &entry.audio_path);
        let video = relative_to(base, &entry.video_path);
        w.write_record([
            entry.clip_id.as_str(),
            entry.speaker_id.as_str(),
            &entry.label.to_string(),
            &audio,
            &video,
        ])
        .map_err(|e| TrainError::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::Manifest(e.to_string()))?;
    Ok(())
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn relative_to(base: &Path, path: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_label_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            "clip_id,speaker_id,label,audio_path,video_path\n\
             c1,s1,0,audio/c1.wav,video/c1.emsf\n\
             c2,s2,Happy,audio/c2.wav,video/c2.emsf\n\
             c3,s1,FEAR,audio/c3.wav,video/c3.emsf\n",
        )
        .unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].label, 0);
        assert_eq!(entries[1].label, 1);
        assert_eq!(entries[2].label, 5);
        assert_eq!(entries[0].audio_path, dir.path().join("audio/c1.wav"));

        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);
    }

    #[test]
    fn duplicate_clip_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            "clip_id,speaker_id,label,audio_path,video_path\nc1,s1,0,a,v\nc1,s2,1,a,v\n",
        )
        .unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn bad_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(
            &path,
            "clip_id,speaker_id,label,audio_path,video_path\nc1,s1,boredom,a,v\n",
        )
        .unwrap();
        assert!(read_manifest(&path).is_err());
        std::fs::write(
            &path,
            "clip_id,speaker_id,label,audio_path,video_path\nc1,s1,6,a,v\n",
        )
        .unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "id,speaker,label,audio,video\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
