//! Run manifests and content digests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Digest of a serializable value's JSON encoding.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("value serializes"))
}

/// Digest of a file, or of a directory tree (sorted relative paths and file
/// contents; hidden entries skipped).
pub fn path_digest(path: &Path) -> io::Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path)?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(Sha256::digest(fs::read(path.join(&rel))?));
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_digest: String,
    pub effective_config: serde_json::Value,
    pub input_digests: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// Run-specific choices worth recording next to the outputs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: json_digest(config),
            effective_config: serde_json::to_value(config).expect("config serializes"),
            input_digests: BTreeMap::new(),
            seeds,
            started_at: Utc::now(),
            finished_at: None,
            outputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> io::Result<()> {
        self.input_digests
            .insert(name.to_string(), path_digest(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, name: &str, path: impl Into<PathBuf>) {
        self.outputs.insert(name.to_string(), path.into());
    }

    pub fn add_note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    /// Stamps the finish time and writes the manifest. Fails if a recorded
    /// output is missing.
    pub fn finish(&mut self, path: &Path) -> io::Result<()> {
        if let Some((name, missing)) = self.outputs.iter().find(|(_, p)| !p.exists()) {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("output {name} missing at {}", missing.display()),
            ));
        }
        self.finished_at = Some(Utc::now());
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn directory_digest_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x"), "1").unwrap();
        let d1 = path_digest(dir.path()).unwrap();
        assert_eq!(d1, path_digest(dir.path()).unwrap());
        fs::write(dir.path().join("a/x"), "2").unwrap();
        assert_ne!(d1, path_digest(dir.path()).unwrap());
    }

    #[test]
    fn finish_requires_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("scan", &serde_json::json!({"k": 1}), vec![0]);
        m.add_output("missing", dir.path().join("nope"));
        assert!(m.finish(&dir.path().join("m.json")).is_err());
        m.outputs.clear();
        m.add_output("self", dir.path());
        m.finish(&dir.path().join("m.json")).unwrap();
        let back: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(back.config_digest, m.config_digest);
        assert!(back.finished_at.is_some());
    }
}
