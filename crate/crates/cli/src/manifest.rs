//! Run manifest: content hashes of the configuration and every produced
//! artifact, so completed pipeline stages can be skipped on re-runs and
//! tampered files are detected instead of silently reused.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use hyrom::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Artifact name to (relative path, sha256).
    pub artifacts: BTreeMap<String, (PathBuf, String)>,
    /// Wall-clock seconds per completed stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_text: &str) -> Self {
        RunManifest {
            config_hash: sha256_hex(config_text.as_bytes()),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Hash a just-written artifact and register it under `name`.
    pub fn record(&mut self, name: &str, dir: &Path, rel: &str) -> Result<()> {
        let hash = sha256_file(&dir.join(rel))?;
        self.artifacts.insert(name.to_string(), (PathBuf::from(rel), hash));
        Ok(())
    }

    /// True when the named artifact exists on disk with a matching hash.
    pub fn is_valid(&self, name: &str, dir: &Path) -> bool {
        match self.artifacts.get(name) {
            Some((rel, hash)) => sha256_file(&dir.join(rel)).is_ok_and(|h| h == *hash),
            None => false,
        }
    }

    pub fn artifact_path(&self, name: &str, dir: &Path) -> Option<PathBuf> {
        self.artifacts.get(name).map(|(rel, _)| dir.join(rel))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "config_hash={}", self.config_hash).unwrap();
        writeln!(text, "tool_version={}", self.tool_version).unwrap();
        for (name, (rel, hash)) in &self.artifacts {
            writeln!(text, "artifact={name}:{}:{hash}", rel.display()).unwrap();
        }
        for (stage, secs) in &self.timings {
            writeln!(text, "timing={stage}:{secs}").unwrap();
        }
        std::fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
        let mut m = RunManifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {}: missing '='", i + 1)))?;
            match key {
                "config_hash" => m.config_hash = value.to_string(),
                "tool_version" => m.tool_version = value.to_string(),
                "artifact" => {
                    let mut parts = value.splitn(3, ':');
                    let (name, rel, hash) = (parts.next(), parts.next(), parts.next());
                    match (name, rel, hash) {
                        (Some(n), Some(r), Some(h)) => {
                            m.artifacts
                                .insert(n.to_string(), (PathBuf::from(r), h.to_string()));
                        }
                        _ => {
                            return Err(Error::Format(format!(
                                "manifest line {}: malformed artifact entry",
                                i + 1
                            )))
                        }
                    }
                }
                "timing" => {
                    let (stage, secs) = value.split_once(':').ok_or_else(|| {
                        Error::Format(format!("manifest line {}: malformed timing entry", i + 1))
                    })?;
                    let secs: f64 = secs.parse().map_err(|_| {
                        Error::Format(format!("manifest line {}: bad timing value", i + 1))
                    })?;
                    m.timings.insert(stage.to_string(), secs);
                }
                other => {
                    return Err(Error::Format(format!(
                        "manifest line {}: unknown key {other}",
                        i + 1
                    )))
                }
            }
        }
        Ok(m)
    }

    /// Load the manifest from `dir` when present and bound to the same
    /// configuration; otherwise start fresh.
    pub fn load_or_new(dir: &Path, config_text: &str) -> Self {
        let fresh = RunManifest::new(config_text);
        match RunManifest::load(dir) {
            Ok(m) if m.config_hash == fresh.config_hash => m,
            _ => fresh,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("hyrman-{}-{tag}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrips_through_disk() {
        let dir = tmp_dir("rt");
        std::fs::write(dir.join("a.bin"), b"payload").unwrap();
        let mut m = RunManifest::new("cfg");
        m.record("basis", &dir, "a.bin").unwrap();
        m.timings.insert("pod".into(), 1.5);
        m.save(&dir).unwrap();
        let back = RunManifest::load(&dir).unwrap();
        assert_eq!(back.config_hash, m.config_hash);
        assert_eq!(back.artifacts, m.artifacts);
        assert_eq!(back.timings, m.timings);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn tampering_invalidates_the_artifact() {
        let dir = tmp_dir("tamper");
        std::fs::write(dir.join("a.bin"), b"payload").unwrap();
        let mut m = RunManifest::new("cfg");
        m.record("basis", &dir, "a.bin").unwrap();
        assert!(m.is_valid("basis", &dir));
        std::fs::write(dir.join("a.bin"), b"payload!").unwrap();
        assert!(!m.is_valid("basis", &dir));
        std::fs::remove_file(dir.join("a.bin")).unwrap();
        assert!(!m.is_valid("basis", &dir));
        assert!(!m.is_valid("missing", &dir));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn config_change_starts_a_fresh_manifest() {
        let dir = tmp_dir("fresh");
        std::fs::write(dir.join("a.bin"), b"x").unwrap();
        let mut m = RunManifest::new("cfg-a");
        m.record("basis", &dir, "a.bin").unwrap();
        m.save(&dir).unwrap();
        let same = RunManifest::load_or_new(&dir, "cfg-a");
        assert!(same.is_valid("basis", &dir));
        let other = RunManifest::load_or_new(&dir, "cfg-b");
        assert!(other.artifacts.is_empty());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn known_digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
