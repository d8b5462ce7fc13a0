//! Run manifest: a single JSON record tying a run's configuration,
//! seeds, and artifacts together by content hash. Two runs produced the
//! same results exactly when their manifests hash equal; timestamps are
//! excluded from that hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sha-256 of a byte slice, lowercase hex.
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Sha-256 of one file's contents.
pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path)?))
}

/// Content hash of a directory tree: every regular file's relative path
/// and bytes, folded in sorted path order so creation order and
/// filesystem iteration order never matter.
pub fn hash_dir(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<_> =
            fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(&path, base, out)?;
            } else {
                let rel = path
                    .strip_prefix(base)
                    .map_err(|_| Error::Data("directory walk escaped its base".into()))?
                    .to_string_lossy()
                    .replace('\\', "/");
                out.push((rel, fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (rel, bytes) in &files {
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    Ok(hex(&h.finalize()))
}

/// One artifact reference: where it lives and what its bytes hash to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub sha256: String,
}

/// The reproducibility record of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Wall-clock creation time (unix seconds); ignored by the hash.
    pub created_unix: u64,
    /// Full configuration snapshot, TOML text.
    pub config_toml: String,
    pub seeds: BTreeMap<String, u64>,
    pub datasets: BTreeMap<String, ArtifactRef>,
    pub checkpoints: BTreeMap<String, ArtifactRef>,
    pub artifacts: BTreeMap<String, ArtifactRef>,
}

impl RunManifest {
    pub fn new(config_toml: impl Into<String>) -> Self {
        let created_unix =
            SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            created_unix,
            config_toml: config_toml.into(),
            seeds: BTreeMap::new(),
            datasets: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn record_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    /// Records a dataset directory by its tree hash.
    pub fn record_dataset(&mut self, name: &str, dir: &Path) -> Result<()> {
        let sha256 = hash_dir(dir)?;
        self.datasets
            .insert(name.to_string(), ArtifactRef { path: dir.display().to_string(), sha256 });
        Ok(())
    }

    /// Records a checkpoint by the hash of both its files (manifest and
    /// payload share a base path).
    pub fn record_checkpoint(&mut self, name: &str, base: &Path) -> Result<()> {
        let mut h = Sha256::new();
        for ext in ["json", "bin"] {
            let p = base.with_extension(ext);
            h.update(fs::read(&p)?);
        }
        self.checkpoints.insert(
            name.to_string(),
            ArtifactRef { path: base.display().to_string(), sha256: hex(&h.finalize()) },
        );
        Ok(())
    }

    /// Records any single output file.
    pub fn record_file(&mut self, name: &str, path: &Path) -> Result<()> {
        let sha256 = hash_file(path)?;
        self.artifacts
            .insert(name.to_string(), ArtifactRef { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Hash over everything except timestamps. Map fields serialize in
    /// key order, so the hash is insertion-order independent.
    pub fn content_hash(&self) -> String {
        let mut copy = self.clone();
        copy.created_unix = 0;
        hash_bytes(serde_json::to_vec(&copy).expect("manifest serializes").as_slice())
    }

    /// Rewrites artifact paths relative to `root` where possible, so
    /// equal runs rooted in different directories hash equal. Paths
    /// outside `root` stay absolute.
    pub fn relativize(&mut self, root: &Path) {
        let all = self
            .datasets
            .values_mut()
            .chain(self.checkpoints.values_mut())
            .chain(self.artifacts.values_mut());
        for a in all {
            if let Ok(stripped) = Path::new(&a.path).strip_prefix(root) {
                a.path = stripped.to_string_lossy().replace('\\', "/");
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        Ok(fs::write(path, serde_json::to_vec_pretty(self)?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_hash_ignores_timestamps_only() {
        let mut a = RunManifest::new("run.seed = 1");
        let mut b = RunManifest::new("run.seed = 1");
        a.created_unix = 100;
        b.created_unix = 200;
        a.record_seed("train", 7);
        b.record_seed("train", 7);
        assert_eq!(a.content_hash(), b.content_hash());
        b.record_seed("eval", 8);
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn hash_matches_direct_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, b"abc").unwrap();
        // Known sha-256 of "abc".
        assert_eq!(
            hash_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn dir_hash_is_creation_order_independent_but_content_sensitive() {
        let d1 = tempfile::tempdir().unwrap();
        fs::write(d1.path().join("b.txt"), b"2").unwrap();
        fs::create_dir(d1.path().join("sub")).unwrap();
        fs::write(d1.path().join("sub/c.txt"), b"3").unwrap();
        fs::write(d1.path().join("a.txt"), b"1").unwrap();

        let d2 = tempfile::tempdir().unwrap();
        fs::write(d2.path().join("a.txt"), b"1").unwrap();
        fs::create_dir(d2.path().join("sub")).unwrap();
        fs::write(d2.path().join("sub/c.txt"), b"3").unwrap();
        fs::write(d2.path().join("b.txt"), b"2").unwrap();

        assert_eq!(hash_dir(d1.path()).unwrap(), hash_dir(d2.path()).unwrap());

        fs::write(d2.path().join("a.txt"), b"mutated").unwrap();
        assert_ne!(hash_dir(d1.path()).unwrap(), hash_dir(d2.path()).unwrap());
    }

    #[test]
    fn relativized_manifests_hash_equal_across_roots() {
        let mk = |marker: &str| {
            let dir = tempfile::tempdir().unwrap();
            let artifact = dir.path().join("out").join(format!("{marker}.csv"));
            fs::create_dir_all(artifact.parent().unwrap()).unwrap();
            fs::write(&artifact, b"same bytes").unwrap();
            let mut m = RunManifest::new("run.seed = 1");
            m.record_file("report", &artifact).unwrap();
            m.relativize(dir.path());
            (dir, m)
        };
        let (_d1, a) = mk("report");
        let (_d2, b) = mk("report");
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.artifacts["report"].path, "out/report.csv");
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("report.csv");
        fs::write(&artifact, b"method,budget\n").unwrap();

        let mut m = RunManifest::new("run.seed = 3");
        m.record_seed("train", 3);
        m.record_file("report", &artifact).unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.content_hash(), m.content_hash());
    }
}
