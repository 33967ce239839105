use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
const NAME_PREFIX_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub file: String,
    pub len: u64,
    /// Version of the generator that first produced this seed.
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Added(String),
    Duplicate(String),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seeds: BTreeMap<String, SeedEntry>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Deduplicated on-disk seed set. One file per seed, named by a hash prefix,
/// plus a JSON manifest mapping full hashes to their producer version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedCorpus {
    dir: PathBuf,
    entries: BTreeMap<String, SeedEntry>,
}

impl SeedCorpus {
    /// Open (or create) a corpus directory, loading any existing manifest.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let manifest = dir.join(MANIFEST_FILE);
        let entries = if manifest.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&manifest)?)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", manifest.display())))?;
            m.seeds
        } else {
            BTreeMap::new()
        };
        Ok(Self { dir, entries })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> &BTreeMap<String, SeedEntry> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.entries.contains_key(hash)
    }

    pub fn path_of(&self, hash: &str) -> Option<PathBuf> {
        self.entries.get(hash).map(|e| self.dir.join(&e.file))
    }

    /// Seed paths in hash order.
    pub fn paths(&self) -> Vec<PathBuf> {
        self.entries.values().map(|e| self.dir.join(&e.file)).collect()
    }

    pub fn read(&self, hash: &str) -> io::Result<Vec<u8>> {
        let path = self
            .path_of(hash)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no seed {hash}")))?;
        fs::read(path)
    }

    pub fn insert(&mut self, bytes: &[u8], version: u32) -> io::Result<InsertOutcome> {
        let hash = content_hash(bytes);
        if self.entries.contains_key(&hash) {
            return Ok(InsertOutcome::Duplicate(hash));
        }
        let mut file = hash[..NAME_PREFIX_LEN].to_owned();
        if self.entries.values().any(|e| e.file == file) {
            file = hash.clone();
        }
        fs::write(self.dir.join(&file), bytes)?;
        self.entries.insert(hash.clone(), SeedEntry { file, len: bytes.len() as u64, version });
        Ok(InsertOutcome::Added(hash))
    }

    /// Persist the manifest atomically.
    pub fn flush(&self) -> io::Result<()> {
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let body = serde_json::to_vec_pretty(&Manifest { seeds: self.entries.clone() })?;
        fs::write(&tmp, body)?;
        fs::rename(tmp, self.dir.join(MANIFEST_FILE))
    }

    /// Read-only view of a subset of this corpus.
    pub fn subset<'a>(&self, hashes: impl IntoIterator<Item = &'a String>) -> SeedCorpus {
        let entries = hashes
            .into_iter()
            .filter_map(|h| self.entries.get(h).map(|e| (h.clone(), e.clone())))
            .collect();
        SeedCorpus { dir: self.dir.clone(), entries }
    }
}
