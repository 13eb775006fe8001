use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use orthocare::config::ExperimentConfig;
use orthocare::datagen::{generate, load_jsonl, save_jsonl, Dataset, Domain, DomainData, Split};
use orthocare::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bumped whenever any artifact layout changes.
pub const ARTIFACT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// One command's entry in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Seconds since the Unix epoch; the only field that varies between identical runs.
    pub created_unix: u64,
}

/// `manifest.json`: the artifact version, the commands that wrote into the directory,
/// and the SHA-256 of every other file in it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: u32,
    pub tool_version: String,
    pub runs: BTreeMap<String, RunRecord>,
    /// Relative path to SHA-256, manifests excluded.
    pub files: BTreeMap<String, String>,
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != MANIFEST) {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(key, sha256_file(&path)?);
        }
    }
    Ok(())
}

/// Adds or replaces `command`'s entry in `dir/manifest.json` and rehashes every file
/// under `dir`. An unreadable earlier manifest is replaced.
pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, seeds: Vec<u64>) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut runs = std::fs::read_to_string(&path)
        .ok()
        .and_then(|text| serde_json::from_str::<Manifest>(&text).ok())
        .filter(|m| m.artifact_version == ARTIFACT_VERSION)
        .map(|m| m.runs)
        .unwrap_or_default();
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    runs.insert(command.to_string(), RunRecord { config_hash: cfg.hash(), seeds, created_unix });
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files)?;
    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        runs,
        files,
    };
    write_json(&path, &manifest)
}

pub fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write(&dir.join("config.toml"), cfg.to_flat_text().as_bytes())
}

fn file_name(domain: Domain, split: Split) -> String {
    format!("{}_{}.jsonl", domain.name(), split.name())
}

const SPLITS: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

pub fn save_data(dir: &Path, data: &[&DomainData]) -> Result<()> {
    ensure_dir(dir)?;
    for d in data {
        for split in SPLITS {
            save_jsonl(d.split(split), &dir.join(file_name(d.domain, split)))?;
        }
    }
    Ok(())
}

fn load_domain(dir: &Path, domain: Domain, cfg: &ExperimentConfig) -> Result<DomainData> {
    let mut sets: Vec<Dataset> = Vec::new();
    for split in SPLITS {
        let path = dir.join(file_name(domain, split));
        let ds = load_jsonl(&path, cfg.data.n_codes, split)?;
        if let Some(bad) = ds.records.iter().find(|r| r.label.len() != cfg.data.n_labels) {
            return Err(Error::Input(format!(
                "{}: label length {} does not match data.n_labels = {}",
                path.display(),
                bad.label.len(),
                cfg.data.n_labels
            )));
        }
        sets.push(ds);
    }
    let test = sets.pop().expect("three splits");
    let valid = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(DomainData { domain, train, valid, test })
}

/// Source and target data from a gen-data directory, or generated from the config.
pub fn obtain_data(data_dir: Option<&Path>, cfg: &ExperimentConfig) -> Result<(DomainData, DomainData)> {
    match data_dir {
        Some(dir) => Ok((load_domain(dir, Domain::Source, cfg)?, load_domain(dir, Domain::Target, cfg)?)),
        None => Ok(generate(&cfg.data)?),
    }
}
