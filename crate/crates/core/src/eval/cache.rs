//! On-disk cache of transfer scores keyed by export contents and settings.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ot::SinkhornConfig;
use crate::otce::{Preprocess, SamplingConfig, TransferScore};

/// Environment variable naming the cache directory.
pub const CACHE_DIR_ENV: &str = "OTSEG_CACHE_DIR";

fn hash_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let read = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if read == 0 {
            return Ok(());
        }
        hasher.update(&buf[..read]);
    }
}

/// SHA-256 over an export's bytes (all three files for the directory layout).
pub fn export_digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        for name in ["features.npy", "labels.npy", "meta.json"] {
            hasher.update(name.as_bytes());
            hash_file(&mut hasher, &path.join(name))?;
        }
    } else {
        hash_file(&mut hasher, path)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone)]
pub struct ScoreCache {
    dir: PathBuf,
}

impl ScoreCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ScoreCache { dir: dir.into() }
    }

    /// Cache at `$OTSEG_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(ScoreCache::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Key for a pair of exports under the given settings. Execution mode is
    /// excluded since it never changes results.
    pub fn key(
        source: &Path,
        target: &Path,
        sampling: &SamplingConfig,
        solver: &SinkhornConfig,
        preprocess: Preprocess,
    ) -> Result<String> {
        let sampling = SamplingConfig {
            execution: Execution::Sequential,
            ..*sampling
        };
        let solver = SinkhornConfig {
            execution: Execution::Sequential,
            ..*solver
        };
        let settings = serde_json::json!({
            "sampling": sampling,
            "solver": solver,
            "preprocess": preprocess,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let mut hasher = Sha256::new();
        hasher.update(export_digest(source)?.as_bytes());
        hasher.update(b"|");
        hasher.update(export_digest(target)?.as_bytes());
        hasher.update(b"|");
        hasher.update(settings.to_string().as_bytes());
        Ok(hex::encode(hasher.finalize()))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<TransferScore> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(&self, key: &str, score: &TransferScore) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(key);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, score.to_json()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
