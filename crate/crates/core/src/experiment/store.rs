//! Append-only artifact store keyed by content hashes.
//!
//! Each artifact lives in `<root>/<stage>/<key>/`. A directory is built
//! under a temporary name and renamed into place once complete, so readers
//! never see partial artifacts. Values are always reloaded from disk, which
//! makes fresh and cached runs indistinguishable.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

use super::formats::FORMAT_VERSION;

const COMPLETE: &str = ".complete";

#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

/// Content key of a stage: hash of the stage name, format version and inputs.
pub fn content_key(stage: &str, inputs: &impl Serialize) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(FORMAT_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(inputs)?);
    Ok(hex::encode(&h.finalize()[..16]))
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, stage: &str, key: &str) -> PathBuf {
        self.root.join(stage).join(key)
    }

    pub fn contains(&self, stage: &str, key: &str) -> bool {
        self.dir(stage, key).join(COMPLETE).exists()
    }

    /// Loads the artifact, building it first with `make` if it is missing.
    pub fn fetch<T>(
        &self,
        stage: &str,
        key: &str,
        make: impl FnOnce(&Path) -> Result<()>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let dir = self.dir(stage, key);
        if !dir.join(COMPLETE).exists() {
            let tmp = self
                .root
                .join(stage)
                .join(format!(".tmp-{key}-{}", std::process::id()));
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp)?;
            }
            std::fs::create_dir_all(&tmp)?;
            make(&tmp)?;
            std::fs::write(tmp.join(COMPLETE), b"")?;
            if dir.exists() {
                // Either another writer won the race or an incomplete
                // directory was left behind by a crash.
                if dir.join(COMPLETE).exists() {
                    std::fs::remove_dir_all(&tmp)?;
                } else {
                    std::fs::remove_dir_all(&dir)?;
                    std::fs::rename(&tmp, &dir)?;
                }
            } else {
                std::fs::rename(&tmp, &dir)?;
            }
            log::debug!("stored {stage}/{key}");
        }
        load(&dir)
    }
}
