use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prepare,
    PretrainLm,
    TunePrompt,
    FilterPrompt,
    Generate,
    FilterWeak,
    TrainDr,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::PretrainLm,
        Stage::TunePrompt,
        Stage::FilterPrompt,
        Stage::Generate,
        Stage::FilterWeak,
        Stage::TrainDr,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::PretrainLm => "pretrain-lm",
            Stage::TunePrompt => "tune-prompt",
            Stage::FilterPrompt => "filter-prompt",
            Stage::Generate => "generate",
            Stage::FilterWeak => "filter-weak",
            Stage::TrainDr => "train-dr",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Written last into a finished stage directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub key: String,
    pub config_hash: String,
    /// SHA-256 of every artifact, by relative path.
    pub artifacts: BTreeMap<String, String>,
}

const MANIFEST: &str = "manifest.json";

/// A content-addressed directory `<root>/<stage>/<key>/`.
pub(crate) struct StageDir {
    pub stage: Stage,
    pub key: String,
    pub path: PathBuf,
}

impl StageDir {
    pub fn new(root: &Path, stage: Stage, key: String) -> Self {
        let path = root.join(stage.name()).join(&key[..16]);
        Self { stage, key, path }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// The manifest, when the directory holds a complete result for this key.
    pub fn finished(&self) -> Option<StageManifest> {
        let text = fs::read_to_string(self.path.join(MANIFEST)).ok()?;
        let manifest: StageManifest = serde_json::from_str(&text).ok()?;
        let complete = manifest.key == self.key && manifest.artifacts.keys().all(|a| self.path.join(a).is_file());
        complete.then_some(manifest)
    }

    pub fn reset(&self) -> Result<()> {
        if self.path.exists() {
            fs::remove_dir_all(&self.path).map_err(|e| Error::io(format!("clearing {}", self.path.display()), e))?;
        }
        fs::create_dir_all(&self.path).map_err(|e| Error::io(format!("creating {}", self.path.display()), e))
    }

    /// Hashes every file under the directory and writes the manifest.
    pub fn seal(&self, config_hash: &str) -> Result<StageManifest> {
        let mut artifacts = BTreeMap::new();
        collect(&self.path, &self.path, &mut artifacts)?;
        artifacts.remove(MANIFEST);
        let manifest = StageManifest {
            stage: self.stage,
            key: self.key.clone(),
            config_hash: config_hash.to_string(),
            artifacts,
        };
        crate::metrics::write_file(&self.path.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }
}

fn collect(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io("listing", e))?.path();
        if path.is_dir() {
            collect(base, &path, out)?;
        } else {
            let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(())
}
