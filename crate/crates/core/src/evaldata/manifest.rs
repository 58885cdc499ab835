//! Dataset directory layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/clips/clip_00000.fpt
//! ...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synthetic::{clip_label, generate_clip, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fpt;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Every tenth clip (index 9, 19, ...) is held out.
    pub fn of_index(index: usize) -> Self {
        if index % 10 == 9 {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub path: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: SyntheticSpec,
    pub spec_sha256: String,
    pub clips: Vec<ClipEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn spec_hash(spec: &SyntheticSpec) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(spec)?))
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Renders every clip of `spec` into `dir` and writes the manifest.
pub fn write_dataset(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("clips"))?;
    let mut clips = Vec::with_capacity(spec.clips);
    for i in 0..spec.clips {
        let path = format!("clips/clip_{i:05}.fpt");
        let bytes = fpt::to_bytes(&generate_clip(spec, i));
        fs::write(dir.join(&path), &bytes)?;
        clips.push(ClipEntry {
            path,
            frames: spec.frames,
            height: spec.height,
            width: spec.width,
            split: Split::of_index(i),
            label: Some(clip_label(spec, i)),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        spec_sha256: spec_hash(spec)?,
        clips,
    };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Checks that every listed clip exists, parses, has the listed dims and hash.
pub fn verify_dataset(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::load(dir.join(MANIFEST_FILE))?;
    if manifest.spec_sha256 != spec_hash(&manifest.spec)? {
        return Err(Error::Data(
            "spec hash does not match the recorded spec".into(),
        ));
    }
    for entry in &manifest.clips {
        let path = dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let t = fpt::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", entry.path)))?;
        if t.shape() != [entry.frames, entry.height, entry.width, 3] {
            return Err(Error::Data(format!(
                "{} has shape {:?}",
                entry.path,
                t.shape()
            )));
        }
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Data(format!("{} hash mismatch", entry.path)));
        }
    }
    Ok(manifest)
}
