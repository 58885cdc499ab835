//! Reconstruction metrics, synthetic datasets and their on-disk layout.

pub mod manifest;
pub mod metrics;
pub mod synthetic;

pub use manifest::{verify_dataset, write_dataset, ClipEntry, DatasetManifest, Split};
pub use metrics::{psnr, ssim};
pub use synthetic::{clip_label, generate_clip, MotionKind, SyntheticSpec};

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fpt;
use crate::tensor::NdTensor;

/// Indexed collection of clips.
pub trait ClipSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn clip(&self, index: usize) -> Result<NdTensor>;

    /// Class label, if the source has one.
    fn label(&self, _index: usize) -> Option<usize> {
        None
    }

    fn split(&self, index: usize) -> Split {
        Split::of_index(index)
    }

    /// Indices belonging to `split`, ascending.
    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split(i) == split)
            .collect()
    }
}

/// Generates clips on demand without touching the disk.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub spec: SyntheticSpec,
}

impl ClipSource for SyntheticSource {
    fn len(&self) -> usize {
        self.spec.clips
    }

    fn clip(&self, index: usize) -> Result<NdTensor> {
        if index >= self.spec.clips {
            return Err(Error::Data(format!(
                "clip {index} out of range {}",
                self.spec.clips
            )));
        }
        Ok(generate_clip(&self.spec, index))
    }

    fn label(&self, index: usize) -> Option<usize> {
        (index < self.spec.clips).then(|| clip_label(&self.spec, index))
    }
}

/// Clips listed in a manifest on disk.
#[derive(Clone, Debug)]
pub struct ManifestSource {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl ManifestSource {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let manifest = DatasetManifest::load(root.join(manifest::MANIFEST_FILE))?;
        Ok(Self { root, manifest })
    }
}

impl ClipSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.clips.len()
    }

    fn clip(&self, index: usize) -> Result<NdTensor> {
        let entry = self
            .manifest
            .clips
            .get(index)
            .ok_or_else(|| Error::Data(format!("clip {index} out of range")))?;
        let t = fpt::load(self.root.join(&entry.path))?;
        if t.shape() != [entry.frames, entry.height, entry.width, 3] {
            return Err(Error::Data(format!(
                "{} has shape {:?}",
                entry.path,
                t.shape()
            )));
        }
        Ok(t)
    }

    fn split(&self, index: usize) -> Split {
        self.manifest.clips[index].split
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.manifest.clips.get(index).and_then(|e| e.label)
    }
}
