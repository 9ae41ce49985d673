//! Corpus handling: the manifest format, frame storage, deterministic
//! splits and the procedural person-video generator.

pub mod frames;
pub mod manifest;
pub mod split;
pub mod synthetic;

pub use manifest::{load_manifest, write_manifest, ManifestEntry};
pub use split::{split_manifest, split_with, SplitAssignment, SplitConfig, SplitName};

use std::collections::HashMap;
use std::path::Path;

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::motion::{read_motion_features, MotionRecord};

/// A clip, subsampled to the working frame count, with its two captions.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clip: VideoClip,
    pub captions: [String; 2],
}

impl Sample {
    pub fn new(clip: VideoClip, captions: &[String], num_frames: usize) -> Result<Self> {
        let [a, b] = captions else {
            return Err(Error::Validation {
                clip_id: clip.clip_id.clone(),
                reason: format!("expected exactly 2 captions, found {}", captions.len()),
            });
        };
        let clip = clip.subsample(num_frames).map_err(|e| Error::Validation {
            clip_id: clip.clip_id.clone(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            clip,
            captions: [a.clone(), b.clone()],
        })
    }

    /// The same sample subsampled to `num_frames`.
    pub fn with_frames(&self, num_frames: usize) -> Result<Self> {
        Self::new(self.clip.clone(), &self.captions, num_frames)
    }
}

/// Loads the frames of `entries` (paths relative to `base`).
pub fn load_samples(entries: &[&ManifestEntry], base: &Path, num_frames: usize) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| Sample::new(e.load_clip(base)?, &e.captions, num_frames))
        .collect()
}

/// Precomputed motion features keyed by clip id.
pub type MotionBank = HashMap<String, MotionRecord>;

pub fn load_motion_bank(path: &Path) -> Result<MotionBank> {
    Ok(read_motion_features(path)?
        .into_iter()
        .map(|r| (r.clip_id.clone(), r))
        .collect())
}
