//! Line-delimited JSON manifest: one clip per line.
//!
//! ```text
//! {"clip_id":"c0","frames_path":"frames/c0","captions":["..",".."],"identity_id":"p1","sub_dataset":"synthetic","fps":4.0}
//! ```
//!
//! `frames_path` is resolved relative to the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frames::{frame_sizes, read_frames};
use crate::clip::VideoClip;
use crate::error::{Error, Result};

/// Frame rate assumed when an entry does not give one.
pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub frames_path: String,
    pub captions: Vec<String>,
    pub identity_id: String,
    pub sub_dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

impl ManifestEntry {
    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::Validation {
            clip_id: self.clip_id.clone(),
            reason: reason.into(),
        }
    }

    /// Field checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.clip_id.is_empty() {
            return Err(self.invalid("empty clip_id"));
        }
        if self.captions.len() != 2 {
            return Err(self.invalid(format!("expected exactly 2 captions, found {}", self.captions.len())));
        }
        if self.captions.iter().any(|c| c.trim().is_empty()) {
            return Err(self.invalid("empty caption"));
        }
        if let Some(fps) = self.fps {
            if !(fps > 0.0 && fps.is_finite()) {
                return Err(self.invalid(format!("invalid fps {fps}")));
            }
        }
        Ok(())
    }

    pub fn frames_location(&self, base: &Path) -> PathBuf {
        base.join(&self.frames_path)
    }

    pub fn load_clip(&self, base: &Path) -> Result<VideoClip> {
        let stack = read_frames(&self.frames_location(base)).map_err(|e| self.invalid(e.to_string()))?;
        VideoClip::at_fps(stack.to_array(), self.fps.unwrap_or(DEFAULT_FPS), self.clip_id.clone())
    }
}

/// Parses manifest text without touching frame files.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1)))?;
        entry.validate()?;
        if !seen.insert(entry.clip_id.clone()) {
            return Err(entry.invalid("duplicate clip_id"));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads and validates a manifest; every entry's frames must exist and share
/// one resolution.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = parse_manifest(&crate::config::read(path)?)?;
    let base = manifest_dir(path);
    for e in &entries {
        let sizes = frame_sizes(&e.frames_location(base)).map_err(|err| e.invalid(err.to_string()))?;
        if sizes.windows(2).any(|w| w[0] != w[1]) {
            return Err(e.invalid("frames have mismatched resolutions"));
        }
    }
    Ok(entries)
}

pub fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty_manifest() {
        assert!(parse_manifest("").unwrap().is_empty());
        assert!(parse_manifest("\n\n").unwrap().is_empty());
    }

    #[test]
    fn one_caption_names_the_clip() {
        let line = r#"{"clip_id":"c7","frames_path":"x","captions":["only one"],"identity_id":"i","sub_dataset":"s"}"#;
        match parse_manifest(line).unwrap_err() {
            Error::Validation { clip_id, .. } => assert_eq!(clip_id, "c7"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"clip_id":"c","frames_path":"x","captions":["a","b"],"identity_id":"i","sub_dataset":"s"}"#;
        assert!(parse_manifest(&format!("{line}\n{line}")).is_err());
    }
}
