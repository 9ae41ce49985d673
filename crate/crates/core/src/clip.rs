//! Video clips: an RGB frame stack with per-frame timestamps.

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[T, 3, H, W]`, values in `[0, 1]`
    pub frames: DenseArray<f32>,
    /// seconds, one per frame
    pub timestamps: Vec<f64>,
    pub clip_id: String,
}

impl VideoClip {
    pub fn new(frames: DenseArray<f32>, timestamps: Vec<f64>, clip_id: impl Into<String>) -> Result<Self> {
        let clip_id = clip_id.into();
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("clip `{clip_id}` frames must be [T, 3, H, W], got {s:?}")));
        }
        if timestamps.len() != s[0] {
            return Err(Error::shape(format!(
                "clip `{clip_id}` has {} frames but {} timestamps",
                s[0],
                timestamps.len()
            )));
        }
        if timestamps.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config(format!(
                "clip `{clip_id}` timestamps must be nonnegative and nondecreasing"
            )));
        }
        Ok(Self {
            frames,
            timestamps,
            clip_id,
        })
    }

    /// Frames at a constant rate starting at time zero.
    pub fn at_fps(frames: DenseArray<f32>, fps: f64, clip_id: impl Into<String>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::config(format!("frame rate must be positive, got {fps}")));
        }
        let n = frames.shape().first().copied().unwrap_or(0);
        Self::new(frames, (0..n).map(|k| k as f64 / fps).collect(), clip_id)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Keeps the frames at `indices`, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let t = self.num_frames();
        let per = self.frames.numel() / t;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut times = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= t {
                return Err(Error::Index { index: i, len: t });
            }
            data.extend_from_slice(&self.frames.data()[i * per..(i + 1) * per]);
            times.push(self.timestamps[i]);
        }
        let mut shape = self.frames.shape().to_vec();
        shape[0] = indices.len();
        Self::new(DenseArray::new(shape, data)?, times, self.clip_id.clone())
    }

    /// Uniformly strided subsample of `n` frames (see [`sample_indices`]).
    pub fn subsample(&self, n: usize) -> Result<Self> {
        self.select_frames(&sample_indices(self.num_frames(), n)?)
    }
}

/// Indices of `n` frames spread uniformly over `total`: the center of each of
/// `n` equal segments, `floor((i + 0.5) * total / n)`. Needs `1 <= n <= total`.
pub fn sample_indices(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::config(format!("cannot sample {n} frames from a clip of {total}")));
    }
    Ok((0..n).map(|i| ((2 * i + 1) * total) / (2 * n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_uniform_and_centered() {
        assert_eq!(sample_indices(16, 8).unwrap(), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(sample_indices(16, 1).unwrap(), vec![8]);
        assert_eq!(sample_indices(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_indices(4, 5).is_err());
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let frames = DenseArray::zeros(&[2, 1, 4, 4]);
        assert!(VideoClip::at_fps(frames, 1.0, "c").is_err());
    }

    #[test]
    fn rejects_decreasing_timestamps() {
        let frames = DenseArray::zeros(&[2, 3, 4, 4]);
        assert!(VideoClip::new(frames, vec![1.0, 0.5], "c").is_err());
    }
}
