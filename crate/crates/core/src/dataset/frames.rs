//! Frame storage: a directory of `frame_<k>.png` files, or a single raw blob
//! (magic, `u32` T, H, W, then `T * 3 * H * W` bytes in `[T, 3, H, W]`
//! order).

use std::path::{Path, PathBuf};

use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

const RAW_MAGIC: &[u8; 8] = b"TVPRRAW1";

/// 8-bit RGB frames in `[T, 3, H, W]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl FrameStack {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || data.len() != frames * 3 * height * width {
            return Err(Error::shape(format!(
                "{} bytes do not form {frames} frames of 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    /// Values mapped from bytes to `[-1, 1]`.
    pub fn to_array(&self) -> DenseArray<f32> {
        let data = self.data.iter().map(|&b| f32::from(b) / 127.5 - 1.0).collect();
        DenseArray::new(vec![self.frames, 3, self.height, self.width], data).expect("validated at construction")
    }

    fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }
}

pub fn frame_file(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("frame_{k}.png"))
}

pub fn write_png_frames(dir: &Path, stack: &FrameStack) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (stack.height, stack.width);
    for k in 0..stack.frames {
        let frame = &stack.data[k * stack.frame_len()..(k + 1) * stack.frame_len()];
        let mut pixels = Vec::with_capacity(3 * h * w);
        for i in 0..h * w {
            pixels.extend((0..3).map(|c| frame[c * h * w + i]));
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, pixels).expect("buffer sized to the frame");
        let path = frame_file(dir, k);
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

pub fn write_raw_frames(path: &Path, stack: &FrameStack) -> Result<()> {
    let mut buf = RAW_MAGIC.to_vec();
    for v in [stack.frames, stack.height, stack.width] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&stack.data);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Sorted `frame_<k>.png` files of a directory; the indices must run 0..T.
pub fn png_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut indexed = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(k) = name.strip_prefix("frame_").and_then(|r| r.strip_suffix(".png")) {
            if let Ok(k) = k.parse::<usize>() {
                indexed.push((k, path));
            }
        }
    }
    indexed.sort();
    if indexed.is_empty() {
        return Err(Error::format("frame directory", format!("{} has no frame_<k>.png files", dir.display())));
    }
    if indexed.iter().enumerate().any(|(i, (k, _))| i != *k) {
        return Err(Error::format("frame directory", format!("{} has gaps in its frame numbering", dir.display())));
    }
    Ok(indexed.into_iter().map(|(_, p)| p).collect())
}

/// `(width, height)` of every frame, without decoding pixel data where the
/// format allows.
pub fn frame_sizes(path: &Path) -> Result<Vec<(usize, usize)>> {
    if path.is_dir() {
        png_frame_files(path)?
            .into_iter()
            .map(|f| {
                image::image_dimensions(&f)
                    .map(|(w, h)| (w as usize, h as usize))
                    .map_err(|source| Error::Image { path: f, source })
            })
            .collect()
    } else {
        let s = read_raw_frames(path)?;
        Ok(vec![(s.width, s.height); s.frames])
    }
}

pub fn read_frames(path: &Path) -> Result<FrameStack> {
    if path.is_dir() {
        read_png_frames(path)
    } else {
        read_raw_frames(path)
    }
}

fn read_png_frames(dir: &Path) -> Result<FrameStack> {
    let files = png_frame_files(dir)?;
    let mut data = Vec::new();
    let mut size = None;
    for f in &files {
        let img = image::open(f)
            .map_err(|source| Error::Image { path: f.clone(), source })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(Error::format("frame directory", format!("{} mixes frame sizes", dir.display())));
        }
        let raw = img.into_raw();
        for c in 0..3 {
            data.extend((0..h * w).map(|i| raw[i * 3 + c]));
        }
    }
    let (w, h) = size.expect("at least one frame");
    FrameStack::new(files.len(), h, w, data)
}

fn read_raw_frames(path: &Path) -> Result<FrameStack> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format("raw frame blob", format!("{}: {reason}", path.display()));
    let mut cur = Cursor::new(&bytes);
    if cur.take(RAW_MAGIC.len()) != Some(RAW_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    }
    let [t, h, w] = dims;
    let data = cur.take(t * 3 * h * w).ok_or_else(|| bad("truncated pixel data"))?.to_vec();
    if !cur.done() {
        return Err(bad("trailing bytes"));
    }
    FrameStack::new(t, h, w, data)
}
