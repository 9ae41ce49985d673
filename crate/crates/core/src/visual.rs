//! Appearance encoder: patch embedding with temporal and spatial position
//! tables, a CLS token, divided space-time transformer blocks, and a final
//! layer norm on the CLS row.
//!
//! Sequence layout: row 0 is CLS, then patch tokens frame-major and in raster
//! order within each frame, so token `(t, p)` sits at row `1 + t * N + p`.

use rand::Rng;

use crate::clip::VideoClip;
use crate::config::VisualConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{DenseArray, Init, ParamId, ParamStore, Real, Tape, Var};

/// Patches per frame, `H * W / P^2`.
pub fn patch_count(height: usize, width: usize, patch: usize) -> Result<usize> {
    if patch == 0 || height == 0 || width == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::config(format!(
            "frame size {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((height / patch) * (width / patch))
}

/// Flattens `[T, 3, H, W]` frames into `[T * N, 3 * P * P]` patch vectors.
/// Each vector is laid out channel, then row, then column within the patch.
pub fn unfold_patches<T: Real>(frames: &DenseArray<T>, patch: usize) -> Result<DenseArray<T>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("frames must be [T, C, H, W], got {s:?}")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let n = patch_count(h, w, patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let plen = c * patch * patch;
    let x = frames.data();
    let mut out = Vec::with_capacity(t * n * plen);
    for f in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..patch {
                        let row = ((f * c + ch) * h + gy * patch + py) * w + gx * patch;
                        out.extend_from_slice(&x[row..row + patch]);
                    }
                }
            }
        }
    }
    DenseArray::new(vec![t * n, plen], out)
}

/// Projected patch tokens of one clip.
#[derive(Clone, Copy, Debug)]
pub struct PatchGrid {
    /// `[T * N, d]`
    pub tokens: Var,
    pub frames: usize,
    pub patches: usize,
    pub patch_size: usize,
}

#[derive(Clone, Debug)]
pub struct SpaceTimeBlock {
    pub temporal_norm: LayerNorm,
    pub temporal_attention: MultiHeadAttention,
    pub spatial_norm: LayerNorm,
    pub spatial_attention: MultiHeadAttention,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

impl SpaceTimeBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            temporal_norm: LayerNorm::new(store, rng, &format!("{name}.temporal_norm"), dim)?,
            temporal_attention: MultiHeadAttention::new(store, rng, &format!("{name}.temporal_attention"), dim, heads)?,
            spatial_norm: LayerNorm::new(store, rng, &format!("{name}.spatial_norm"), dim)?,
            spatial_attention: MultiHeadAttention::new(store, rng, &format!("{name}.spatial_attention"), dim, heads)?,
            mlp_norm: LayerNorm::new(store, rng, &format!("{name}.mlp_norm"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio, dropout)?,
            dropout,
        })
    }

    fn check_layout<T: Real>(tape: &Tape<'_, T>, x: Var, frames: usize, patches: usize) -> Result<usize> {
        let s = tape.shape(x);
        if s.len() != 2 || s[0] != 1 + frames * patches {
            return Err(Error::shape(format!(
                "space-time block expects {} tokens (1 + {frames} x {patches}), got {s:?}",
                1 + frames * patches
            )));
        }
        Ok(s[1])
    }

    /// `x + TemporalMSA(LN(x))`, where each group holds the tokens sharing a
    /// spatial index across frames. CLS passes through unchanged.
    pub fn temporal_sublayer<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        frames: usize,
        patches: usize,
    ) -> Result<Var> {
        let d = Self::check_layout(tape, x, frames, patches)?;
        let patch_rows: Vec<usize> = (1..=frames * patches).collect();
        let cls = tape.gather_rows(x, &[0])?;
        let xp = tape.gather_rows(x, &patch_rows)?;
        let normed = self.temporal_norm.forward(tape, xp)?;
        let grouped = tape.reshape(normed, &[frames, patches, d])?;
        let grouped = tape.permute(grouped, &[1, 0, 2])?;
        let attended = self.temporal_attention.self_attention(tape, grouped)?;
        let attended = tape.permute(attended, &[1, 0, 2])?;
        let attended = tape.reshape(attended, &[frames * patches, d])?;
        let attended = tape.dropout(attended, self.dropout)?;
        let xp = tape.add(xp, attended)?;
        tape.concat(&[cls, xp], 0)
    }

    /// Temporal attention, then spatial attention within each frame with the
    /// CLS token joined to every frame. The CLS update averages its mean
    /// per-frame output with a global pass over all tokens. The spatial
    /// output is added to the block input, followed by the MLP sublayer.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, frames: usize, patches: usize) -> Result<Var> {
        let d = Self::check_layout(tape, x, frames, patches)?;
        let xt = self.temporal_sublayer(tape, x, frames, patches)?;
        let xs = self.spatial_norm.forward(tape, xt)?;

        let patch_rows: Vec<usize> = (1..=frames * patches).collect();
        let cls = tape.gather_rows(xs, &vec![0; frames])?;
        let cls = tape.reshape(cls, &[frames, 1, d])?;
        let xp = tape.gather_rows(xs, &patch_rows)?;
        let xp = tape.reshape(xp, &[frames, patches, d])?;
        let groups = tape.concat(&[cls, xp], 1)?;
        let attended = self.spatial_attention.self_attention(tape, groups)?;
        let attended = tape.reshape(attended, &[frames * (1 + patches), d])?;

        let cls_rows: Vec<usize> = (0..frames).map(|f| f * (1 + patches)).collect();
        let out_rows: Vec<usize> = (0..frames)
            .flat_map(|f| (1..=patches).map(move |p| f * (1 + patches) + p))
            .collect();
        let per_frame_cls = tape.gather_rows(attended, &cls_rows)?;
        let per_frame_cls = tape.mean_axis(per_frame_cls, 0)?;
        let per_frame_cls = tape.reshape(per_frame_cls, &[1, d])?;
        let cls_query = tape.gather_rows(xs, &[0])?;
        let global_cls = self.spatial_attention.attend(tape, cls_query, xs)?;
        let cls_delta = tape.add(per_frame_cls, global_cls)?;
        let cls_delta = tape.scale(cls_delta, 0.5)?;
        let patch_delta = tape.gather_rows(attended, &out_rows)?;

        let delta = tape.concat(&[cls_delta, patch_delta], 0)?;
        let delta = tape.dropout(delta, self.dropout)?;
        let x1 = tape.add(x, delta)?;
        let normed = self.mlp_norm.forward(tape, x1)?;
        let m = self.mlp.forward(tape, normed)?;
        let m = tape.dropout(m, self.dropout)?;
        tape.add(x1, m)
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: VisualConfig,
    pub patches: usize,
    pub patch_embed: Linear,
    pub temporal_table: ParamId,
    pub spatial_table: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<SpaceTimeBlock>,
    pub final_norm: LayerNorm,
}

impl VisualEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: &VisualConfig) -> Result<Self> {
        let patches = patch_count(config.height, config.width, config.patch_size)?;
        let d = config.dim;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        Ok(Self {
            config: config.clone(),
            patches,
            patch_embed: Linear::new(store, rng, "visual.patch_embed", patch_dim, d)?,
            temporal_table: store.add("visual.temporal_position", &[config.max_frames, d], Init::weights(), rng)?,
            spatial_table: store.add("visual.spatial_position", &[patches, d], Init::weights(), rng)?,
            cls: store.add("visual.cls", &[1, d], Init::weights(), rng)?,
            blocks: (0..config.blocks)
                .map(|i| {
                    SpaceTimeBlock::new(
                        store,
                        rng,
                        &format!("visual.block{i}"),
                        d,
                        config.heads,
                        config.mlp_ratio,
                        config.dropout,
                    )
                })
                .collect::<Result<_>>()?,
            final_norm: LayerNorm::new(store, rng, "visual.final_norm", d)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Unfolds the clip into patches and projects them to `[T * N, d]`.
    pub fn patchify<T: Real>(&self, tape: &mut Tape<'_, T>, clip: &VideoClip) -> Result<PatchGrid> {
        let (h, w) = (clip.height(), clip.width());
        let p = self.config.patch_size;
        let n = patch_count(h, w, p)?;
        if (h, w) != (self.config.height, self.config.width) {
            return Err(Error::config(format!(
                "clip `{}` is {h}x{w} but the encoder expects {}x{}",
                clip.clip_id, self.config.height, self.config.width
            )));
        }
        let unfolded = unfold_patches(&clip.frames.cast::<T>(), p)?;
        let x = tape.constant(unfolded)?;
        Ok(PatchGrid {
            tokens: self.patch_embed.forward(tape, x)?,
            frames: clip.num_frames(),
            patches: n,
            patch_size: p,
        })
    }

    /// Adds temporal row `t` and spatial row `p` to token `(t, p)` and puts
    /// the CLS token, without positions, in front: `[1 + T * N, d]`.
    pub fn add_positions_and_cls<T: Real>(&self, tape: &mut Tape<'_, T>, grid: &PatchGrid) -> Result<Var> {
        if grid.frames == 0 || grid.frames > self.config.max_frames {
            return Err(Error::config(format!(
                "{} frames given but the temporal table holds {}",
                grid.frames, self.config.max_frames
            )));
        }
        let (t_rows, s_rows) = position_rows(grid.frames, grid.patches);
        let temporal = tape.param(self.temporal_table)?;
        let spatial = tape.param(self.spatial_table)?;
        let et = tape.embedding_lookup(temporal, &t_rows)?;
        let es = tape.embedding_lookup(spatial, &s_rows)?;
        let x = tape.add(grid.tokens, et)?;
        let x = tape.add(x, es)?;
        let cls = tape.param(self.cls)?;
        tape.concat(&[cls, x], 0)
    }

    /// `VIS(x)`, the normalized CLS row after the last block, as `[1, d]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, clip: &VideoClip) -> Result<Var> {
        let grid = self.patchify(tape, clip)?;
        let mut x = self.add_positions_and_cls(tape, &grid)?;
        for block in &self.blocks {
            x = block.forward(tape, x, grid.frames, grid.patches)?;
        }
        let cls = tape.gather_rows(x, &[0])?;
        self.final_norm.forward(tape, cls)
    }
}

/// Temporal and spatial table rows for tokens in sequence order.
pub fn position_rows(frames: usize, patches: usize) -> (Vec<usize>, Vec<usize>) {
    let temporal = (0..frames * patches).map(|i| i / patches).collect();
    let spatial = (0..frames * patches).map(|i| i % patches).collect();
    (temporal, spatial)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        assert_eq!(patch_count(224, 224, 16).unwrap(), 196);
        assert_eq!(patch_count(32, 32, 8).unwrap(), 16);
        assert_eq!(patch_count(8, 8, 8).unwrap(), 1);
        assert!(patch_count(30, 32, 8).is_err());
    }

    #[test]
    fn unfold_order_is_frame_then_raster() {
        // 1 frame, 3 channels, 4x4, value encodes (c, y, x)
        let data: Vec<f64> = (0..48).map(f64::from).collect();
        let frames = DenseArray::<f64>::from_f64(&[1, 3, 4, 4], &data).unwrap();
        let u = unfold_patches(&frames, 2).unwrap();
        assert_eq!(u.shape(), &[4, 12]);
        // second patch (top right): channel 0 rows 0..2, cols 2..4
        assert_eq!(&u.row(1)[..4], &[2.0, 3.0, 6.0, 7.0]);
        // channel 1 block of the same patch
        assert_eq!(&u.row(1)[4..8], &[18.0, 19.0, 22.0, 23.0]);
    }
}
