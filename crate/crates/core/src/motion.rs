//! Motion encoder: a separable spatiotemporal convolution stack extracts `K`
//! timed feature vectors, an aggregator token initialized by their
//! elementwise maximum is prepended, per-second temporal rows are added, and
//! a transformer encoder contextualizes the sequence. `MO(V)` is the output
//! row of the aggregator.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::binio::Cursor;
use crate::clip::VideoClip;
use crate::config::MotionConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::{EncoderLayer, Linear, SepConv3d};
use crate::tensor::{DenseArray, Init, ParamId, ParamStore, Real, Tape, Var};

/// `K` feature vectors with the time (seconds) each was extracted at.
#[derive(Clone, Debug)]
pub struct MotionFeatures {
    /// `[K, d_mo]`
    pub features: Var,
    pub times: Vec<f64>,
}

/// Encoder output: every contextualized row plus the aggregator row.
#[derive(Clone, Copy, Debug)]
pub struct MotionOutput {
    /// `[K + 1, d_mo]`, aggregator first
    pub tokens: Var,
    /// `[1, d_mo]`
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct MotionEncoder {
    pub config: MotionConfig,
    pub convs: Vec<SepConv3d>,
    pub projection: Linear,
    pub temporal_table: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl MotionEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, config: &MotionConfig) -> Result<Self> {
        if config.conv_channels.is_empty() || config.conv_channels.len() != config.temporal_strides.len() {
            return Err(Error::config(
                "motion extractor needs one temporal stride per convolution layer and at least one layer",
            ));
        }
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut cin = 3;
        for (i, (&cout, &st)) in config.conv_channels.iter().zip(&config.temporal_strides).enumerate() {
            convs.push(SepConv3d::new(
                store,
                rng,
                &format!("motion.conv{i}"),
                cin,
                cout,
                config.spatial_kernel,
                config.temporal_kernel,
                config.spatial_stride,
                st,
            )?);
            cin = cout;
        }
        let d = config.dim;
        Ok(Self {
            config: config.clone(),
            convs,
            projection: Linear::new(store, rng, "motion.projection", cin, d)?,
            temporal_table: store.add("motion.temporal_table", &[config.max_seconds + 1, d], Init::weights(), rng)?,
            layers: (0..config.layers)
                .map(|i| {
                    EncoderLayer::new(
                        store,
                        rng,
                        &format!("motion.layer{i}"),
                        d,
                        config.heads,
                        config.mlp_ratio,
                        config.dropout,
                    )
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Width of the raw extractor output, before projection.
    pub fn extractor_channels(&self) -> usize {
        self.projection.in_dim
    }

    /// Product of the temporal strides.
    pub fn total_stride(&self) -> usize {
        self.config.temporal_strides.iter().product()
    }

    /// Fewest frames the extractor accepts.
    pub fn min_frames(&self) -> usize {
        self.config.temporal_kernel
    }

    /// Number of features produced from `frames` frames, `ceil(frames / S)`.
    pub fn feature_count(&self, frames: usize) -> usize {
        self.config
            .temporal_strides
            .iter()
            .fold(frames, |n, &s| n.div_ceil(s))
    }

    /// Runs the convolution stack with ReLUs, averages each retained time step
    /// over space and projects to `d_mo`. Feature `k` is timed at the center
    /// frame of its window, frame `k * S`.
    pub fn extract<T: Real>(&self, tape: &mut Tape<'_, T>, clip: &VideoClip) -> Result<MotionFeatures> {
        let t = clip.num_frames();
        if t < self.min_frames() {
            return Err(Error::config(format!(
                "clip `{}` has {t} frame(s) but motion extraction needs at least {}; \
                 pad the clip by repeating frames or sample more frames",
                clip.clip_id,
                self.min_frames()
            )));
        }
        let mut x = tape.constant(clip.frames.cast::<T>())?;
        for conv in &self.convs {
            x = conv.forward(tape, x)?;
            x = tape.relu(x)?;
        }
        let s = tape.shape(x).to_vec();
        let (k, c) = (s[0], s[1]);
        let x = tape.reshape(x, &[k, c, s[2] * s[3]])?;
        let pooled = tape.mean_axis(x, 2)?;
        let features = self.projection.forward(tape, pooled)?;
        let stride = self.total_stride();
        let times = (0..k)
            .map(|i| clip.timestamps[(i * stride).min(t - 1)])
            .collect();
        Ok(MotionFeatures { features, times })
    }

    /// Features from an imported record, which replaces the convolution stack
    /// and goes through the same projection.
    pub fn imported<T: Real>(&self, tape: &mut Tape<'_, T>, record: &MotionRecord) -> Result<MotionFeatures> {
        if record.values.shape()[1] != self.extractor_channels() {
            return Err(Error::shape(format!(
                "imported features for `{}` have width {}, expected {}",
                record.clip_id,
                record.values.shape()[1],
                self.extractor_channels()
            )));
        }
        let x = tape.constant(record.values.cast::<T>())?;
        Ok(MotionFeatures {
            features: self.projection.forward(tape, x)?,
            times: record.times.clone(),
        })
    }

    /// `E_motion = [F_agg; F_1..F_K] + [T_agg; T_(t_1 + 1)..]`, where `F_agg`
    /// is the elementwise max of the features and `T_(t + 1)` is the row for
    /// the one-second bucket containing the feature time.
    pub fn build_sequence<T: Real>(&self, tape: &mut Tape<'_, T>, seq: &MotionFeatures) -> Result<Var> {
        let s = tape.shape(seq.features).to_vec();
        if s.len() != 2 || s[0] != seq.times.len() || s[0] == 0 {
            return Err(Error::shape(format!(
                "motion features {s:?} with {} times",
                seq.times.len()
            )));
        }
        let rows = temporal_rows(&seq.times, self.config.max_seconds)?;
        let agg = tape.max_pool_over_axis(seq.features, 0)?;
        let agg = tape.reshape(agg, &[1, s[1]])?;
        let x = tape.concat(&[agg, seq.features], 0)?;
        let table = tape.param(self.temporal_table)?;
        let pos = tape.embedding_lookup(table, &rows)?;
        tape.add(x, pos)
    }

    /// Runs the encoder layers over `[K + 1, d_mo]`.
    pub fn encode_sequence<T: Real>(&self, tape: &mut Tape<'_, T>, e_motion: Var) -> Result<MotionOutput> {
        let mut x = e_motion;
        for layer in &self.layers {
            x = layer.forward(tape, x, None)?;
        }
        Ok(MotionOutput {
            tokens: x,
            embedding: tape.gather_rows(x, &[0])?,
        })
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, clip: &VideoClip) -> Result<MotionOutput> {
        let seq = self.extract(tape, clip)?;
        let e = self.build_sequence(tape, &seq)?;
        self.encode_sequence(tape, e)
    }
}

/// Table rows for the aggregator (row 0) followed by one row per feature time:
/// a time in `[t, t + 1)` maps to row `t + 1`.
pub fn temporal_rows(times: &[f64], max_seconds: usize) -> Result<Vec<usize>> {
    let mut rows = Vec::with_capacity(times.len() + 1);
    rows.push(0);
    for &time in times {
        if !(time >= 0.0 && time < max_seconds as f64) {
            return Err(Error::TimeRange { time, max_seconds });
        }
        rows.push(time.floor() as usize + 1);
    }
    Ok(rows)
}

/// Precomputed extractor output for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionRecord {
    pub clip_id: String,
    pub times: Vec<f64>,
    /// `[K, channels]`
    pub values: DenseArray<f32>,
}

const FEATURE_MAGIC: &[u8; 8] = b"TVPRMF1\n";

/// Writes records as: magic, then per record `u32` id length, id bytes,
/// `u32` K, `u32` channels, K `f64` times, `K * channels` `f32` values, all
/// little-endian.
pub fn write_motion_features(path: &Path, records: &[MotionRecord]) -> Result<()> {
    let mut buf = FEATURE_MAGIC.to_vec();
    for r in records {
        let id = r.clip_id.as_bytes();
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id);
        buf.extend_from_slice(&(r.values.shape()[0] as u32).to_le_bytes());
        buf.extend_from_slice(&(r.values.shape()[1] as u32).to_le_bytes());
        for t in &r.times {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for v in r.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_motion_features(path: &Path) -> Result<Vec<MotionRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format("motion feature file", reason.to_string());
    let mut cur = Cursor::new(&bytes);
    if cur.take(FEATURE_MAGIC.len()).ok_or_else(|| bad("truncated header"))? != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut records = Vec::new();
    while !cur.done() {
        let id_len = cur.u32().ok_or_else(|| bad("truncated record"))? as usize;
        let id = cur.take(id_len).ok_or_else(|| bad("truncated clip id"))?;
        let clip_id = String::from_utf8(id.to_vec()).map_err(|_| bad("clip id is not UTF-8"))?;
        let k = cur.u32().ok_or_else(|| bad("truncated record"))? as usize;
        let c = cur.u32().ok_or_else(|| bad("truncated record"))? as usize;
        if k == 0 || c == 0 {
            return Err(bad("empty feature record"));
        }
        let times = (0..k)
            .map(|_| cur.f64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated times"))?;
        let values = (0..k * c)
            .map(|_| cur.f32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated values"))?;
        records.push(MotionRecord {
            clip_id,
            times,
            values: DenseArray::new(vec![k, c], values)?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_rule() {
        assert_eq!(temporal_rows(&[0.5, 1.0, 0.0, 15.99], 16).unwrap(), vec![0, 1, 2, 1, 16]);
        assert!(matches!(
            temporal_rows(&[16.0], 16),
            Err(Error::TimeRange { max_seconds: 16, .. })
        ));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let recs = vec![MotionRecord {
            clip_id: "c1".into(),
            times: vec![0.0, 0.5],
            values: DenseArray::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        }];
        write_motion_features(&path, &recs).unwrap();
        assert_eq!(read_motion_features(&path).unwrap(), recs);
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_motion_features(&path).is_err());
    }
}
