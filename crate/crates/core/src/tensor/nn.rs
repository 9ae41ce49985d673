//! Parameterized building blocks shared by every encoder.

use rand::Rng;

use super::array::Real;
use super::param::{Init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), &[in_dim, out_dim], Init::weights(), rng)?,
            bias: store.add(format!("{name}.bias"), &[out_dim], Init::Zeros, rng)?,
            in_dim,
            out_dim,
        })
    }

    /// `x @ W + b` over the last axis of `x`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), &[dim], Init::Ones, rng)?,
            bias: store.add(format!("{name}.bias"), &[dim], Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain)?;
        let b = tape.param(self.bias)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim)?,
            dropout,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, self.dropout)?;
        self.fc2.forward(tape, h)
    }
}

/// Scaled dot-product attention with `heads` heads, concatenated and passed
/// through an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim)?,
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim)?,
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// Self-attention over `x` of shape `[S, d]` or `[G, S, d]`, where each of
    /// the `G` groups attends only within itself.
    pub fn self_attention<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.attend(tape, x, x)
    }

    /// Queries `[G, Sq, d]` attend over context `[G, Sk, d]` (2-D inputs are
    /// treated as a single group). Returns `[G, Sq, d]`, or `[Sq, d]` for 2-D
    /// queries.
    pub fn attend<T: Real>(&self, tape: &mut Tape<'_, T>, queries: Var, context: Var) -> Result<Var> {
        let (qs, cs) = (tape.shape(queries).to_vec(), tape.shape(context).to_vec());
        let two_d = qs.len() == 2;
        let (g, sq, d) = match *qs.as_slice() {
            [s, d] => (1, s, d),
            [g, s, d] => (g, s, d),
            _ => return Err(Error::shape(format!("attention queries of shape {qs:?}"))),
        };
        let (gk, sk, dk) = match *cs.as_slice() {
            [s, d] => (1, s, d),
            [g, s, d] => (g, s, d),
            _ => return Err(Error::shape(format!("attention context of shape {cs:?}"))),
        };
        if d != self.dim || dk != self.dim || gk != g {
            return Err(Error::shape(format!(
                "attention of width {} over queries {qs:?} and context {cs:?}",
                self.dim
            )));
        }
        let (h, dh) = (self.heads, self.dim / self.heads);

        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, context)?;
        let v = self.value.forward(tape, context)?;
        let q = split_heads(tape, q, g, sq, h, dh)?;
        let k = split_heads(tape, k, g, sk, h, dh)?;
        let v = split_heads(tape, v, g, sk, h, dh)?;

        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(weights, v)?;

        let ctx = if h == 1 {
            tape.reshape(ctx, &[g, sq, d])?
        } else {
            let ctx = tape.reshape(ctx, &[g, h, sq, dh])?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            tape.reshape(ctx, &[g, sq, d])?
        };
        let out = self.output.forward(tape, ctx)?;
        if two_d {
            tape.reshape(out, &[sq, d])
        } else {
            Ok(out)
        }
    }
}

/// `[G*S, d]`-compatible projection to `[G*h, S, dh]`.
fn split_heads<T: Real>(tape: &mut Tape<'_, T>, x: Var, g: usize, s: usize, h: usize, dh: usize) -> Result<Var> {
    if h == 1 {
        return tape.reshape(x, &[g, s, dh]);
    }
    let x = tape.reshape(x, &[g, s, h, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[g * h, s, dh])
}

/// Pre-layer-norm transformer encoder layer:
/// `x' = x + MSA(LN(x))`, `y = x' + MLP(LN(x'))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub dropout: f64,
}

impl EncoderLayer {
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
            norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), dim)?,
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.attention"), dim, heads)?,
            norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio, dropout)?,
            dropout,
        })
    }

    /// `x` is `[S, d]`. When `valid_keys` is given, only those rows serve as
    /// attention keys and values; every row still produces an output.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, valid_keys: Option<&[usize]>) -> Result<Var> {
        let normed = self.norm1.forward(tape, x)?;
        let context = match valid_keys {
            Some(rows) => tape.gather_rows(normed, rows)?,
            None => normed,
        };
        let attn = self.attention.attend(tape, normed, context)?;
        let attn = tape.dropout(attn, self.dropout)?;
        let x = tape.add(x, attn)?;
        let normed = self.norm2.forward(tape, x)?;
        let m = self.mlp.forward(tape, normed)?;
        let m = tape.dropout(m, self.dropout)?;
        tape.add(x, m)
    }
}

/// Strides and zero padding of a separable spatiotemporal convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SepConvGeometry {
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub spatial_pad: usize,
    pub temporal_pad: usize,
}

impl SepConvGeometry {
    /// Padding `(k - 1) / 2` on both factors.
    pub fn same(spatial_kernel: usize, temporal_kernel: usize, spatial_stride: usize, temporal_stride: usize) -> Self {
        Self {
            spatial_stride,
            temporal_stride,
            spatial_pad: (spatial_kernel - 1) / 2,
            temporal_pad: (temporal_kernel - 1) / 2,
        }
    }
}

/// Spatial `k x k` convolution of every frame followed by a temporal
/// convolution: `clip [T, Cin, H, W]`, `spatial_kernel [Cmid, Cin, k, k]`,
/// `temporal_kernel [Cout, Cmid, kt]`.
pub fn separable_conv3d<T: Real>(
    tape: &mut Tape<'_, T>,
    clip: Var,
    spatial_kernel: Var,
    temporal_kernel: Var,
    geometry: SepConvGeometry,
) -> Result<Var> {
    let s = tape.spatial_conv(clip, spatial_kernel, geometry.spatial_stride, geometry.spatial_pad)?;
    tape.temporal_conv(s, temporal_kernel, geometry.temporal_stride, geometry.temporal_pad)
}

#[derive(Clone, Debug)]
pub struct SepConv3d {
    pub spatial: ParamId,
    pub temporal: ParamId,
    pub geometry: SepConvGeometry,
    pub out_channels: usize,
}

impl SepConv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        temporal_kernel: usize,
        spatial_stride: usize,
        temporal_stride: usize,
    ) -> Result<Self> {
        // He-style fan-in scaling; these kernels feed ReLUs
        let std_s = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let std_t = (2.0 / (out_channels * temporal_kernel) as f64).sqrt();
        Ok(Self {
            spatial: store.add(
                format!("{name}.spatial"),
                &[out_channels, in_channels, kernel, kernel],
                Init::TruncatedNormal { std: std_s },
                rng,
            )?,
            temporal: store.add(
                format!("{name}.temporal"),
                &[out_channels, out_channels, temporal_kernel],
                Init::TruncatedNormal { std: std_t },
                rng,
            )?,
            geometry: SepConvGeometry::same(kernel, temporal_kernel, spatial_stride, temporal_stride),
            out_channels,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, clip: Var) -> Result<Var> {
        let ws = tape.param(self.spatial)?;
        let wt = tape.param(self.temporal)?;
        separable_conv3d(tape, clip, ws, wt, self.geometry)
    }
}
