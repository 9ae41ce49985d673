//! Feature fusion aggregator: visual and motion outputs are projected to a
//! shared width, tagged with a per-modality type row, and mixed by a
//! transformer. `VID(V)` is the mean of the output rows of the visual token
//! and the motion aggregator token.

use rand::Rng;

use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::{EncoderLayer, Linear};
use crate::tensor::{Init, ParamId, ParamStore, Real, Tape, Var};

/// Row of the visual type embedding in the type table.
pub const VISUAL_TYPE: usize = 0;
/// Row of the motion type embedding in the type table.
pub const MOTION_TYPE: usize = 1;

/// `E_FFA = R + C`: projected tokens with type rows added, visual tokens
/// first.
#[derive(Clone, Copy, Debug)]
pub struct FusionInput {
    /// `[n_vis + n_mo, d_ffa]`
    pub tokens: Var,
    pub n_vis: usize,
    pub n_mo: usize,
}

impl FusionInput {
    pub fn new<T: Real>(tape: &Tape<'_, T>, tokens: Var, n_vis: usize, n_mo: usize) -> Result<Self> {
        let s = tape.shape(tokens);
        if s.len() != 2 || s[0] != n_vis + n_mo || n_vis == 0 || n_mo == 0 {
            return Err(Error::shape(format!(
                "fusion input {s:?} does not hold {n_vis} visual and {n_mo} motion tokens"
            )));
        }
        Ok(Self { tokens, n_vis, n_mo })
    }

    /// Rows read out as `VID(V)`: the first visual token and the motion
    /// aggregator token.
    pub fn designated_rows(&self) -> [usize; 2] {
        [0, self.n_vis]
    }
}

#[derive(Clone, Debug)]
pub struct FeatureFusion {
    pub config: FusionConfig,
    pub visual_projection: Linear,
    pub motion_projection: Linear,
    pub type_rows: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl FeatureFusion {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: &FusionConfig,
        visual_dim: usize,
        motion_dim: usize,
    ) -> Result<Self> {
        let d = config.dim;
        Ok(Self {
            config: config.clone(),
            visual_projection: Linear::new(store, rng, "fusion.visual_projection", visual_dim, d)?,
            motion_projection: Linear::new(store, rng, "fusion.motion_projection", motion_dim, d)?,
            type_rows: store.add("fusion.type_rows", &[2, d], Init::weights(), rng)?,
            layers: (0..config.layers)
                .map(|i| {
                    EncoderLayer::new(
                        store,
                        rng,
                        &format!("fusion.layer{i}"),
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

    /// Projects `visual [n_vis, d_vis]` and `motion [n_mo, d_mo]` to `d_ffa`,
    /// concatenates them and adds the type rows.
    pub fn project_modalities<T: Real>(&self, tape: &mut Tape<'_, T>, visual: Var, motion: Var) -> Result<FusionInput> {
        let n_vis = tape.shape(visual)[0];
        let n_mo = tape.shape(motion)[0];
        let rv = self.visual_projection.forward(tape, visual)?;
        let rm = self.motion_projection.forward(tape, motion)?;
        let r = tape.concat(&[rv, rm], 0)?;
        let types: Vec<usize> = std::iter::repeat_n(VISUAL_TYPE, n_vis)
            .chain(std::iter::repeat_n(MOTION_TYPE, n_mo))
            .collect();
        let table = tape.param(self.type_rows)?;
        let c = tape.embedding_lookup(table, &types)?;
        let tokens = tape.add(r, c)?;
        FusionInput::new(tape, tokens, n_vis, n_mo)
    }

    /// `VID(V)`, `[1, d_ffa]`.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<'_, T>, input: &FusionInput) -> Result<Var> {
        let mut x = input.tokens;
        for layer in &self.layers {
            x = layer.forward(tape, x, None)?;
        }
        let rows = tape.gather_rows(x, &input.designated_rows())?;
        let vid = tape.mean_axis(rows, 0)?;
        tape.reshape(vid, &[1, self.config.dim])
    }
}
