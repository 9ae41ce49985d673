//! The full retrieval network: encoders, fusion, relation head and the
//! ablation switch that selects how the video embedding is formed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::caption::{tokenize, CaptionEncoder, Vocabulary};
use crate::clip::VideoClip;
use crate::config::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::FeatureFusion;
use crate::motion::{MotionEncoder, MotionRecord};
use crate::relation::RelationModule;
use crate::tensor::nn::Linear;
use crate::tensor::{ParamStore, Real, Tape, Var};
use crate::visual::VisualEncoder;

/// Module layout of the network. Every submodule exists regardless of the
/// ablation, so checkpoints always hold the same parameter set.
#[derive(Clone, Debug)]
pub struct Network {
    pub visual: VisualEncoder,
    pub motion: MotionEncoder,
    pub caption: CaptionEncoder,
    pub fusion: FeatureFusion,
    /// `[VIS; MO] -> d_ffa` for the concatenation ablation
    pub concat_projection: Linear,
    pub relation: RelationModule,
}

impl Network {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = VisualEncoder::new(store, &mut rng, &config.visual)?;
        let motion = MotionEncoder::new(store, &mut rng, &config.motion)?;
        let caption = CaptionEncoder::new(store, &mut rng, &config.caption, vocab_size)?;
        let fusion = FeatureFusion::new(store, &mut rng, &config.fusion, visual.dim(), motion.dim())?;
        let concat_projection = Linear::new(
            store,
            &mut rng,
            "fusion.concat_projection",
            visual.dim() + motion.dim(),
            fusion.dim(),
        )?;
        let relation = RelationModule::new(store, &mut rng, &config.relation, caption.dim(), fusion.dim())?;
        Ok(Self {
            visual,
            motion,
            caption,
            fusion,
            concat_projection,
            relation,
        })
    }

    /// Fails when `ablation` cannot run on clips of `frames` frames.
    pub fn check_frames(&self, ablation: Ablation, frames: usize) -> Result<()> {
        if ablation.uses_motion() && frames < self.motion.min_frames() {
            return Err(Error::config(format!(
                "{ablation} needs at least {} frames for motion extraction, got {frames}",
                self.motion.min_frames()
            )));
        }
        if ablation.uses_visual() && frames > self.visual.config.max_frames {
            return Err(Error::config(format!(
                "{frames} frames exceed the visual temporal table of {}",
                self.visual.config.max_frames
            )));
        }
        Ok(())
    }

    /// `VID(V)` under the given ablation, `[1, d_ffa]`. `imported` replaces
    /// the motion extractor output when given.
    pub fn encode_video<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        clip: &VideoClip,
        ablation: Ablation,
        imported: Option<&MotionRecord>,
    ) -> Result<Var> {
        self.check_frames(ablation, clip.num_frames())?;
        let motion = |tape: &mut Tape<'_, T>| {
            let seq = match imported {
                Some(r) => self.motion.imported(tape, r)?,
                None => self.motion.extract(tape, clip)?,
            };
            let e = self.motion.build_sequence(tape, &seq)?;
            self.motion.encode_sequence(tape, e)
        };
        match ablation {
            Ablation::VisualOnly => {
                let vis = self.visual.encode(tape, clip)?;
                self.fusion.visual_projection.forward(tape, vis)
            }
            Ablation::MotionOnly => {
                let mo = motion(tape)?;
                self.fusion.motion_projection.forward(tape, mo.embedding)
            }
            Ablation::VisMoConcat => {
                let vis = self.visual.encode(tape, clip)?;
                let mo = motion(tape)?;
                let both = tape.concat(&[vis, mo.embedding], 1)?;
                self.concat_projection.forward(tape, both)
            }
            Ablation::FullFfa => {
                let vis = self.visual.encode(tape, clip)?;
                let mo = motion(tape)?;
                let input = self.fusion.project_modalities(tape, vis, mo.tokens)?;
                self.fusion.fuse(tape, &input)
            }
        }
    }

    /// `CAP(y)`, `[1, d_txt]`.
    pub fn encode_caption<T: Real>(&self, tape: &mut Tape<'_, T>, text: &str, vocab: &Vocabulary) -> Result<Var> {
        let tokens = tokenize(text, vocab, self.caption.config.max_len);
        self.caption.encode(tape, &tokens)
    }
}

/// A network together with its parameters and vocabulary.
#[derive(Clone, Debug)]
pub struct TvprModel<T: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub net: Network,
}

impl<T: Real> TvprModel<T> {
    pub fn new(config: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, config, vocab.len(), seed)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            net,
        })
    }

    /// Relation-space embeddings of clips (rows of `[N, d_rn]`), computed one
    /// clip at a time without recording gradients.
    pub fn video_embeddings(
        &self,
        clips: &[VideoClip],
        ablation: Ablation,
        imported: &dyn Fn(&str) -> Option<MotionRecord>,
    ) -> Result<Vec<Vec<T>>> {
        clips
            .iter()
            .map(|clip| {
                let mut tape = Tape::with_params(&self.store);
                let record = imported(&clip.clip_id);
                let v = self.net.encode_video(&mut tape, clip, ablation, record.as_ref())?;
                let p = self.net.relation.project_videos(&mut tape, v)?;
                Ok(tape.value(p).data().to_vec())
            })
            .collect()
    }

    pub fn caption_embeddings(&self, texts: &[String]) -> Result<Vec<Vec<T>>> {
        texts
            .iter()
            .map(|text| {
                let mut tape = Tape::with_params(&self.store);
                let c = self.net.encode_caption(&mut tape, text, &self.vocab)?;
                let p = self.net.relation.project_captions(&mut tape, c)?;
                Ok(tape.value(p).data().to_vec())
            })
            .collect()
    }

    /// Relation scores `[captions, videos]` between projected embeddings.
    pub fn score_embeddings(&self, caps: &[Vec<T>], vids: &[Vec<T>]) -> Result<Vec<Vec<f64>>> {
        let stack = |rows: &[Vec<T>]| -> Result<crate::tensor::DenseArray<T>> {
            let d = rows.first().map_or(0, Vec::len);
            crate::tensor::DenseArray::new(vec![rows.len(), d], rows.concat())
        };
        if caps.is_empty() || vids.is_empty() {
            return Err(Error::Batch("scoring needs at least one caption and one video".into()));
        }
        let mut tape = Tape::with_params(&self.store);
        let c = tape.constant(stack(caps)?)?;
        let v = tape.constant(stack(vids)?)?;
        let s = self.net.relation.score_projected(&mut tape, c, v)?;
        let nv = vids.len();
        Ok(tape.value(s).to_f64_vec().chunks(nv).map(<[f64]>::to_vec).collect())
    }
}
