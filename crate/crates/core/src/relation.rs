//! Relation scores between captions and videos and the batch contrastive
//! loss over them.

use rand::Rng;

use crate::config::{Denominator, LossConfig, RelationConfig, RelationHead};
use crate::error::{Error, Result};
use crate::tensor::nn::Linear;
use crate::tensor::{CustomOp, DenseArray, ParamStore, Real, Tape, Var};

/// `(cos(cap, vid) + 1) / 2`, in `[0, 1]`.
pub fn relation_score(cap: &[f64], vid: &[f64]) -> Result<f64> {
    if cap.len() != vid.len() {
        return Err(Error::shape(format!("relation of {} and {} dims", cap.len(), vid.len())));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (nc, nv) = (norm(cap), norm(vid));
    if nc == 0.0 {
        return Err(Error::DegenerateEmbedding("caption".into()));
    }
    if nv == 0.0 {
        return Err(Error::DegenerateEmbedding("video".into()));
    }
    let dot: f64 = cap.iter().zip(vid).map(|(a, b)| a * b).sum();
    Ok(((dot / (nc * nv)).clamp(-1.0, 1.0) + 1.0) / 2.0)
}

/// Differentiable `(cos + 1) / 2` between every row of `caps [B, d]` and
/// every row of `vids [B', d]`: entry `(j, i)` scores caption `j` against
/// video `i`.
pub fn cosine_relation<T: Real>(tape: &mut Tape<'_, T>, caps: Var, vids: Var) -> Result<Var> {
    let c = tape.l2_normalize_rows(caps)?;
    let v = tape.l2_normalize_rows(vids)?;
    let vt = tape.transpose(v)?;
    let cos = tape.matmul(c, vt)?;
    let half = tape.scale(cos, 0.5)?;
    tape.add_scalar(half, 0.5)
}

/// Linear projections into the shared relation space and the score head.
#[derive(Clone, Debug)]
pub struct RelationModule {
    pub config: RelationConfig,
    pub caption_projection: Linear,
    pub video_projection: Linear,
    /// hidden and output layers of the optional learned head
    pub mlp: Option<(Linear, Linear)>,
}

impl RelationModule {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: &RelationConfig,
        caption_dim: usize,
        video_dim: usize,
    ) -> Result<Self> {
        let d = config.dim;
        let mlp = match config.head {
            RelationHead::Cosine => None,
            RelationHead::Mlp => Some((
                Linear::new(store, rng, "relation.head.hidden", 2 * d, config.mlp_hidden)?,
                Linear::new(store, rng, "relation.head.output", config.mlp_hidden, 1)?,
            )),
        };
        Ok(Self {
            config: config.clone(),
            caption_projection: Linear::new(store, rng, "relation.caption_projection", caption_dim, d)?,
            video_projection: Linear::new(store, rng, "relation.video_projection", video_dim, d)?,
            mlp,
        })
    }

    pub fn project_captions<T: Real>(&self, tape: &mut Tape<'_, T>, caps: Var) -> Result<Var> {
        self.caption_projection.forward(tape, caps)
    }

    pub fn project_videos<T: Real>(&self, tape: &mut Tape<'_, T>, vids: Var) -> Result<Var> {
        self.video_projection.forward(tape, vids)
    }

    /// Scores between already projected captions `[Bc, d_rn]` and videos
    /// `[Bv, d_rn]`, `[Bc, Bv]`.
    pub fn score_projected<T: Real>(&self, tape: &mut Tape<'_, T>, caps: Var, vids: Var) -> Result<Var> {
        let Some((hidden, output)) = &self.mlp else {
            return cosine_relation(tape, caps, vids);
        };
        let (bc, bv) = (tape.shape(caps)[0], tape.shape(vids)[0]);
        let cap_rows: Vec<usize> = (0..bc).flat_map(|j| std::iter::repeat_n(j, bv)).collect();
        let vid_rows: Vec<usize> = (0..bc).flat_map(|_| 0..bv).collect();
        let c = tape.gather_rows(caps, &cap_rows)?;
        let v = tape.gather_rows(vids, &vid_rows)?;
        let pairs = tape.concat(&[c, v], 1)?;
        let h = hidden.forward(tape, pairs)?;
        let h = tape.gelu(h)?;
        let s = output.forward(tape, h)?;
        let s = tape.sigmoid(s)?;
        tape.reshape(s, &[bc, bv])
    }

    /// Score matrix of a batch: caption embeddings `[B, d_txt]` against video
    /// embeddings `[B, d_ffa]`.
    pub fn score_batch<T: Real>(&self, tape: &mut Tape<'_, T>, caps: Var, vids: Var) -> Result<Var> {
        let (bc, bv) = (tape.shape(caps)[0], tape.shape(vids)[0]);
        if bc != bv {
            return Err(Error::Batch(format!("{bc} captions but {bv} videos")));
        }
        let pc = self.project_captions(tape, caps)?;
        let pv = self.project_videos(tape, vids)?;
        self.score_projected(tape, pc, pv)
    }
}

/// Loss of one direction: for each line `i` (entries `x_j`, positive at
/// `j = i`), `-x_i / tau + log sum_{j in D} exp(x_j / tau)`, averaged. With
/// `grad`, accumulates `scale * dL/dx` there.
fn directional_loss(
    scores: &[f64],
    b: usize,
    columns: bool,
    cfg: &LossConfig,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let tau = cfg.temperature;
    let at = |line: usize, j: usize| if columns { j * b + line } else { line * b + j };
    let mut total = 0.0;
    let mut grad = grad;
    let mut weights = vec![0.0; b];
    for line in 0..b {
        let included = |j: usize| j != line || cfg.denominator == Denominator::StandardInclusive;
        let max = (0..b)
            .filter(|&j| included(j))
            .map(|j| scores[at(line, j)] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..b {
            weights[j] = if included(j) { (scores[at(line, j)] / tau - max).exp() } else { 0.0 };
            sum += weights[j];
        }
        total += -scores[at(line, line)] / tau + max + sum.ln();
        if let Some(g) = grad.as_deref_mut() {
            let k = scale / b as f64 / tau;
            for j in 0..b {
                g[at(line, j)] += k * weights[j] / sum;
            }
            g[at(line, line)] -= k;
        }
    }
    total / b as f64
}

fn check_scores(shape: &[usize], cfg: &LossConfig) -> Result<usize> {
    cfg.validate()?;
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Batch(format!("score matrix must be square, got {shape:?}")));
    }
    let b = shape[0];
    if b < 2 && cfg.denominator == Denominator::PaperExclusive {
        return Err(Error::config(
            "a batch of one leaves the negatives-only denominator empty; use at least 2 pairs or the inclusive denominator",
        ));
    }
    Ok(b)
}

/// Contrastive loss of a row-major `B x B` score matrix whose entry `(j, i)`
/// scores caption `j` against video `i`.
pub fn contrastive_loss_value(scores: &[f64], b: usize, cfg: &LossConfig) -> Result<f64> {
    if scores.len() != b * b {
        return Err(Error::Batch(format!("{} scores for a batch of {b}", scores.len())));
    }
    check_scores(&[b, b], cfg)?;
    Ok(loss_and_grad(scores, b, cfg, None))
}

fn loss_and_grad(scores: &[f64], b: usize, cfg: &LossConfig, mut grad: Option<&mut [f64]>) -> f64 {
    if cfg.symmetric {
        let a = directional_loss(scores, b, true, cfg, 0.5, grad.as_deref_mut());
        let r = directional_loss(scores, b, false, cfg, 0.5, grad);
        0.5 * (a + r)
    } else {
        directional_loss(scores, b, true, cfg, 1.0, grad)
    }
}

struct ContrastiveLoss {
    cfg: LossConfig,
    b: usize,
}

impl<T: Real> CustomOp<T> for ContrastiveLoss {
    fn name(&self) -> &'static str {
        "contrastive_loss"
    }

    fn backward(&self, inputs: &[&DenseArray<T>], _output: &DenseArray<T>, grad_output: &[T], grad_inputs: &mut [Vec<T>]) {
        let scores = inputs[0].to_f64_vec();
        let mut g = vec![0.0; scores.len()];
        loss_and_grad(&scores, self.b, &self.cfg, Some(&mut g));
        let go = grad_output[0].as_f64();
        for (dst, v) in grad_inputs[0].iter_mut().zip(g) {
            *dst = *dst + T::of(go * v);
        }
    }
}

/// Scalar loss node over a score matrix `[B, B]`.
pub fn contrastive_loss<T: Real>(tape: &mut Tape<'_, T>, scores: Var, cfg: &LossConfig) -> Result<Var> {
    let b = check_scores(tape.shape(scores), cfg)?;
    let value = loss_and_grad(&tape.value(scores).to_f64_vec(), b, cfg, None);
    tape.custom(
        vec![scores],
        DenseArray::scalar(T::of(value)),
        Box::new(ContrastiveLoss { cfg: cfg.clone(), b }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_cases() {
        assert!((relation_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(relation_score(&[1.0, 2.0], &[-1.0, -2.0]).unwrap().abs() < 1e-12);
        assert!((relation_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(relation_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateEmbedding(_))));
    }

    #[test]
    fn hand_values() {
        let cfg = LossConfig::default();
        let l = contrastive_loss_value(&[1.0, 0.0, 0.0, 1.0], 2, &cfg).unwrap();
        assert!((l + 20.0).abs() < 1e-9);
        let l = contrastive_loss_value(&[0.3; 4], 2, &cfg).unwrap();
        assert!(l.abs() < 1e-9);
        assert!(contrastive_loss_value(&[1.0], 1, &cfg).is_err());
    }
}
