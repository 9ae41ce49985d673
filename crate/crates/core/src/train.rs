//! Adam and the contrastive training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caption::Vocabulary;
use crate::config::TrainConfig;
use crate::dataset::{MotionBank, Sample};
use crate::error::{Error, Result};
use crate::model::TvprModel;
use crate::relation::contrastive_loss;
use crate::tensor::{DenseArray, ParamStore, Real, Tape};

/// Adam with bias correction. Moments persist across steps and are indexed
/// like the store's parameters.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: Vec<DenseArray<T>>,
    second: Vec<DenseArray<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64, betas: (f64, f64), eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| DenseArray::zeros(p.value.shape())).collect();
        Self {
            learning_rate,
            betas,
            eps,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients held in `store`. Every parameter must
    /// have a gradient buffer, even an all-zero one.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().map(|(_, p)| p).find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.as_ref().expect("checked above").data();
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let update = self.learning_rate * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

pub struct TrainOutcome {
    pub model: TvprModel<f32>,
    pub log: Vec<EpochLog>,
}

/// Vocabulary over both captions of every training sample.
pub fn training_vocabulary(samples: &[Sample], min_count: usize) -> Result<Vocabulary> {
    let corpus: Vec<&str> = samples.iter().flat_map(|s| s.captions.iter().map(String::as_str)).collect();
    Vocabulary::build(&corpus, min_count)
}

/// Trains a fresh model. Each epoch shuffles the samples into batches of
/// distinct videos and pairs every video with one of its captions drawn at
/// random; a trailing batch of one is dropped.
pub fn train(
    cfg: &TrainConfig,
    samples: &[Sample],
    motion: &MotionBank,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::config("the training split is empty"));
    }
    if samples.len() < 2 {
        return Err(Error::config("training needs at least 2 samples to form a contrastive batch"));
    }
    let vocab = training_vocabulary(samples, cfg.model.caption.min_count)?;
    let mut model = TvprModel::<f32>::new(&cfg.model, vocab, cfg.seed)?;
    model.net.check_frames(cfg.ablation, cfg.num_frames)?;
    if let Some(s) = samples.iter().find(|s| s.clip.num_frames() != cfg.num_frames) {
        return Err(Error::Validation {
            clip_id: s.clip.clip_id.clone(),
            reason: format!("has {} frames, expected {}", s.clip.num_frames(), cfg.num_frames),
        });
    }
    let mut adam = Adam::new(&model.store, cfg.learning_rate, cfg.betas, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let picks: Vec<usize> = batch.iter().map(|_| rng.gen_range(0..2)).collect();
            let dropout_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(adam.steps_taken());
            total += train_step(&mut model, &mut adam, cfg, samples, batch, &picks, motion, dropout_seed)?;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: total / batches as f64,
            batches,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut TvprModel<f32>,
    adam: &mut Adam<f32>,
    cfg: &TrainConfig,
    samples: &[Sample],
    batch: &[usize],
    picks: &[usize],
    motion: &MotionBank,
    dropout_seed: u64,
) -> Result<f64> {
    let TvprModel { store, net, vocab, .. } = model;
    let grads = {
        let mut tape = Tape::with_params(&*store).training(dropout_seed);
        let mut vids = Vec::with_capacity(batch.len());
        let mut caps = Vec::with_capacity(batch.len());
        for (&i, &pick) in batch.iter().zip(picks) {
            let s = &samples[i];
            vids.push(net.encode_video(&mut tape, &s.clip, cfg.ablation, motion.get(&s.clip.clip_id))?);
            caps.push(net.encode_caption(&mut tape, &s.captions[pick], vocab)?);
        }
        let vids = tape.concat(&vids, 0)?;
        let caps = tape.concat(&caps, 0)?;
        let scores = net.relation.score_batch(&mut tape, caps, vids)?;
        let loss = contrastive_loss(&mut tape, scores, &cfg.loss)?;
        tape.backward(loss)?
    };
    store.zero_grad();
    grads.accumulate_into(store)?;
    adam.step(store)?;
    Ok(grads.loss().as_f64())
}
