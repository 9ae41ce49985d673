//! Text-to-video retrieval metrics. Every caption is a query against the
//! gallery of unique videos.

use serde::{Deserialize, Serialize};

use crate::config::Ablation;
use crate::dataset::{MotionBank, Sample};
use crate::error::{Error, Result};
use crate::model::TvprModel;
use crate::tensor::Real;

pub const RECALL_CUTOFFS: [usize; 4] = [1, 5, 10, 50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// rank of the correct video for each query, starting at 1
    pub ranks: Vec<usize>,
    pub gallery_size: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r50: f64,
    pub median_rank: f64,
}

impl RetrievalResult {
    pub fn from_ranks(ranks: Vec<usize>, gallery_size: usize) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::config("no queries to evaluate"));
        }
        if let Some(&r) = ranks.iter().find(|&&r| r == 0 || r > gallery_size) {
            return Err(Error::Index { index: r, len: gallery_size });
        }
        Ok(Self {
            r1: recall_at(&ranks, 1),
            r5: recall_at(&ranks, 5),
            r10: recall_at(&ranks, 10),
            r50: recall_at(&ranks, 50),
            median_rank: median_rank(&ranks),
            ranks,
            gallery_size,
        })
    }

    pub fn recalls(&self) -> [f64; 4] {
        [self.r1, self.r5, self.r10, self.r50]
    }
}

/// Percentage of queries whose rank is at most `n`.
pub fn recall_at(ranks: &[usize], n: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= n).count() as f64 * 100.0 / ranks.len() as f64
}

/// Median of the ranks; the mean of the middle two for an even count.
pub fn median_rank(ranks: &[usize]) -> f64 {
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Rank of `truth` in one row of scores: one plus the number of videos that
/// score higher, or score the same and have a smaller clip id.
pub fn rank_of(scores: &[f64], truth: usize, clip_ids: &[String]) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .zip(clip_ids)
        .filter(|&(&x, id)| x > s || (x == s && id < &clip_ids[truth]))
        .count()
}

/// Ranks for a `[queries, gallery]` score matrix where query `q` belongs to
/// video `truth[q]`.
pub fn ranks_from_scores(scores: &[Vec<f64>], truth: &[usize], clip_ids: &[String]) -> Result<Vec<usize>> {
    if scores.len() != truth.len() {
        return Err(Error::Batch(format!("{} score rows for {} queries", scores.len(), truth.len())));
    }
    scores
        .iter()
        .zip(truth)
        .map(|(row, &t)| {
            if row.len() != clip_ids.len() || t >= row.len() {
                return Err(Error::Batch(format!(
                    "score row of {} for a gallery of {} (truth {t})",
                    row.len(),
                    clip_ids.len()
                )));
            }
            Ok(rank_of(row, t, clip_ids))
        })
        .collect()
}

/// Scores of every caption against every video of `samples`. Queries are
/// ordered video by video, both captions of a video in turn.
pub fn score_split<T: Real>(
    model: &TvprModel<T>,
    samples: &[Sample],
    ablation: Ablation,
    motion: &MotionBank,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::config("the evaluation split is empty"));
    }
    let clips: Vec<_> = samples.iter().map(|s| s.clip.clone()).collect();
    let vids = model.video_embeddings(&clips, ablation, &|id| motion.get(id).cloned())?;
    let texts: Vec<String> = samples.iter().flat_map(|s| s.captions.iter().cloned()).collect();
    let caps = model.caption_embeddings(&texts)?;
    let truth = (0..samples.len()).flat_map(|i| [i, i]).collect();
    Ok((model.score_embeddings(&caps, &vids)?, truth))
}

pub fn evaluate<T: Real>(
    model: &TvprModel<T>,
    samples: &[Sample],
    ablation: Ablation,
    motion: &MotionBank,
) -> Result<RetrievalResult> {
    let (scores, truth) = score_split(model, samples, ablation, motion)?;
    let ids: Vec<String> = samples.iter().map(|s| s.clip.clip_id.clone()).collect();
    RetrievalResult::from_ranks(ranks_from_scores(&scores, &truth, &ids)?, samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_definition() {
        assert_eq!(median_rank(&[1, 3, 5]), 3.0);
        assert_eq!(median_rank(&[1, 2, 3, 10]), 2.5);
    }

    #[test]
    fn ties_follow_clip_id_order() {
        let ids: Vec<String> = ["b", "a", "c"].map(String::from).to_vec();
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 0, &ids), 2);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 1, &ids), 1);
        assert_eq!(rank_of(&[0.5, 0.5, 0.5], 2, &ids), 3);
    }

    #[test]
    fn perfect_scores() {
        let r = RetrievalResult::from_ranks(vec![1; 6], 3).unwrap();
        assert_eq!((r.r1, r.median_rank), (100.0, 1.0));
    }
}
