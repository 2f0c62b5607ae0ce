use rayon::prelude::*;

use super::config::EpisodeConfig;
use crate::data::{sample_episode, Episode, NormStats, Split};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::tensor::{Ctx, Mode, ParamSet, Tensor};

/// Anything that turns an episode into `[M,N]` logits.
pub trait EpisodeScorer: Sync {
    fn score(&self, split: &Split, episode: &Episode) -> Result<Tensor>;
}

/// Eval-mode forward of a trained model.
pub struct ModelScorer<'a> {
    pub model: ModelConfig,
    pub params: &'a ParamSet,
    pub norm: NormStats,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: ModelConfig, params: &'a ParamSet, norm: NormStats) -> Self {
        Self { model, params, norm }
    }
}

impl EpisodeScorer for ModelScorer<'_> {
    fn score(&self, split: &Split, e: &Episode) -> Result<Tensor> {
        let support = split.batch(&e.support, &self.norm)?;
        let query = split.batch(&e.query, &self.norm)?;
        let mut ctx = Ctx::new(self.params, Mode::Eval, false);
        let logits = model::episode_forward(&mut ctx, &self.model, &support, e.shot, &query)?;
        Ok(ctx.graph.value(logits).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 95% interval, `1.96·σ/√E` with the sample σ.
    pub ci95: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let e = accuracies.len();
        let mean = accuracies.iter().sum::<f64>() / e as f64;
        let sd = if e > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            episodes: e,
            mean,
            ci95: 1.96 * sd / (e as f64).sqrt(),
            accuracies,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Samples `episodes` tasks from `split` with a fresh stream seeded by
/// `seed` and scores them in parallel; results are merged in episode order.
pub fn evaluate(
    scorer: &dyn EpisodeScorer,
    split: &Split,
    ep: &EpisodeConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Precondition("evaluation needs at least one episode".into()));
    }
    let mut rng = super::stream(seed, 0);
    let tasks = (0..episodes)
        .map(|_| sample_episode(split, ep.way, ep.shot, ep.query_per_class, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let accuracies = tasks
        .par_iter()
        .map(|e| {
            let logits = scorer.score(split, e)?;
            let (m, n) = (e.query.len(), e.way);
            if logits.shape() != [m, n] {
                return Err(Error::Dimension(format!(
                    "scorer returned {:?} for a {m}x{n} episode",
                    logits.shape()
                )));
            }
            let correct = logits
                .data()
                .chunks(n)
                .zip(&e.query_labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            Ok(correct as f64 / m as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accuracies))
}
