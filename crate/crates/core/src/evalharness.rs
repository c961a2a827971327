//! Leave-one-out ranking against sampled negatives, with random and
//! popularity floors.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Phase, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{score, SequenceEncoder};
use crate::numcore::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            n_candidates: 100,
            seed: 2024,
        }
    }
}

/// The ground truth sits at `truth_pos` among `n + 1` candidates; its slot is
/// drawn from the same seeded stream as the negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user: usize,
    pub truth: usize,
    pub truth_pos: usize,
    pub items: Vec<usize>,
    pub seed: u64,
}

impl CandidateSet {
    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.items
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.truth_pos)
            .map(|(_, v)| *v)
    }
}

/// Samples `n` negatives without replacement from the items the user never
/// touched, seeded by `seed ^ user`.
pub fn sample_candidates(split: &SplitDataset, user: usize, phase: Phase, n: usize, seed: u64) -> Result<CandidateSet> {
    let seen = split.interacted(user);
    let pool: Vec<usize> = (0..split.n_items()).filter(|i| !seen.contains(i)).collect();
    if pool.len() < n {
        return Err(Error::Evaluation(format!(
            "user {user} has {} non-interacted items, {n} needed",
            pool.len()
        )));
    }
    let user_seed = seed ^ user as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
    let mut items: Vec<usize> = sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    let truth = split.target(user, phase);
    let truth_pos = rng.random_range(0..=n);
    items.insert(truth_pos, truth);
    Ok(CandidateSet {
        user,
        truth,
        truth_pos,
        items,
        seed: user_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: usize,
    pub ndcg: f64,
    pub recall: f64,
}

/// 1-based rank of `scores[truth_pos]` after a descending sort that breaks ties
/// by ascending candidate position.
pub fn rank_metrics(scores: &[f64], truth_pos: usize, k: usize) -> Result<RankResult> {
    if let Some(bad) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Evaluation(format!("score for candidate {bad} is NaN")));
    }
    if truth_pos >= scores.len() {
        return Err(Error::Evaluation(format!(
            "truth position {truth_pos} outside {} scores",
            scores.len()
        )));
    }
    let s = scores[truth_pos];
    let rank = 1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth_pos))
        .count();
    let (ndcg, recall) = if rank <= k {
        (1.0 / ((rank + 1) as f64).log2(), 1.0)
    } else {
        (0.0, 0.0)
    };
    Ok(RankResult { rank, ndcg, recall })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetric {
    pub user: usize,
    pub rank: usize,
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub phase: Phase,
    pub k: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub users: usize,
    /// Users skipped for lack of non-interacted items.
    pub excluded: usize,
    pub per_user: Vec<UserMetric>,
    pub config_hash: Option<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap()
    }

    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user,rank,ndcg,recall\n");
        for m in &self.per_user {
            writeln!(out, "{},{},{:?},{:?}", m.user, m.rank, m.ndcg, m.recall).unwrap();
        }
        out
    }
}

/// Scores every user's candidate set with `scorer` (in parallel) and averages
/// the metrics.
pub fn evaluate_with<F>(split: &SplitDataset, phase: Phase, config: &EvalConfig, label: &str, scorer: F) -> Result<MetricsReport>
where
    F: Fn(&CandidateSet) -> Result<Vec<f64>> + Sync,
{
    let results: Vec<Result<Option<UserMetric>>> = (0..split.n_users())
        .into_par_iter()
        .map(|u| {
            let cands = match sample_candidates(split, u, phase, config.n_candidates, config.seed) {
                Ok(c) => c,
                Err(Error::Evaluation(msg)) => {
                    log::warn!("{msg}; user excluded");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let scores = scorer(&cands)?;
            let r = rank_metrics(&scores, cands.truth_pos, config.k)?;
            Ok(Some(UserMetric {
                user: u,
                rank: r.rank,
                ndcg: r.ndcg,
                recall: r.recall,
            }))
        })
        .collect();
    let mut per_user = Vec::new();
    let mut excluded = 0;
    for r in results {
        match r? {
            Some(m) => per_user.push(m),
            None => excluded += 1,
        }
    }
    let n = per_user.len();
    if n == 0 {
        return Err(Error::Evaluation("no user could be evaluated".into()));
    }
    let ndcg = per_user.iter().map(|m| m.ndcg).sum::<f64>() / n as f64;
    let recall = per_user.iter().map(|m| m.recall).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        label: label.to_string(),
        phase,
        k: config.k,
        ndcg,
        recall,
        users: n,
        excluded,
        per_user,
        config_hash: None,
    })
}

/// Ranks candidates by `h_u · x_j`, with `h_u` the encoder's output on the
/// phase history.
pub fn evaluate(
    encoder: &SequenceEncoder,
    tokens: &DenseMatrix,
    split: &SplitDataset,
    phase: Phase,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    evaluate_with(split, phase, config, "model", |c| {
        let h = encoder.encode(tokens, split.history(c.user, phase), false)?;
        Ok(score(&h.user_rep, tokens, &c.items))
    })
}

pub fn random_baseline(split: &SplitDataset, phase: Phase, config: &EvalConfig) -> Result<MetricsReport> {
    evaluate_with(split, phase, config, "random", |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed.rotate_left(17) ^ 0x5eed);
        Ok((0..c.items.len()).map(|_| rng.random::<f64>()).collect())
    })
}

pub fn popularity_baseline(split: &SplitDataset, phase: Phase, config: &EvalConfig) -> Result<MetricsReport> {
    let counts = split.train_item_counts();
    evaluate_with(split, phase, config, "popularity", |c| {
        Ok(c.items.iter().map(|&i| counts[i] as f64).collect())
    })
}

pub fn baselines(split: &SplitDataset, phase: Phase, config: &EvalConfig) -> Result<Vec<MetricsReport>> {
    Ok(vec![
        random_baseline(split, phase, config)?,
        popularity_baseline(split, phase, config)?,
    ])
}
