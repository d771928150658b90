use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{expert_policy, DialogueEnv, EntityCounts};
use crate::error::{Error, Result};
use crate::policy::{rollout, run_episode, PolicyNet, Trajectory};
use crate::reward::{HandcraftedRewardConfig, RewardHandle};

/// Harmonic mean of precision (`correct / provided`) and recall
/// (`correct / required`); zero when nothing matched.
pub fn entity_f1(counts: EntityCounts, required: usize) -> f64 {
    if counts.correct == 0 || counts.provided == 0 || required == 0 {
        return if required == 0 && counts.provided == 0 {
            1.0
        } else {
            0.0
        };
    }
    let p = counts.correct as f64 / counts.provided as f64;
    let r = counts.correct as f64 / required as f64;
    2.0 * p * r / (p + r)
}

pub fn trajectory_f1(t: &Trajectory) -> f64 {
    entity_f1(
        EntityCounts {
            provided: t.provided,
            correct: t.correct,
        },
        t.required,
    )
}

pub fn success_rate(batch: &[Trajectory]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::State("success rate of an empty batch".into()));
    }
    Ok(batch.iter().filter(|t| t.success).count() as f64 / batch.len() as f64)
}

pub fn avg_turns(batch: &[Trajectory]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::State("average turns of an empty batch".into()));
    }
    Ok(batch.iter().map(|t| t.turns()).sum::<usize>() as f64 / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub dialogues: usize,
    pub entity_f1: f64,
    pub success_rate: f64,
    pub avg_turns: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entity_f1: f64,
    pub success_rate: f64,
    pub avg_turns: f64,
    /// Keyed by the number of goal domains.
    pub by_domains: BTreeMap<usize, Breakdown>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

fn summarize(batch: &[Trajectory]) -> Result<Breakdown> {
    Ok(Breakdown {
        dialogues: batch.len(),
        entity_f1: batch.iter().map(trajectory_f1).sum::<f64>() / batch.len().max(1) as f64,
        success_rate: success_rate(batch)?,
        avg_turns: avg_turns(batch)?,
    })
}

/// Metrics of a batch of finished dialogues.
pub fn report(batch: &[Trajectory], seeds: Vec<u64>, config_hash: &str) -> Result<MetricReport> {
    let all = summarize(batch)?;
    let mut groups: BTreeMap<usize, Vec<Trajectory>> = BTreeMap::new();
    for t in batch {
        groups.entry(t.domains).or_default().push(t.clone());
    }
    let by_domains = groups
        .into_iter()
        .map(|(k, v)| Ok((k, summarize(&v)?)))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        entity_f1: all.entity_f1,
        success_rate: all.success_rate,
        avg_turns: all.avg_turns,
        by_domains,
        seeds,
        config_hash: config_hash.to_string(),
    })
}

/// Greedy rollouts of `policy` on `n` goals drawn from `rng`.
pub fn evaluate_policy(
    env: &mut DialogueEnv,
    policy: &PolicyNet,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Trajectory>> {
    let handle = RewardHandle::Handcrafted(HandcraftedRewardConfig::default());
    (0..n).map(|_| rollout(env, policy, &handle, rng, false)).collect()
}

/// Rollouts of the rule-based expert.
pub fn evaluate_expert(env: &mut DialogueEnv, n: usize, rng: &mut impl Rng) -> Result<Vec<Trajectory>> {
    let handle = RewardHandle::Handcrafted(HandcraftedRewardConfig::default());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        env.reset(rng);
        out.push(run_episode(env, &handle, rng, |env, _, _| {
            Ok((expert_policy(env.state()?, env.actions()), 0.0))
        })?);
    }
    Ok(out)
}

/// Rollouts of the uniform-random policy.
pub fn evaluate_random(env: &mut DialogueEnv, n: usize, rng: &mut impl Rng) -> Result<Vec<Trajectory>> {
    let handle = RewardHandle::Handcrafted(HandcraftedRewardConfig::default());
    let k = env.actions().len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        env.reset(rng);
        out.push(run_episode(env, &handle, rng, |_, _, rng| {
            Ok((rng.random_range(0..k), -(k as f64).ln()))
        })?);
    }
    Ok(out)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (the Mann-Whitney form of ROC-AUC).
pub fn roc_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::State("ROC-AUC needs scores on both sides".into()));
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&x| (x, true))
        .chain(negative.iter().map(|&x| (x, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}
