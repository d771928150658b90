//! Dialogue policy `π(a | s)` with a value baseline, trained by policy
//! gradient against any reward handle.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::DialogueEnv;
use crate::error::{Error, Result};
use crate::math::{argmax, dense_forward, Activation, Adam, Matrix, ParamSet, Tape, Var};
use crate::reward::RewardHandle;
use crate::seed::{stream_rng, STREAM_INIT, STREAM_POLICY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Reinforce,
    Ppo,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reinforce" => Ok(Algorithm::Reinforce),
            "ppo" => Ok(Algorithm::Ppo),
            _ => Err(Error::Config(format!(
                "unknown policy algorithm {s:?} (reinforce, ppo)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub lr: f64,
    /// Training budget in episodes.
    pub episodes: usize,
    /// Episodes per update.
    pub batch_episodes: usize,
    pub discount: f64,
    /// Entropy bonus weight `β`.
    pub entropy: f64,
    pub value_coef: f64,
    pub algorithm: Algorithm,
    pub clip: f64,
    pub ppo_epochs: usize,
    /// Adds `+1` to the last reward of successful episodes.
    pub terminal_bonus: bool,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            lr: 3e-3,
            episodes: 5000,
            batch_episodes: 16,
            discount: 0.99,
            entropy: 0.01,
            value_coef: 0.5,
            algorithm: Algorithm::Reinforce,
            clip: 0.2,
            ppo_epochs: 4,
            terminal_bonus: false,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_episodes == 0 || self.ppo_epochs == 0 {
            return Err(Error::Config(
                "policy width, batch size and PPO epochs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config(format!(
                "discount must lie in [0, 1], got {}",
                self.discount
            )));
        }
        if !(self.lr > 0.0) || self.entropy < 0.0 || self.value_coef < 0.0 || !(self.clip > 0.0) {
            return Err(Error::Config("policy rates and weights out of range".into()));
        }
        Ok(())
    }
}

/// Feed-forward policy logits plus a separate value head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub state_width: usize,
    pub num_actions: usize,
    pub params: ParamSet,
}

fn tanh_layer(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    linear(ps, name, x).into_iter().map(f64::tanh).collect()
}

fn linear(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    let w = ps.get(&format!("{name}.w")).expect("layer registered");
    let b = ps.get(&format!("{name}.b")).expect("layer registered");
    let mut out = b.data.clone();
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        for (o, wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl PolicyNet {
    pub fn new(config: PolicyConfig, state_width: usize, num_actions: usize) -> Result<Self> {
        config.validate()?;
        if num_actions == 0 {
            return Err(Error::Config("policy needs at least one action".into()));
        }
        let mut ps = ParamSet::new(config.seed);
        let mut rng = ps.rng(STREAM_INIT + 400);
        ps.add_dense("pol1", state_width, config.hidden, &mut rng)?;
        ps.add_dense_zero("pol2", config.hidden, num_actions)?;
        ps.add_dense("val1", state_width, config.hidden, &mut rng)?;
        ps.add_dense_zero("val2", config.hidden, 1)?;
        Ok(PolicyNet {
            config,
            state_width,
            num_actions,
            params: ps,
        })
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_width {
            return Err(Error::dim("policy state", self.state_width, s.len()));
        }
        Ok(())
    }

    pub fn logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check(s)?;
        let h = tanh_layer(&self.params, "pol1", s);
        Ok(linear(&self.params, "pol2", &h))
    }

    pub fn log_probs(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.logits(s)?))
    }

    pub fn log_prob(&self, s: &[f64], a: usize) -> Result<f64> {
        self.log_probs(s)?
            .get(a)
            .copied()
            .ok_or_else(|| Error::State(format!("action {a} outside {} actions", self.num_actions)))
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        self.check(s)?;
        let h = tanh_layer(&self.params, "val1", s);
        Ok(linear(&self.params, "val2", &h)[0])
    }

    /// Samples from the softmax when exploring, otherwise takes the argmax.
    pub fn act(&self, s: &[f64], rng: &mut impl Rng, explore: bool) -> Result<(usize, f64)> {
        let lp = self.log_probs(s)?;
        let a = if explore {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            argmax(&lp)
        };
        Ok((a, lp[a]))
    }

    fn tape_heads(&self, tape: &mut Tape, ps: &ParamSet, states: &Matrix) -> Result<(Var, Var)> {
        let x = tape.constant(states.clone());
        let h = dense_forward(tape, ps, "pol1", x, Activation::Tanh)?;
        let logits = dense_forward(tape, ps, "pol2", h, Activation::Linear)?;
        let log_p = tape.log_softmax(logits);
        let hv = dense_forward(tape, ps, "val1", x, Activation::Tanh)?;
        let v = dense_forward(tape, ps, "val2", hv, Activation::Linear)?;
        Ok((log_p, v))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub success: bool,
    /// System-provided entity tallies and the goal's requirement, for metrics.
    pub provided: usize,
    pub correct: usize,
    pub required: usize,
    /// Number of goal domains.
    pub domains: usize,
}

impl Trajectory {
    pub fn turns(&self) -> usize {
        self.steps.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Plays one episode from a fresh goal, scoring each turn with `reward`.
pub fn rollout(
    env: &mut DialogueEnv,
    policy: &PolicyNet,
    reward: &RewardHandle,
    rng: &mut impl Rng,
    explore: bool,
) -> Result<Trajectory> {
    env.reset(rng);
    run_episode(env, reward, rng, |_, s, rng| policy.act(s, rng, explore))
}

/// Plays one episode on the environment's current goal with an arbitrary
/// action chooser returning `(action, log-prob)`; the chooser sees the
/// environment and the encoded state.
pub fn run_episode<R: Rng>(
    env: &mut DialogueEnv,
    reward: &RewardHandle,
    rng: &mut R,
    mut choose: impl FnMut(&DialogueEnv, &[f64], &mut R) -> Result<(usize, f64)>,
) -> Result<Trajectory> {
    let mut cursor = reward.begin();
    let mut steps = Vec::new();
    loop {
        let s = env.encoded_state()?;
        let (a, log_prob) = choose(env, &s, rng)?;
        let out = env.step(a)?;
        let r = reward.reward(&mut cursor, &s, a, out.done, out.success)?;
        steps.push(Step {
            state: s,
            action: a,
            log_prob,
            reward: r,
            done: out.done,
        });
        if out.done {
            let goal = env.goal()?;
            let (success, counts, required) = crate::env::is_success(goal, env.state()?);
            return Ok(Trajectory {
                steps,
                success,
                provided: counts.provided,
                correct: counts.correct,
                required,
                domains: goal.domains.len(),
            });
        }
        if steps.len() > env.max_turns() {
            return Err(Error::State("episode exceeded the turn limit".into()));
        }
    }
}

/// `G_t = r_t + γ G_{t+1}`, computed backwards.
pub fn returns(rewards: &[f64], discount: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + discount * g;
        out[t] = g;
    }
    out
}

/// Per-step rewards of a batch, standardized over all steps when asked.
pub fn batch_rewards(batch: &[Trajectory], standardize: bool) -> Vec<Vec<f64>> {
    let mut rewards: Vec<Vec<f64>> = batch
        .iter()
        .map(|t| t.steps.iter().map(|s| s.reward).collect())
        .collect();
    if standardize {
        let all: Vec<f64> = rewards.iter().flatten().copied().collect();
        let n = all.len().max(1) as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-8);
        for r in rewards.iter_mut().flatten() {
            *r = (*r - mean) / sd;
        }
    }
    rewards
}

/// Flattened update inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateBatch {
    pub states: Matrix,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Builds update inputs from trajectories: rewards (standardized when
/// `standardize`), optional success bonus, discounted returns, and
/// advantages `G_t − V(s_t)` under the current value head.
pub fn prepare(policy: &PolicyNet, batch: &[Trajectory], standardize: bool) -> Result<UpdateBatch> {
    if batch.is_empty() || batch.iter().all(|t| t.steps.is_empty()) {
        return Err(Error::State("policy update needs a nonempty batch".into()));
    }
    let mut rewards = batch_rewards(batch, standardize);
    if policy.config.terminal_bonus {
        for (r, t) in rewards.iter_mut().zip(batch) {
            if let (true, Some(last)) = (t.success, r.last_mut()) {
                *last += 1.0;
            }
        }
    }
    let n: usize = batch.iter().map(|t| t.steps.len()).sum();
    let mut states = Matrix::zeros(n, policy.state_width);
    let mut out = UpdateBatch {
        states: Matrix::zeros(0, 0),
        actions: Vec::with_capacity(n),
        old_log_probs: Vec::with_capacity(n),
        returns: Vec::with_capacity(n),
        advantages: Vec::with_capacity(n),
    };
    let mut row = 0;
    for (t, r) in batch.iter().zip(&rewards) {
        let g = returns(r, policy.config.discount);
        for (step, g) in t.steps.iter().zip(g) {
            states.row_mut(row).copy_from_slice(&step.state);
            out.actions.push(step.action);
            out.old_log_probs.push(step.log_prob);
            out.returns.push(g);
            out.advantages.push(g - policy.value(&step.state)?);
            row += 1;
        }
    }
    out.states = states;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Surrogate loss on the tape. With `clip = None` this is the REINFORCE
/// loss `−mean log π(a|s)·A`; with `Some(ε)` the PPO clipped objective
/// `−mean min(ρA, clip(ρ, 1−ε, 1+ε)A)`. Both add `value_coef · mean (V − G)²`
/// and subtract `β · mean entropy`.
pub fn surrogate(
    policy: &PolicyNet,
    tape: &mut Tape,
    ps: &ParamSet,
    batch: &UpdateBatch,
    clip: Option<f64>,
) -> Result<(Var, UpdateStats)> {
    let cfg = &policy.config;
    let n = batch.actions.len();
    let (log_p, v) = policy.tape_heads(tape, ps, &batch.states)?;
    let picked = tape.pick(log_p, &batch.actions);
    let adv = tape.constant(Matrix::from_vec(n, 1, batch.advantages.clone()));
    let pg = match clip {
        None => {
            let w = tape.mul(picked, adv);
            tape.mean(w)
        }
        Some(eps) => {
            let old = tape.constant(Matrix::from_vec(n, 1, batch.old_log_probs.clone()));
            let diff = tape.sub(picked, old);
            let ratio = tape.exp(diff);
            let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let a = tape.mul(ratio, adv);
            let b = tape.mul(clipped, adv);
            let m = tape.min(a, b);
            tape.mean(m)
        }
    };
    let policy_loss = tape.neg(pg);
    let g = tape.constant(Matrix::from_vec(n, 1, batch.returns.clone()));
    let err = tape.sub(v, g);
    let sq = tape.square(err);
    let value_loss = tape.mean(sq);
    let p = tape.exp(log_p);
    let plogp = tape.mul(p, log_p);
    let neg_ent = tape.sum_cols(plogp);
    let neg_ent = tape.mean(neg_ent);
    let vl = tape.scale(value_loss, cfg.value_coef);
    let el = tape.scale(neg_ent, cfg.entropy);
    let total = tape.add(policy_loss, vl);
    let total = tape.add(total, el);
    let stats = UpdateStats {
        policy_loss: tape.scalar(policy_loss),
        value_loss: tape.scalar(value_loss),
        entropy: -tape.scalar(neg_ent),
    };
    Ok((total, stats))
}

fn step_on(policy: &mut PolicyNet, opt: &mut Adam, batch: &UpdateBatch, clip: Option<f64>) -> Result<UpdateStats> {
    let mut tape = Tape::new();
    let (loss, stats) = surrogate(policy, &mut tape, &policy.params, batch, clip)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Numeric("policy loss".into()));
    }
    tape.backward(loss);
    tape.accumulate(&mut policy.params);
    opt.step(&mut policy.params);
    Ok(stats)
}

/// One policy-gradient step with simultaneous value regression.
pub fn reinforce_update(policy: &mut PolicyNet, opt: &mut Adam, batch: &UpdateBatch) -> Result<UpdateStats> {
    step_on(policy, opt, batch, None)
}

/// `epochs` clipped-surrogate steps on the same batch.
pub fn ppo_update(
    policy: &mut PolicyNet,
    opt: &mut Adam,
    batch: &UpdateBatch,
    clip: f64,
    epochs: usize,
) -> Result<UpdateStats> {
    let mut last = UpdateStats::default();
    for _ in 0..epochs {
        last = step_on(policy, opt, batch, Some(clip))?;
    }
    Ok(last)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    #[serde(rename = "return")]
    pub total_reward: f64,
    pub success: bool,
    pub turns: usize,
}

/// Trains a fresh policy for `config.episodes` episodes. Adversarial
/// handles take one discriminator step per batch.
pub fn train_policy(
    env: &mut DialogueEnv,
    reward: &mut RewardHandle,
    config: &PolicyConfig,
) -> Result<(PolicyNet, Vec<EpisodeLog>)> {
    let mut policy = PolicyNet::new(config.clone(), env.state_width(), env.actions().len())?;
    let mut opt = Adam::new(config.lr);
    let mut rng = stream_rng(config.seed, STREAM_POLICY);
    let mut log = Vec::with_capacity(config.episodes);
    let standardize = reward.standardize();
    while log.len() < config.episodes {
        let n = config.batch_episodes.min(config.episodes - log.len());
        let mut batch = Vec::with_capacity(n);
        for _ in 0..n {
            let t = rollout(env, &policy, reward, &mut rng, true)?;
            log.push(EpisodeLog {
                episode: log.len(),
                total_reward: t.total_reward(),
                success: t.success,
                turns: t.turns(),
            });
            batch.push(t);
        }
        let prepared = prepare(&policy, &batch, standardize)?;
        match config.algorithm {
            Algorithm::Reinforce => reinforce_update(&mut policy, &mut opt, &prepared)?,
            Algorithm::Ppo => ppo_update(&mut policy, &mut opt, &prepared, config.clip, config.ppo_epochs)?,
        };
        let pairs: Vec<(Vec<f64>, usize)> = batch
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| (s.state.clone(), s.action)))
            .collect();
        let current = &policy;
        reward.observe(&pairs, &|s, a| current.log_prob(s, a).unwrap_or(f64::NEG_INFINITY))?;
    }
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_match_brute_force() {
        let r = [0.5, -1.0, 2.0, 0.25];
        let g = returns(&r, 0.9);
        for t in 0..r.len() {
            let brute: f64 = (t..r.len()).map(|k| 0.9f64.powi((k - t) as i32) * r[k]).sum();
            assert!((g[t] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_net_is_uniform() {
        let p = PolicyNet::new(PolicyConfig::default(), 5, 4).unwrap();
        let lp = p.log_probs(&[1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(lp.iter().all(|l| (l - 0.25f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn algorithm_names() {
        assert_eq!("ppo".parse::<Algorithm>().unwrap(), Algorithm::Ppo);
        assert!("dqn".parse::<Algorithm>().is_err());
    }
}
