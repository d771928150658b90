//! Reward functions behind one interface: the handcrafted sparse reward, the
//! learned VRNN rewards, and adversarially trained discriminators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::action::EnrichedCorpus;
use crate::corpus::Level;
use crate::error::{Error, Result};
use crate::math::{dense_forward, Activation, Adam, Matrix, ParamSet, Tape, Var};
use crate::seed::STREAM_INIT;
use crate::vrnn::{identity, Vrnn, VrnnInput, VrnnState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedRewardConfig {
    pub turn_penalty: f64,
    pub success_bonus: f64,
    pub failure_penalty: f64,
}

impl Default for HandcraftedRewardConfig {
    fn default() -> Self {
        HandcraftedRewardConfig {
            turn_penalty: -0.05,
            success_bonus: 1.0,
            failure_penalty: -1.0,
        }
    }
}

impl HandcraftedRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.turn_penalty < 0.0 && 0.0 < self.success_bonus) {
            return Err(Error::Config("handcrafted reward needs penalty < 0 < bonus".into()));
        }
        Ok(())
    }
}

/// Per-turn penalty, plus the bonus or failure penalty on the final turn.
pub fn handcrafted_reward(config: &HandcraftedRewardConfig, _turn: usize, done: bool, success: bool) -> f64 {
    let terminal = match (done, success) {
        (false, _) => 0.0,
        (true, true) => config.success_bonus,
        (true, false) => config.failure_penalty,
    };
    config.turn_penalty + terminal
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub hidden: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            hidden: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// One state-action pair as the discriminator sees it. `log_pi` is the
/// current policy's log-probability of the action.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscSample {
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
    pub log_pi: f64,
}

/// `f(s, x(a))`: a one-hidden-layer net over the state and the action
/// representation (embedding row or one-hot).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub state_width: usize,
    /// Action representations, one row per action.
    pub table: Matrix,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn new(config: DiscConfig, table: Matrix, state_width: usize) -> Result<Self> {
        if config.hidden == 0 || !(config.lr > 0.0) {
            return Err(Error::Config(
                "discriminator needs a positive width and learning rate".into(),
            ));
        }
        let mut ps = ParamSet::new(config.seed);
        let mut rng = ps.rng(STREAM_INIT + 300);
        ps.add_dense("d1", state_width + table.cols, config.hidden, &mut rng)?;
        ps.add_dense("d2", config.hidden, 1, &mut rng)?;
        Ok(Discriminator {
            config,
            state_width,
            table,
            params: ps,
        })
    }

    pub fn sample(&self, state: &[f64], action: usize, log_pi: f64) -> Result<DiscSample> {
        if action >= self.table.rows {
            return Err(Error::State(format!(
                "action {action} outside {} actions",
                self.table.rows
            )));
        }
        Ok(DiscSample {
            state: state.to_vec(),
            obs: self.table.row(action).to_vec(),
            log_pi,
        })
    }

    fn logits(&self, tape: &mut Tape, ps: &ParamSet, batch: &[DiscSample]) -> Result<Var> {
        let width = self.state_width + self.table.cols;
        let mut x = Matrix::zeros(batch.len(), width);
        for (r, smp) in batch.iter().enumerate() {
            if smp.state.len() + smp.obs.len() != width {
                return Err(Error::dim(
                    "discriminator input",
                    width,
                    smp.state.len() + smp.obs.len(),
                ));
            }
            let row = x.row_mut(r);
            row[..smp.state.len()].copy_from_slice(&smp.state);
            row[smp.state.len()..].copy_from_slice(&smp.obs);
        }
        let xv = tape.constant(x);
        let h = dense_forward(tape, ps, "d1", xv, Activation::Tanh)?;
        dense_forward(tape, ps, "d2", h, Activation::Linear)
    }

    /// `f(s, a)` for one pair.
    pub fn score(&self, state: &[f64], action: usize) -> Result<f64> {
        let smp = self.sample(state, action, 0.0)?;
        let mut tape = Tape::new();
        let f = self.logits(&mut tape, &self.params, &[smp])?;
        Ok(tape.scalar(f))
    }

    /// Discriminator loss with `D = exp f / (exp f + π)`:
    /// `mean_expert softplus(-(f - log π)) + mean_policy softplus(f - log π)`.
    pub fn loss_var(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        expert: &[DiscSample],
        policy: &[DiscSample],
    ) -> Result<Var> {
        if expert.is_empty() || policy.is_empty() {
            return Err(Error::State(
                "adversarial update needs expert and policy samples".into(),
            ));
        }
        let mut side = |batch: &[DiscSample], sign: f64| -> Result<Var> {
            let f = self.logits(tape, ps, batch)?;
            let lp = tape.constant(Matrix::from_vec(
                batch.len(),
                1,
                batch.iter().map(|s| s.log_pi).collect(),
            ));
            let logit = tape.sub(f, lp);
            let signed = tape.scale(logit, sign);
            let sp = tape.softplus(signed);
            Ok(tape.mean(sp))
        };
        let e = side(expert, -1.0)?;
        let p = side(policy, 1.0)?;
        Ok(tape.add(e, p))
    }

    /// One gradient step on the discriminator loss; returns the loss before the step.
    pub fn adversarial_update(&mut self, opt: &mut Adam, expert: &[DiscSample], policy: &[DiscSample]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_var(&mut tape, &self.params, expert, policy)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric("discriminator loss".into()));
        }
        tape.backward(loss);
        tape.accumulate(&mut self.params);
        opt.step(&mut self.params);
        Ok(value)
    }
}

/// CLI-level names of the reward handles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    ActVrnn,
    SsVrnn,
    ActGdpl,
    SsGdpl,
    Handcrafted,
    Adversarial,
}

impl RewardKind {
    pub const ALL: [RewardKind; 6] = [
        RewardKind::ActVrnn,
        RewardKind::SsVrnn,
        RewardKind::ActGdpl,
        RewardKind::SsGdpl,
        RewardKind::Handcrafted,
        RewardKind::Adversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::ActVrnn => "act-vrnn",
            RewardKind::SsVrnn => "ss-vrnn",
            RewardKind::ActGdpl => "act-gdpl",
            RewardKind::SsGdpl => "ss-gdpl",
            RewardKind::Handcrafted => "handcrafted",
            RewardKind::Adversarial => "adversarial",
        }
    }

    /// Input representation the VRNN needs, for VRNN-based handles.
    pub fn vrnn_input(self) -> Option<VrnnInput> {
        match self {
            RewardKind::ActVrnn => Some(VrnnInput::Embedding),
            RewardKind::SsVrnn => Some(VrnnInput::OneHot),
            _ => None,
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, RewardKind::ActGdpl | RewardKind::SsGdpl | RewardKind::Adversarial)
    }

    /// Whether the handle depends on the demonstrations at all.
    pub fn uses_demonstrations(self) -> bool {
        self != RewardKind::Handcrafted
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = RewardKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown reward {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// Per-episode scoring state.
#[derive(Clone, Debug, Default)]
pub struct RewardCursor {
    pub turn: usize,
    pub vrnn: Option<VrnnState>,
}

#[derive(Clone, Debug)]
pub enum RewardHandle {
    Handcrafted(HandcraftedRewardConfig),
    Vrnn {
        kind: RewardKind,
        model: Box<Vrnn>,
    },
    Adversarial {
        kind: RewardKind,
        disc: Box<Discriminator>,
        opt: Adam,
        /// Expert pairs `(state, obs)`; policy log-probabilities are filled
        /// in at each update.
        expert: Vec<(Vec<f64>, Vec<f64>)>,
        cursor: usize,
        losses: Vec<f64>,
    },
}

impl RewardHandle {
    pub fn kind(&self) -> RewardKind {
        match self {
            RewardHandle::Handcrafted(_) => RewardKind::Handcrafted,
            RewardHandle::Vrnn { kind, .. } | RewardHandle::Adversarial { kind, .. } => *kind,
        }
    }

    /// Learned log-probability rewards are standardized per batch before
    /// the policy update; the others are used as is.
    pub fn standardize(&self) -> bool {
        matches!(self, RewardHandle::Vrnn { .. })
    }

    pub fn begin(&self) -> RewardCursor {
        RewardCursor {
            turn: 0,
            vrnn: match self {
                RewardHandle::Vrnn { model, .. } => Some(model.start()),
                _ => None,
            },
        }
    }

    /// Reward for taking `a` in `s`; `cursor` carries the episode history.
    pub fn reward(&self, cursor: &mut RewardCursor, s: &[f64], a: usize, done: bool, success: bool) -> Result<f64> {
        let r = match self {
            RewardHandle::Handcrafted(cfg) => handcrafted_reward(cfg, cursor.turn, done, success),
            RewardHandle::Vrnn { model, .. } => {
                let st = cursor
                    .vrnn
                    .as_ref()
                    .ok_or_else(|| Error::State("reward cursor was not started by this handle".into()))?;
                let (r, next) = model.estimate_reward(st, s, a)?;
                cursor.vrnn = Some(next);
                r
            }
            RewardHandle::Adversarial { disc, .. } => disc.score(s, a)?,
        };
        if !r.is_finite() {
            return Err(Error::Numeric(format!("{} reward", self.kind())));
        }
        cursor.turn += 1;
        Ok(r)
    }

    /// Rewards of a whole trajectory.
    pub fn score(&self, states: &[Vec<f64>], actions: &[usize], success: bool) -> Result<Vec<f64>> {
        let mut cur = self.begin();
        let n = actions.len();
        states
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(t, (s, &a))| self.reward(&mut cur, s, a, t + 1 == n, success))
            .collect()
    }

    /// Lets adversarial handles take one discriminator step against the
    /// latest policy samples `(state, action)`; a no-op otherwise. Returns
    /// the discriminator loss when a step was taken.
    pub fn observe(
        &mut self,
        policy: &[(Vec<f64>, usize)],
        log_pi: &dyn Fn(&[f64], usize) -> f64,
    ) -> Result<Option<f64>> {
        let RewardHandle::Adversarial {
            disc,
            opt,
            expert,
            cursor,
            losses,
            ..
        } = self
        else {
            return Ok(None);
        };
        if policy.is_empty() {
            return Ok(None);
        }
        let n = policy.len();
        let mut exp_batch = Vec::with_capacity(n);
        for k in 0..n {
            let (s, obs) = &expert[(*cursor + k) % expert.len()];
            // log π of the action the obs row stands for (argmax of a one-hot
            // or the nearest table row)
            let a = nearest_row(&disc.table, obs);
            exp_batch.push(DiscSample {
                state: s.clone(),
                obs: obs.clone(),
                log_pi: log_pi(s, a),
            });
        }
        *cursor = (*cursor + n) % expert.len();
        let pol_batch = policy
            .iter()
            .map(|(s, a)| disc.sample(s, *a, log_pi(s, *a)))
            .collect::<Result<Vec<_>>>()?;
        let loss = disc.adversarial_update(opt, &exp_batch, &pol_batch)?;
        losses.push(loss);
        Ok(Some(loss))
    }

    /// Discriminator losses logged so far (adversarial handles only).
    pub fn losses(&self) -> &[f64] {
        match self {
            RewardHandle::Adversarial { losses, .. } => losses,
            _ => &[],
        }
    }
}

fn nearest_row(table: &Matrix, x: &[f64]) -> usize {
    let dist = |r: usize| -> f64 { table.row(r).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum() };
    (0..table.rows)
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .unwrap_or(0)
}

/// Everything a handle may need; absent pieces are reported as config
/// errors by `ablation_wiring`.
#[derive(Clone, Debug, Default)]
pub struct RewardInputs<'a> {
    pub enriched: Option<&'a EnrichedCorpus>,
    pub vrnn: Option<&'a Vrnn>,
    pub handcrafted: HandcraftedRewardConfig,
    pub disc: DiscConfig,
}

/// Builds the reward handle named by `kind`.
///
/// * `act-vrnn` / `ss-vrnn`: a trained VRNN over embeddings / one-hot labels.
/// * `act-gdpl`: discriminator over embedding-enriched demonstrations.
/// * `ss-gdpl`: discriminator over one-hot predicted labels of all demonstrations.
/// * `adversarial`: discriminator over the fully labeled demonstrations only.
/// * `handcrafted`: the sparse turn-penalty reward.
pub fn ablation_wiring(kind: RewardKind, inputs: &RewardInputs<'_>) -> Result<RewardHandle> {
    let missing = |what: &str| Error::Config(format!("reward {kind} needs {what}"));
    match kind {
        RewardKind::Handcrafted => {
            inputs.handcrafted.validate()?;
            Ok(RewardHandle::Handcrafted(inputs.handcrafted))
        }
        RewardKind::ActVrnn | RewardKind::SsVrnn => {
            let model = inputs
                .vrnn
                .ok_or_else(|| missing("a trained VRNN (run train-reward)"))?;
            let onehot = kind == RewardKind::SsVrnn;
            let is_identity = model.table == identity(model.table.rows);
            if onehot != is_identity {
                let want = if onehot { "one-hot" } else { "embedding" };
                return Err(Error::Config(format!(
                    "reward {kind} needs a VRNN trained on {want} inputs"
                )));
            }
            Ok(RewardHandle::Vrnn {
                kind,
                model: Box::new(model.clone()),
            })
        }
        RewardKind::ActGdpl | RewardKind::SsGdpl | RewardKind::Adversarial => {
            let e = inputs
                .enriched
                .ok_or_else(|| missing("enriched demonstrations (run train-actions)"))?;
            let onehot = identity(e.num_actions);
            let table = if kind == RewardKind::ActGdpl {
                e.table.clone()
            } else {
                onehot.clone()
            };
            let mut expert = Vec::new();
            for d in &e.dialogues {
                if kind == RewardKind::Adversarial && d.level != Level::Fully {
                    continue;
                }
                for t in &d.turns {
                    let obs = if kind == RewardKind::ActGdpl {
                        t.embedding.clone()
                    } else {
                        onehot.row(t.action).to_vec()
                    };
                    expert.push((t.state.clone(), obs));
                }
            }
            if expert.is_empty() {
                return Err(missing("at least one demonstration turn"));
            }
            let disc = Discriminator::new(inputs.disc.clone(), table, e.state_width)?;
            Ok(RewardHandle::Adversarial {
                kind,
                opt: Adam::new(disc.config.lr),
                disc: Box::new(disc),
                expert,
                cursor: 0,
                losses: Vec::new(),
            })
        }
    }
}
