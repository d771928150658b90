//! Variational recurrent dynamics model over enriched expert trajectories,
//! and the per-turn reward it induces.
//!
//! Per step, with observation `x_t` (an action embedding, or a one-hot
//! action in the label-input variant) and dialogue state `s_t`:
//!
//! ```text
//! prior      p(z_t)        = N(φ_prior(h_{t-1}))
//! posterior  q(z_t)        = N(φ_enc(h_{t-1}, x_t))
//! decoder    p(x_t | ...)  = N(φ_dec(z_t, h_{t-1}, s_t))
//! recurrence h_t           = GRU([x_t, z_t, s_t], h_{t-1})
//! ```
//!
//! The reward of action `a` is its log-probability when the decoder density
//! is normalized over the rows of the scoring table.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::EnrichedCorpus;
use crate::error::{Error, Result};
use crate::math::{dense_forward, gru_step, Activation, Adam, Gaussian, GaussianVar, Matrix, ParamSet, Tape, Var};
use crate::seed::{stream_rng, STREAM_INIT, STREAM_TRAIN};

const INIT_STREAM: u64 = STREAM_INIT + 200;
const TRAIN_STREAM: u64 = STREAM_TRAIN + 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VrnnMode {
    #[serde(rename = "full")]
    Full,
    /// `z` pinned to the prior mean; no KL term.
    #[serde(rename = "deterministic")]
    DeterministicOnly,
    /// Hidden state frozen at zero.
    #[serde(rename = "stochastic")]
    StochasticOnly,
}

impl FromStr for VrnnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(VrnnMode::Full),
            "deterministic" => Ok(VrnnMode::DeterministicOnly),
            "stochastic" => Ok(VrnnMode::StochasticOnly),
            _ => Err(Error::Config(format!(
                "unknown VRNN mode {s:?} (full, deterministic, stochastic)"
            ))),
        }
    }
}

/// What the model observes per turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VrnnInput {
    Embedding,
    OneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VrnnConfig {
    pub z_dim: usize,
    pub h_dim: usize,
    /// Width of the hidden layer inside each φ network.
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Dialogues per minibatch.
    pub batch_size: usize,
    /// Reparameterized samples per step in the ELBO.
    pub samples: usize,
    pub mode: VrnnMode,
    /// Floor on the decoder log-variance; keeps action scores from
    /// collapsing to a spike around each table row.
    pub decoder_min_log_var: f64,
    pub seed: u64,
}

impl Default for VrnnConfig {
    fn default() -> Self {
        VrnnConfig {
            z_dim: 8,
            h_dim: 32,
            hidden: 32,
            lr: 3e-3,
            epochs: 30,
            batch_size: 16,
            samples: 1,
            mode: VrnnMode::Full,
            decoder_min_log_var: -4.0,
            seed: 0,
        }
    }
}

impl VrnnConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.z_dim, self.h_dim, self.hidden, self.batch_size, self.samples].contains(&0) {
            return Err(Error::Config(
                "VRNN dimensions, batch size and samples must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "VRNN learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.decoder_min_log_var >= crate::math::LOG_VAR_MIN) {
            return Err(Error::Config(
                "decoder_min_log_var below the global log-variance floor".into(),
            ));
        }
        Ok(())
    }
}

/// One trajectory as the model sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct VrnnSequence {
    /// `T × obs_dim`.
    pub obs: Matrix,
    /// `T × state_width`.
    pub states: Matrix,
    pub actions: Vec<usize>,
}

impl VrnnSequence {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Builds a sequence by looking actions up in `table`.
    pub fn from_actions(table: &Matrix, states: &[Vec<f64>], actions: &[usize]) -> Result<Self> {
        if states.len() != actions.len() {
            return Err(Error::dim("trajectory", states.len(), actions.len()));
        }
        let width = states.first().map_or(0, |s| s.len());
        let mut obs = Matrix::zeros(actions.len(), table.cols);
        let mut st = Matrix::zeros(actions.len(), width);
        for (t, (&a, s)) in actions.iter().zip(states).enumerate() {
            if a >= table.rows {
                return Err(Error::State(format!(
                    "action {a} outside a table of {} rows",
                    table.rows
                )));
            }
            if s.len() != width {
                return Err(Error::dim("trajectory state", width, s.len()));
            }
            obs.row_mut(t).copy_from_slice(table.row(a));
            st.row_mut(t).copy_from_slice(s);
        }
        Ok(VrnnSequence {
            obs,
            states: st,
            actions: actions.to_vec(),
        })
    }
}

pub fn identity(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

/// The table observations are drawn from: the learned embeddings, or the
/// identity for one-hot inputs.
pub fn scoring_table(corpus: &EnrichedCorpus, input: VrnnInput) -> Matrix {
    match input {
        VrnnInput::Embedding => corpus.table.clone(),
        VrnnInput::OneHot => identity(corpus.num_actions),
    }
}

/// Turns every enriched dialogue into a sequence. Embedding inputs use the
/// stored (possibly soft) embeddings; one-hot inputs use the action ids.
pub fn sequences(corpus: &EnrichedCorpus, input: VrnnInput) -> Result<Vec<VrnnSequence>> {
    let onehot = identity(corpus.num_actions);
    corpus
        .dialogues
        .iter()
        .filter(|d| !d.turns.is_empty())
        .map(|d| {
            let states: Vec<Vec<f64>> = d.turns.iter().map(|t| t.state.clone()).collect();
            let actions: Vec<usize> = d.turns.iter().map(|t| t.action).collect();
            match input {
                VrnnInput::OneHot => VrnnSequence::from_actions(&onehot, &states, &actions),
                VrnnInput::Embedding => {
                    let mut seq = VrnnSequence::from_actions(&corpus.table, &states, &actions)?;
                    for (t, turn) in d.turns.iter().enumerate() {
                        seq.obs.row_mut(t).copy_from_slice(&turn.embedding);
                    }
                    Ok(seq)
                }
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentTag {
    Prior,
    Posterior,
}

/// Running filter state for one dialogue.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VrnnState {
    pub h: Vec<f64>,
    /// Latent used at the last advanced step.
    pub z: Option<(Gaussian, LatentTag)>,
    pub steps: usize,
}

/// Per-step ELBO decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    pub elbo: f64,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VrnnEpoch {
    /// Mean per-step ELBO, reconstruction and KL.
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VrnnTrainLog {
    /// Training-set terms before the first update.
    pub initial: VrnnEpoch,
    pub epochs: Vec<VrnnEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vrnn {
    pub config: VrnnConfig,
    pub obs_dim: usize,
    pub state_width: usize,
    /// Rows scored by `estimate_reward`, one per action.
    pub table: Matrix,
    pub params: ParamSet,
}

/// Noise for one ELBO evaluation: per sample, per step, a `B × z` block.
pub type ElboNoise = Vec<Vec<Matrix>>;

pub fn sample_noise(samples: usize, steps: usize, rows: usize, z: usize, rng: &mut impl Rng) -> ElboNoise {
    (0..samples)
        .map(|_| {
            (0..steps)
                .map(|_| {
                    let data = (0..rows * z)
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect();
                    Matrix::from_vec(rows, z, data)
                })
                .collect()
        })
        .collect()
}

struct BatchElbo {
    /// Sum over sequences and steps, averaged over samples.
    elbo: Var,
    recon: Var,
    kl: Var,
    recon_steps: Vec<Var>,
    kl_steps: Vec<Var>,
}

impl Vrnn {
    pub fn new(config: VrnnConfig, table: Matrix, state_width: usize) -> Result<Self> {
        config.validate()?;
        if table.rows == 0 || table.cols == 0 {
            return Err(Error::Config("VRNN scoring table is empty".into()));
        }
        let (d, w, z, h, k) = (table.cols, state_width, config.z_dim, config.h_dim, config.hidden);
        let mut ps = ParamSet::new(config.seed);
        let mut rng = ps.rng(INIT_STREAM);
        ps.add_dense("prior1", h, k, &mut rng)?;
        ps.add_dense_zero("prior_mu", k, z)?;
        ps.add_dense_zero("prior_lv", k, z)?;
        ps.add_dense("enc1", h + d, k, &mut rng)?;
        ps.add_dense_zero("enc_mu", k, z)?;
        ps.add_dense_zero("enc_lv", k, z)?;
        ps.add_dense("dec1", z + h + w, k, &mut rng)?;
        ps.add_dense_zero("dec_mu", k, d)?;
        ps.add_dense_zero("dec_lv", k, d)?;
        ps.add_gru("rnn", d + z + w, h, &mut rng)?;
        Ok(Vrnn {
            config,
            obs_dim: d,
            state_width,
            table,
            params: ps,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.table.rows
    }

    fn head(&self, tape: &mut Tape, ps: &ParamSet, net: &str, input: Var, min_lv: f64) -> Result<GaussianVar> {
        let hid = dense_forward(tape, ps, &format!("{net}1"), input, Activation::Tanh)?;
        let mu = dense_forward(tape, ps, &format!("{net}_mu"), hid, Activation::Linear)?;
        let lv = dense_forward(tape, ps, &format!("{net}_lv"), hid, Activation::Linear)?;
        let log_var = tape.clamp(lv, min_lv, crate::math::LOG_VAR_MAX);
        Ok(GaussianVar { mean: mu, log_var })
    }

    fn prior_var(&self, tape: &mut Tape, ps: &ParamSet, h: Var) -> Result<GaussianVar> {
        self.head(tape, ps, "prior", h, crate::math::LOG_VAR_MIN)
    }

    fn posterior_var(&self, tape: &mut Tape, ps: &ParamSet, h: Var, x: Var) -> Result<GaussianVar> {
        let input = tape.concat(&[h, x]);
        self.head(tape, ps, "enc", input, crate::math::LOG_VAR_MIN)
    }

    fn decode_var(&self, tape: &mut Tape, ps: &ParamSet, z: Var, h: Var, s: Var) -> Result<GaussianVar> {
        let input = tape.concat(&[z, h, s]);
        self.head(tape, ps, "dec", input, self.config.decoder_min_log_var)
    }

    fn recur_var(&self, tape: &mut Tape, ps: &ParamSet, x: Var, z: Var, h: Var, s: Var) -> Result<Var> {
        let input = tape.concat(&[x, z, s]);
        gru_step(tape, ps, "rnn", input, h)
    }

    fn check(&self, what: &str, v: &[f64], width: usize) -> Result<()> {
        if v.len() != width {
            return Err(Error::dim(format!("VRNN {what}"), width, v.len()));
        }
        Ok(())
    }

    pub fn prior_step(&self, h: &[f64]) -> Result<Gaussian> {
        self.check("hidden", h, self.config.h_dim)?;
        let mut tape = Tape::new();
        let hv = tape.row(h);
        Ok(self.prior_var(&mut tape, &self.params, hv)?.to_plain(&tape, 0))
    }

    pub fn posterior_step(&self, h: &[f64], x: &[f64]) -> Result<Gaussian> {
        self.check("hidden", h, self.config.h_dim)?;
        self.check("observation", x, self.obs_dim)?;
        let mut tape = Tape::new();
        let (hv, xv) = (tape.row(h), tape.row(x));
        Ok(self.posterior_var(&mut tape, &self.params, hv, xv)?.to_plain(&tape, 0))
    }

    pub fn decode_step(&self, z: &[f64], h: &[f64], s: &[f64]) -> Result<Gaussian> {
        self.check("latent", z, self.config.z_dim)?;
        self.check("hidden", h, self.config.h_dim)?;
        self.check("state", s, self.state_width)?;
        let mut tape = Tape::new();
        let (zv, hv, sv) = (tape.row(z), tape.row(h), tape.row(s));
        Ok(self.decode_var(&mut tape, &self.params, zv, hv, sv)?.to_plain(&tape, 0))
    }

    pub fn recur_step(&self, x: &[f64], z: &[f64], h: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        self.check("observation", x, self.obs_dim)?;
        self.check("latent", z, self.config.z_dim)?;
        self.check("hidden", h, self.config.h_dim)?;
        self.check("state", s, self.state_width)?;
        let mut tape = Tape::new();
        let (xv, zv, hv, sv) = (tape.row(x), tape.row(z), tape.row(h), tape.row(s));
        let out = self.recur_var(&mut tape, &self.params, xv, zv, hv, sv)?;
        Ok(tape.value(out).data.clone())
    }

    /// ELBO of a padded batch on the tape. Shorter sequences are masked
    /// after their last step; the hidden state of a finished row is held.
    fn batch_elbo(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        seqs: &[&VrnnSequence],
        noise: &ElboNoise,
    ) -> Result<BatchElbo> {
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let (d, w, z) = (self.obs_dim, self.state_width, self.config.z_dim);
        let mode = self.config.mode;
        let samples = noise.len();
        if samples == 0 || noise.iter().any(|n| n.len() < steps) {
            return Err(Error::dim("VRNN noise", format!("{steps} steps"), "fewer"));
        }
        let mut recon_steps = Vec::with_capacity(steps);
        let mut kl_steps = Vec::with_capacity(steps);
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut x = Matrix::zeros(b, d);
            let mut s = Matrix::zeros(b, w);
            let mut m = Matrix::zeros(b, 1);
            for (r, seq) in seqs.iter().enumerate() {
                if t < seq.len() {
                    x.row_mut(r).copy_from_slice(seq.obs.row(t));
                    s.row_mut(r).copy_from_slice(seq.states.row(t));
                    m.set(r, 0, 1.0);
                }
            }
            inputs.push((tape.constant(x), tape.constant(s), tape.constant(m)));
        }
        for sample in noise {
            let mut h = tape.constant(Matrix::zeros(b, self.config.h_dim));
            for (t, &(x, s, mask)) in inputs.iter().enumerate() {
                let prior = self.prior_var(tape, ps, h)?;
                let (zt, kl) = match mode {
                    VrnnMode::DeterministicOnly => (prior.mean, None),
                    _ => {
                        let post = self.posterior_var(tape, ps, h, x)?;
                        if sample[t].shape() != (b, z) {
                            return Err(Error::dim(
                                "VRNN step noise",
                                format!("{b}x{z}"),
                                format!("{:?}", sample[t].shape()),
                            ));
                        }
                        let eps = tape.constant(sample[t].clone());
                        let zt = post.sample(tape, eps);
                        (zt, Some(post.kl(tape, &prior)))
                    }
                };
                let dec = self.decode_var(tape, ps, zt, h, s)?;
                let ll = dec.log_density(tape, x);
                let ll = tape.mul(ll, mask);
                recon_steps.push(tape.sum(ll));
                if let Some(kl) = kl {
                    let kl = tape.mul(kl, mask);
                    kl_steps.push(tape.sum(kl));
                }
                if mode != VrnnMode::StochasticOnly {
                    let hn = self.recur_var(tape, ps, x, zt, h, s)?;
                    let delta = tape.sub(hn, h);
                    let delta = tape.mul(delta, mask);
                    h = tape.add(h, delta);
                }
            }
        }
        let inv = 1.0 / samples as f64;
        let total = |tape: &mut Tape, v: &[Var]| -> Var {
            if v.is_empty() {
                tape.constant(Matrix::scalar(0.0))
            } else {
                let c = tape.concat(v);
                let s = tape.sum(c);
                tape.scale(s, inv)
            }
        };
        let recon = total(tape, &recon_steps);
        let kl = total(tape, &kl_steps);
        let elbo = tape.sub(recon, kl);
        Ok(BatchElbo {
            elbo,
            recon,
            kl,
            recon_steps,
            kl_steps,
        })
    }

    /// ELBO of one trajectory with explicit noise (`samples × T × z_dim`),
    /// plus its per-step decomposition (averaged over samples).
    pub fn elbo(&self, seq: &VrnnSequence, noise: &[Vec<Vec<f64>>]) -> Result<ElboTerms> {
        if seq.is_empty() {
            return Err(Error::State("ELBO of an empty trajectory".into()));
        }
        let noise: ElboNoise = noise
            .iter()
            .map(|s| s.iter().map(|e| Matrix::row_vector(e.clone())).collect())
            .collect();
        let mut tape = Tape::new();
        let out = self.batch_elbo(&mut tape, &self.params, &[seq], &noise)?;
        let t = seq.len();
        let per_step = |v: &[Var]| -> Vec<f64> {
            let mut acc = vec![0.0; t];
            for (i, x) in v.iter().enumerate() {
                acc[i % t] += tape.scalar(*x) / noise.len() as f64;
            }
            acc
        };
        let recon = per_step(&out.recon_steps);
        let kl = if out.kl_steps.is_empty() {
            vec![0.0; t]
        } else {
            per_step(&out.kl_steps)
        };
        Ok(ElboTerms {
            elbo: tape.scalar(out.elbo),
            recon,
            kl,
        })
    }

    /// Differentiable ELBO sum for gradient checks and custom training.
    pub fn elbo_var(&self, tape: &mut Tape, ps: &ParamSet, seqs: &[&VrnnSequence], noise: &ElboNoise) -> Result<Var> {
        Ok(self.batch_elbo(tape, ps, seqs, noise)?.elbo)
    }

    /// Mean per-step terms over `seqs` with noise from `rng`.
    pub fn evaluate(&self, seqs: &[&VrnnSequence], rng: &mut impl Rng) -> Result<VrnnEpoch> {
        let mut acc = VrnnEpoch::default();
        let mut steps = 0usize;
        for chunk in seqs.chunks(64) {
            let len = chunk.iter().map(|s| s.len()).max().unwrap_or(0);
            let noise = sample_noise(self.config.samples, len, chunk.len(), self.config.z_dim, rng);
            let mut tape = Tape::new();
            let out = self.batch_elbo(&mut tape, &self.params, chunk, &noise)?;
            acc.elbo += tape.scalar(out.elbo);
            acc.recon += tape.scalar(out.recon);
            acc.kl += tape.scalar(out.kl);
            steps += chunk.iter().map(|s| s.len()).sum::<usize>();
        }
        let n = steps.max(1) as f64;
        Ok(VrnnEpoch {
            elbo: acc.elbo / n,
            recon: acc.recon / n,
            kl: acc.kl / n,
        })
    }

    /// A fresh filter state (zero hidden vector).
    pub fn start(&self) -> VrnnState {
        VrnnState {
            h: vec![0.0; self.config.h_dim],
            z: None,
            steps: 0,
        }
    }

    fn ready(&self, state: &VrnnState) -> Result<()> {
        if state.h.is_empty() {
            return Err(Error::State("VRNN state was never started".into()));
        }
        self.check("hidden", &state.h, self.config.h_dim)
    }

    /// `log p(a | h, s)` for every action: decoder log-density of each table
    /// row under the prior-mean latent, normalized over the table.
    pub fn action_log_probs(&self, state: &VrnnState, s: &[f64]) -> Result<Vec<f64>> {
        self.ready(state)?;
        let prior = self.prior_step(&state.h)?;
        let dec = self.decode_step(&prior.mean, &state.h, s)?;
        let scores: Vec<f64> = (0..self.table.rows)
            .map(|a| {
                self.table
                    .row(a)
                    .iter()
                    .zip(&dec.mean)
                    .zip(&dec.log_variance)
                    .map(|((x, m), lv)| -0.5 * ((2.0 * PI).ln() + lv + (x - m) * (x - m) * (-lv).exp()))
                    .sum()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out: Vec<f64> = scores.iter().map(|x| x - lse).collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("VRNN action scores".into()));
        }
        Ok(out)
    }

    /// Advances the filter with the action actually taken, using the
    /// posterior mean (prior mean in deterministic-only mode).
    pub fn advance(&self, state: &VrnnState, s: &[f64], a: usize) -> Result<VrnnState> {
        self.ready(state)?;
        if a >= self.table.rows {
            return Err(Error::State(format!(
                "action {a} outside a table of {} rows",
                self.table.rows
            )));
        }
        let x = self.table.row(a);
        let (latent, tag) = match self.config.mode {
            VrnnMode::DeterministicOnly => (self.prior_step(&state.h)?, LatentTag::Prior),
            _ => (self.posterior_step(&state.h, x)?, LatentTag::Posterior),
        };
        let h = match self.config.mode {
            VrnnMode::StochasticOnly => state.h.clone(),
            _ => self.recur_step(x, &latent.mean, &state.h, s)?,
        };
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("VRNN hidden state".into()));
        }
        Ok(VrnnState {
            h,
            z: Some((latent, tag)),
            steps: state.steps + 1,
        })
    }

    /// Reward of taking `a` in state `s` after the history folded into
    /// `state`, and the state advanced past this turn.
    pub fn estimate_reward(&self, state: &VrnnState, s: &[f64], a: usize) -> Result<(f64, VrnnState)> {
        let lp = self.action_log_probs(state, s)?;
        let r = *lp
            .get(a)
            .ok_or_else(|| Error::State(format!("action {a} outside a table of {} rows", lp.len())))?;
        Ok((r, self.advance(state, s, a)?))
    }

    /// Rewards for a whole trajectory, filtering through it turn by turn.
    pub fn score(&self, states: &[Vec<f64>], actions: &[usize]) -> Result<Vec<f64>> {
        let mut st = self.start();
        let mut out = Vec::with_capacity(actions.len());
        for (s, &a) in states.iter().zip(actions) {
            let (r, next) = self.estimate_reward(&st, s, a)?;
            out.push(r);
            st = next;
        }
        Ok(out)
    }
}

/// Maximizes the mean per-step ELBO with Adam over dialogue minibatches.
pub fn train_vrnn(corpus: &EnrichedCorpus, input: VrnnInput, config: &VrnnConfig) -> Result<(Vrnn, VrnnTrainLog)> {
    let seqs = sequences(corpus, input)?;
    if seqs.is_empty() {
        return Err(Error::Config(
            "VRNN training needs at least one nonempty dialogue".into(),
        ));
    }
    let mut model = Vrnn::new(config.clone(), scoring_table(corpus, input), corpus.state_width)?;
    let mut rng = stream_rng(config.seed, TRAIN_STREAM);
    let all: Vec<&VrnnSequence> = seqs.iter().collect();
    let mut log = VrnnTrainLog {
        initial: model.evaluate(&all, &mut rng)?,
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let total_steps: usize = seqs.iter().map(|s| s.len()).sum();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = VrnnEpoch::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&VrnnSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let len = batch.iter().map(|s| s.len()).max().unwrap_or(0);
            let n: usize = batch.iter().map(|s| s.len()).sum();
            let noise = sample_noise(config.samples, len, batch.len(), config.z_dim, &mut rng);
            let mut tape = Tape::new();
            let out = model.batch_elbo(&mut tape, &model.params, &batch, &noise)?;
            let elbo = tape.scalar(out.elbo);
            if !elbo.is_finite() {
                return Err(Error::Numeric("VRNN ELBO".into()));
            }
            acc.elbo += elbo;
            acc.recon += tape.scalar(out.recon);
            acc.kl += tape.scalar(out.kl);
            let loss = tape.scale(out.elbo, -1.0 / n as f64);
            tape.backward(loss);
            tape.accumulate(&mut model.params);
            opt.step(&mut model.params);
        }
        let t = total_steps as f64;
        log.epochs.push(VrnnEpoch {
            elbo: acc.elbo / t,
            recon: acc.recon / t,
            kl: acc.kl / t,
        });
    }
    Ok((model, log))
}
