//! Networks of the action learner: utterance encoder, action predictors,
//! shared inference net, and the transition and response decoders.

use serde::{Deserialize, Serialize};

use crate::env::MAX_UTTERANCE_LEN;
use crate::error::{Error, Result};
use crate::math::{dense_forward, gru_step, softmax_logits, Activation, GaussianVar, Matrix, ParamSet, Tape, Var};
use crate::seed::STREAM_INIT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionConfig {
    /// Action-embedding width `d`.
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub token_dim: usize,
    /// Boltzmann temperature over embedding similarities.
    pub temperature: f64,
    /// Weight of the classification loss.
    pub alpha: f64,
    /// `+1` adds the classifier entropy to the unlabeled bound, `-1` subtracts it.
    pub entropy_sign: f64,
    pub lr: f64,
    /// Passes over the fully labeled turns.
    pub epochs: usize,
    pub batch_size: usize,
    pub context_epochs: usize,
    /// Largest action set enumerated exactly in the unlabeled bounds.
    pub max_enumeration: usize,
    /// Soft (distribution-weighted) instead of argmax enrichment.
    pub soft_enrichment: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ActionConfig {
    fn default() -> Self {
        ActionConfig {
            embed_dim: 16,
            latent_dim: 8,
            hidden: 32,
            token_dim: 16,
            temperature: 1.0,
            alpha: 1.0,
            entropy_sign: 1.0,
            lr: 3e-3,
            epochs: 30,
            batch_size: 32,
            context_epochs: 20,
            max_enumeration: 512,
            soft_enrichment: false,
            max_len: MAX_UTTERANCE_LEN,
            seed: 0,
        }
    }
}

impl ActionConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_dim,
            self.latent_dim,
            self.hidden,
            self.token_dim,
            self.batch_size,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(
                "action model dimensions and batch size must be positive".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.entropy_sign != 1.0 && self.entropy_sign != -1.0 {
            return Err(Error::Config(format!(
                "entropy_sign must be 1 or -1, got {}",
                self.entropy_sign
            )));
        }
        if !(self.lr > 0.0) || self.alpha < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive and alpha nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters plus the sizes they were built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionModel {
    pub config: ActionConfig,
    pub state_width: usize,
    pub num_actions: usize,
    pub vocab_size: usize,
    pub params: ParamSet,
}

pub const EMBEDDING_TABLE: &str = "act_emb";

impl ActionModel {
    pub fn new(config: ActionConfig, state_width: usize, num_actions: usize, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if num_actions > config.max_enumeration {
            return Err(Error::Config(format!(
                "{num_actions} actions exceed the exact-enumeration limit of {}",
                config.max_enumeration
            )));
        }
        let (h, d, z, t, w) = (
            config.hidden,
            config.embed_dim,
            config.latent_dim,
            config.token_dim,
            state_width,
        );
        let mut ps = ParamSet::new(config.seed);
        let mut rng = ps.rng(STREAM_INIT);
        ps.add_embedding("tok", vocab_size, t, 0.5, &mut rng)?;
        ps.add_gru("enc", t, h, &mut rng)?;
        ps.add_dense("g1", h + 2 * w, h, &mut rng)?;
        ps.add_dense("g2", h, d, &mut rng)?;
        ps.add_dense("gt1", 3 * h, h, &mut rng)?;
        ps.add_dense("gt2", h, d, &mut rng)?;
        ps.add_embedding(EMBEDDING_TABLE, num_actions, d, 0.5, &mut rng)?;
        ps.add_dense("q1", h + d, h, &mut rng)?;
        ps.add_dense("q_mu", h, z, &mut rng)?;
        ps.add_dense("q_lv", h, z, &mut rng)?;
        ps.add_dense("p1", w + z, h, &mut rng)?;
        ps.add_dense("p2", h, w, &mut rng)?;
        ps.add_dense("r1", z + 2 * h, h, &mut rng)?;
        ps.add_dense("r2", h, vocab_size, &mut rng)?;
        ps.insert("r_pos", Matrix::zeros(config.max_len, vocab_size))?;
        Ok(ActionModel {
            config,
            state_width,
            num_actions,
            vocab_size,
            params: ps,
        })
    }

    pub fn embedding_table(&self) -> &Matrix {
        self.params.get(EMBEDDING_TABLE).expect("embedding table registered")
    }

    /// Final hidden state of the recurrent encoder per utterance (`B × hidden`);
    /// an empty utterance encodes to zeros.
    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, utts: &[&[u32]]) -> Result<Var> {
        let b = utts.len();
        let tok = tape.param(params, "tok")?;
        let mut h = tape.constant(Matrix::zeros(b, self.config.hidden));
        let max_len = utts.iter().map(|u| u.len()).max().unwrap_or(0);
        for j in 0..max_len {
            let ids: Vec<usize> = utts.iter().map(|u| u.get(j).map_or(0, |&t| t as usize)).collect();
            if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
                return Err(Error::dim(
                    "utterance encoder",
                    format!("token id < {}", self.vocab_size),
                    bad.to_string(),
                ));
            }
            let x = tape.gather(tok, &ids);
            let h_new = gru_step(tape, params, "enc", x, h)?;
            if utts.iter().all(|u| u.len() > j) {
                h = h_new;
            } else {
                let mask: Vec<f64> = utts.iter().map(|u| if u.len() > j { 1.0 } else { 0.0 }).collect();
                let mask = tape.constant(Matrix::from_vec(b, 1, mask));
                let delta = tape.sub(h_new, h);
                let delta = tape.mul(delta, mask);
                h = tape.add(h, delta);
            }
        }
        Ok(h)
    }

    fn similarity_logits(&self, tape: &mut Tape, params: &ParamSet, g: Var) -> Result<Var> {
        let table = tape.param(params, EMBEDDING_TABLE)?;
        let tt = tape.transpose(table);
        let sims = tape.matmul(g, tt);
        Ok(tape.scale(sims, 1.0 / self.config.temperature))
    }

    /// Logits `e(a)ᵀ g(u, s, s') / γ`, `B × |A|`.
    pub fn predictor_logits(&self, tape: &mut Tape, params: &ParamSet, hu: Var, s: Var, s_next: Var) -> Result<Var> {
        let x = tape.concat(&[hu, s, s_next]);
        let h = dense_forward(tape, params, "g1", x, Activation::Tanh)?;
        let g = dense_forward(tape, params, "g2", h, Activation::Linear)?;
        self.similarity_logits(tape, params, g)
    }

    /// Text-only logits from the utterance and its neighbours.
    pub fn text_logits(&self, tape: &mut Tape, params: &ParamSet, hu: Var, hprev: Var, hnext: Var) -> Result<Var> {
        let x = tape.concat(&[hu, hprev, hnext]);
        let h = dense_forward(tape, params, "gt1", x, Activation::Tanh)?;
        let g = dense_forward(tape, params, "gt2", h, Activation::Linear)?;
        self.similarity_logits(tape, params, g)
    }

    /// `q(z | u, e(a))` per row.
    pub fn posterior(&self, tape: &mut Tape, params: &ParamSet, hu: Var, e: Var) -> Result<GaussianVar> {
        let x = tape.concat(&[hu, e]);
        let h = dense_forward(tape, params, "q1", x, Activation::Tanh)?;
        let mu = dense_forward(tape, params, "q_mu", h, Activation::Linear)?;
        let lv = dense_forward(tape, params, "q_lv", h, Activation::Linear)?;
        Ok(GaussianVar::from_heads(tape, mu, lv))
    }

    /// Per-row Bernoulli log-likelihood of the next-state bits, `R × 1`.
    pub fn transition_loglik(&self, tape: &mut Tape, params: &ParamSet, s: Var, z: Var, s_next: Var) -> Result<Var> {
        let x = tape.concat(&[s, z]);
        let h = dense_forward(tape, params, "p1", x, Activation::Tanh)?;
        let logits = dense_forward(tape, params, "p2", h, Activation::Linear)?;
        Ok(bernoulli_loglik(tape, logits, s_next))
    }

    /// Per-row categorical log-likelihood of `targets[r]` token by token,
    /// `R × 1`. Position `j` adds a learned bias row to the vocabulary logits.
    pub fn response_loglik(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z: Var,
        hprev: Var,
        hnext: Var,
        targets: &[&[u32]],
    ) -> Result<Var> {
        let rows = targets.len();
        let x = tape.concat(&[z, hprev, hnext]);
        let h = dense_forward(tape, params, "r1", x, Activation::Tanh)?;
        let base = dense_forward(tape, params, "r2", h, Activation::Linear)?;
        let pos = tape.param(params, "r_pos")?;
        let (mut row_ids, mut pos_ids, mut tokens) = (Vec::new(), Vec::new(), Vec::new());
        for (r, t) in targets.iter().enumerate() {
            if t.len() > self.config.max_len {
                return Err(Error::dim(
                    "response decoder",
                    format!("length <= {}", self.config.max_len),
                    t.len().to_string(),
                ));
            }
            for (j, &tok) in t.iter().enumerate() {
                row_ids.push(r);
                pos_ids.push(j);
                tokens.push(tok as usize);
            }
        }
        if tokens.is_empty() {
            return Ok(tape.constant(Matrix::zeros(rows, 1)));
        }
        let b = tape.gather(base, &row_ids);
        let p = tape.gather(pos, &pos_ids);
        let logits = tape.add(b, p);
        let lsm = tape.log_softmax(logits);
        let lp = tape.pick(lsm, &tokens);
        Ok(tape.segment_sum(lp, &row_ids, rows))
    }

    /// Action distribution `f_A(a | u, s, s')` for one turn.
    pub fn predict_action(&self, utt: &[u32], s: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
        let mut probs = self.predict_batch(&[utt], &[s], &[s_next])?;
        Ok(probs.remove(0))
    }

    pub fn predict_batch(&self, utts: &[&[u32]], s: &[&[f64]], s_next: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.check_states(s)?;
        self.check_states(s_next)?;
        let mut tape = Tape::new();
        let hu = self.encode(&mut tape, &self.params, utts)?;
        let sv = tape.constant(rows_matrix(s));
        let nv = tape.constant(rows_matrix(s_next));
        let logits = self.predictor_logits(&mut tape, &self.params, hu, sv, nv)?;
        let lm = tape.value(logits);
        (0..lm.rows).map(|r| softmax_logits(lm.row(r), 1.0)).collect()
    }

    /// Text-mode distribution `f_A(a | u_t, u_{t-1}, u_{t+1})`.
    pub fn predict_text_batch(&self, utts: &[&[u32]], prev: &[&[u32]], next: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let hu = self.encode(&mut tape, &self.params, utts)?;
        let hp = self.encode(&mut tape, &self.params, prev)?;
        let hn = self.encode(&mut tape, &self.params, next)?;
        let logits = self.text_logits(&mut tape, &self.params, hu, hp, hn)?;
        let lm = tape.value(logits);
        (0..lm.rows).map(|r| softmax_logits(lm.row(r), 1.0)).collect()
    }

    fn check_states(&self, s: &[&[f64]]) -> Result<()> {
        match s.iter().find(|x| x.len() != self.state_width) {
            Some(x) => Err(Error::dim(
                "state vector",
                self.state_width.to_string(),
                x.len().to_string(),
            )),
            None => Ok(()),
        }
    }
}

/// Stacks equal-length rows.
pub fn rows_matrix(rows: &[&[f64]]) -> Matrix {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r);
    }
    Matrix::from_vec(rows.len(), cols, data)
}

/// `Σ_j x_j l_j − softplus(l_j)` per row.
pub fn bernoulli_loglik(tape: &mut Tape, logits: Var, target: Var) -> Var {
    let xl = tape.mul(target, logits);
    let sp = tape.softplus(logits);
    let ll = tape.sub(xl, sp);
    tape.sum_cols(ll)
}
