//! Variational bounds and the joint training objective.

use serde::{Deserialize, Serialize};

use super::model::{rows_matrix, ActionModel, EMBEDDING_TABLE};
use crate::error::{Error, Result};
use crate::math::{Matrix, ParamSet, Tape, Var};

/// One turn prepared for the action learner. `utt` is the system utterance
/// `u_t`; `prev`/`next` are the neighbouring system utterances (empty at
/// the dialogue edges).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnExample {
    pub utt: Vec<u32>,
    pub prev: Vec<u32>,
    pub next: Vec<u32>,
    pub state: Option<Vec<f64>>,
    pub next_state: Option<Vec<f64>>,
    pub action: Option<usize>,
}

/// Per-row bound with its two components, each `R × 1`.
#[derive(Clone, Copy, Debug)]
pub struct BoundParts {
    pub bound: Var,
    pub recon: Var,
    pub kl: Var,
}

fn labeled_rows(
    model: &ActionModel,
    tape: &mut Tape,
    ps: &ParamSet,
    hu: Var,
    e: Var,
    noise: Var,
    recon: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<BoundParts> {
    let q = model.posterior(tape, ps, hu, e)?;
    let z = q.sample(tape, noise);
    let recon = recon(tape, z)?;
    let kl = q.kl_standard(tape);
    let bound = tape.sub(recon, kl);
    Ok(BoundParts { bound, recon, kl })
}

/// Labeled transition bound per turn: one-sample reconstruction of `s'`
/// from `(s, z)`, `z ~ q(z | u, e(a))`, minus `KL(q ‖ N(0, I))`.
#[allow(clippy::too_many_arguments)]
pub fn labeled_transition(
    model: &ActionModel,
    tape: &mut Tape,
    ps: &ParamSet,
    hu: Var,
    s: Var,
    s_next: Var,
    actions: &[usize],
    noise: Var,
) -> Result<BoundParts> {
    let table = tape.param(ps, EMBEDDING_TABLE)?;
    let e = tape.gather(table, actions);
    labeled_rows(model, tape, ps, hu, e, noise, |t, z| {
        model.transition_loglik(t, ps, s, z, s_next)
    })
}

/// `Σ_a q(a) L(a) ± H(q)` per turn, from `log_q` (`B × |A|`) and bounds
/// laid out action-fastest (`B·|A| × 1`).
pub fn expect_with_entropy(tape: &mut Tape, log_q: Var, rows: Var, entropy_sign: f64) -> Var {
    let (b, a) = tape.shape(log_q);
    let l = tape.reshape(rows, b, a);
    let q = tape.exp(log_q);
    let ql = tape.mul(q, l);
    let expected = tape.sum_cols(ql);
    let qlogq = tape.mul(q, log_q);
    let neg_h = tape.sum_cols(qlogq);
    let h = tape.scale(neg_h, -entropy_sign);
    tape.add(expected, h)
}

/// Unlabeled transition bound per turn, enumerating every action; the
/// noise row of a turn is shared by all its actions.
#[allow(clippy::too_many_arguments)]
pub fn unlabeled_transition(
    model: &ActionModel,
    tape: &mut Tape,
    ps: &ParamSet,
    hu: Var,
    s: Var,
    s_next: Var,
    log_q: Var,
    noise: Var,
) -> Result<Var> {
    let k = model.num_actions;
    let b = tape.shape(hu).0;
    let table = tape.param(ps, EMBEDDING_TABLE)?;
    let e = tape.tile_rows(table, b);
    let hu_r = tape.repeat_rows(hu, k);
    let s_r = tape.repeat_rows(s, k);
    let n_r = tape.repeat_rows(s_next, k);
    let noise_r = tape.repeat_rows(noise, k);
    let parts = labeled_rows(model, tape, ps, hu_r, e, noise_r, |t, z| {
        model.transition_loglik(t, ps, s_r, z, n_r)
    })?;
    Ok(expect_with_entropy(tape, log_q, parts.bound, model.config.entropy_sign))
}

/// Labeled response bound: reconstruct `u_t` token by token from
/// `(z, u_{t-1}, u_{t+1})` minus the KL of the shared inference net.
#[allow(clippy::too_many_arguments)]
pub fn labeled_response(
    model: &ActionModel,
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &Encodings,
    targets: &[&[u32]],
    actions: &[usize],
    noise: Var,
) -> Result<BoundParts> {
    let table = tape.param(ps, EMBEDDING_TABLE)?;
    let e = tape.gather(table, actions);
    labeled_rows(model, tape, ps, enc.hu, e, noise, |t, z| {
        model.response_loglik(t, ps, z, enc.hprev, enc.hnext, targets)
    })
}

pub fn unlabeled_response(
    model: &ActionModel,
    tape: &mut Tape,
    ps: &ParamSet,
    enc: &Encodings,
    targets: &[&[u32]],
    log_q: Var,
    noise: Var,
) -> Result<Var> {
    let k = model.num_actions;
    let b = targets.len();
    let table = tape.param(ps, EMBEDDING_TABLE)?;
    let e = tape.tile_rows(table, b);
    let hu_r = tape.repeat_rows(enc.hu, k);
    let hp_r = tape.repeat_rows(enc.hprev, k);
    let hn_r = tape.repeat_rows(enc.hnext, k);
    let noise_r = tape.repeat_rows(noise, k);
    let targets_r: Vec<&[u32]> = targets.iter().flat_map(|t| std::iter::repeat_n(*t, k)).collect();
    let parts = labeled_rows(model, tape, ps, hu_r, e, noise_r, |t, z| {
        model.response_loglik(t, ps, z, hp_r, hn_r, &targets_r)
    })?;
    Ok(expect_with_entropy(tape, log_q, parts.bound, model.config.entropy_sign))
}

/// Mean `−log q(a_true)` over rows.
pub fn classification_loss(tape: &mut Tape, logits: Var, actions: &[usize]) -> Var {
    let lsm = tape.log_softmax(logits);
    let picked = tape.pick(lsm, actions);
    let m = tape.mean(picked);
    tape.neg(m)
}

/// Encoded utterance and its neighbours.
#[derive(Clone, Copy, Debug)]
pub struct Encodings {
    pub hu: Var,
    pub hprev: Var,
    pub hnext: Var,
}

/// Standard-normal noise frozen for one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveNoise {
    pub fully: Matrix,
    pub partial: Matrix,
    pub fully_resp: Matrix,
    pub unlabeled: Matrix,
}

impl ObjectiveNoise {
    pub fn sample(latent: usize, nf: usize, np: usize, nu: usize, rng: &mut impl rand::Rng) -> Self {
        let mut draw = |n: usize| {
            let data = (0..n * latent)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            Matrix::from_vec(n, latent, data)
        };
        ObjectiveNoise {
            fully: draw(nf),
            partial: draw(np),
            fully_resp: draw(nf),
            unlabeled: draw(nu),
        }
    }
}

/// Mean per-turn values of each objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub labeled: f64,
    pub unlabeled: f64,
    pub classification: f64,
    pub response_labeled: f64,
    pub response_unlabeled: f64,
    pub text_classification: f64,
    /// Quantity maximized: every bound minus `alpha` times the losses.
    pub objective: f64,
}

fn states(ex: &[&TurnExample], next: bool) -> Result<Matrix> {
    let rows: Vec<&[f64]> = ex
        .iter()
        .map(|e| {
            let s = if next { &e.next_state } else { &e.state };
            s.as_deref()
                .ok_or_else(|| Error::State("turn lacks a state vector".into()))
        })
        .collect::<Result<_>>()?;
    Ok(rows_matrix(&rows))
}

fn labels(ex: &[&TurnExample]) -> Result<Vec<usize>> {
    ex.iter()
        .map(|e| {
            e.action
                .ok_or_else(|| Error::State("fully labeled turn lacks an action".into()))
        })
        .collect()
}

fn encode_all(
    model: &ActionModel,
    tape: &mut Tape,
    ps: &ParamSet,
    ex: &[&TurnExample],
    with_neighbours: bool,
) -> Result<Encodings> {
    let utts: Vec<&[u32]> = ex.iter().map(|e| e.utt.as_slice()).collect();
    let hu = model.encode(tape, ps, &utts)?;
    if !with_neighbours {
        return Ok(Encodings {
            hu,
            hprev: hu,
            hnext: hu,
        });
    }
    let prev: Vec<&[u32]> = ex.iter().map(|e| e.prev.as_slice()).collect();
    let next: Vec<&[u32]> = ex.iter().map(|e| e.next.as_slice()).collect();
    let hprev = model.encode(tape, ps, &prev)?;
    let hnext = model.encode(tape, ps, &next)?;
    Ok(Encodings { hu, hprev, hnext })
}

/// Builds the loss to minimize (the negated objective) for one minibatch
/// drawn from each supervision level. The response-generation terms and
/// the text-mode classifier are included only when `unlabeled` is
/// nonempty.
pub fn objective(
    model: &ActionModel,
    tape: &mut Tape,
    ps: &ParamSet,
    fully: &[&TurnExample],
    partial: &[&TurnExample],
    unlabeled: &[&TurnExample],
    noise: &ObjectiveNoise,
) -> Result<(Var, ObjectiveTerms)> {
    if fully.is_empty() {
        return Err(Error::Config("at least some fully labeled dialogues required".into()));
    }
    let alpha = model.config.alpha;
    let text_mode = !unlabeled.is_empty();
    let mut terms = ObjectiveTerms::default();
    let nf = fully.len() as f64;

    let enc_f = encode_all(model, tape, ps, fully, text_mode)?;
    let s_f = tape.constant(states(fully, false)?);
    let n_f = tape.constant(states(fully, true)?);
    let acts = labels(fully)?;
    let noise_f = tape.constant(noise.fully.clone());
    let lf = labeled_transition(model, tape, ps, enc_f.hu, s_f, n_f, &acts, noise_f)?;
    let lf_sum = tape.sum(lf.bound);
    let mut total = tape.scale(lf_sum, -1.0 / nf);
    terms.labeled = tape.scalar(lf_sum) / nf;

    let logits_f = model.predictor_logits(tape, ps, enc_f.hu, s_f, n_f)?;
    let cls = classification_loss(tape, logits_f, &acts);
    terms.classification = tape.scalar(cls);
    let cls_w = tape.scale(cls, alpha);
    total = tape.add(total, cls_w);

    if !partial.is_empty() {
        let np = partial.len() as f64;
        let hu = encode_all(model, tape, ps, partial, false)?.hu;
        let s = tape.constant(states(partial, false)?);
        let n = tape.constant(states(partial, true)?);
        let logits = model.predictor_logits(tape, ps, hu, s, n)?;
        let log_q = tape.log_softmax(logits);
        let noise_p = tape.constant(noise.partial.clone());
        let u = unlabeled_transition(model, tape, ps, hu, s, n, log_q, noise_p)?;
        let u_sum = tape.sum(u);
        terms.unlabeled = tape.scalar(u_sum) / np;
        let u_w = tape.scale(u_sum, -1.0 / np);
        total = tape.add(total, u_w);
    }

    if text_mode {
        let targets: Vec<&[u32]> = fully.iter().map(|e| e.utt.as_slice()).collect();
        let noise_fr = tape.constant(noise.fully_resp.clone());
        let lr = labeled_response(model, tape, ps, &enc_f, &targets, &acts, noise_fr)?;
        let lr_sum = tape.sum(lr.bound);
        terms.response_labeled = tape.scalar(lr_sum) / nf;
        let lr_w = tape.scale(lr_sum, -1.0 / nf);
        total = tape.add(total, lr_w);

        let tl = model.text_logits(tape, ps, enc_f.hu, enc_f.hprev, enc_f.hnext)?;
        let tcls = classification_loss(tape, tl, &acts);
        terms.text_classification = tape.scalar(tcls);
        let tcls_w = tape.scale(tcls, alpha);
        total = tape.add(total, tcls_w);

        let nu = unlabeled.len() as f64;
        let enc_u = encode_all(model, tape, ps, unlabeled, true)?;
        let targets: Vec<&[u32]> = unlabeled.iter().map(|e| e.utt.as_slice()).collect();
        let logits = model.text_logits(tape, ps, enc_u.hu, enc_u.hprev, enc_u.hnext)?;
        let log_q = tape.log_softmax(logits);
        let noise_u = tape.constant(noise.unlabeled.clone());
        let ur = unlabeled_response(model, tape, ps, &enc_u, &targets, log_q, noise_u)?;
        let ur_sum = tape.sum(ur);
        terms.response_unlabeled = tape.scalar(ur_sum) / nu;
        let ur_w = tape.scale(ur_sum, -1.0 / nu);
        total = tape.add(total, ur_w);
    }
    terms.objective = -tape.scalar(total);
    Ok((total, terms))
}

impl ActionModel {
    fn single(&self, utt: &[u32], s: &[f64], s_next: &[f64]) -> (Tape, Var, Var, Var) {
        let mut tape = Tape::new();
        let hu = self.encode(&mut tape, &self.params, &[utt]).expect("checked utterance");
        let sv = tape.row(s);
        let nv = tape.row(s_next);
        (tape, hu, sv, nv)
    }

    fn check_turn(&self, utt: &[u32], s: &[f64], s_next: &[f64], noise: &[f64]) -> Result<()> {
        if s.len() != self.state_width || s_next.len() != self.state_width {
            return Err(Error::dim(
                "state vector",
                self.state_width.to_string(),
                format!("{} / {}", s.len(), s_next.len()),
            ));
        }
        if noise.len() != self.config.latent_dim {
            return Err(Error::dim(
                "latent noise",
                self.config.latent_dim.to_string(),
                noise.len().to_string(),
            ));
        }
        if let Some(&t) = utt.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::dim(
                "utterance",
                format!("token id < {}", self.vocab_size),
                t.to_string(),
            ));
        }
        Ok(())
    }

    /// Labeled transition bound of one turn under action `a`.
    pub fn labeled_bound(&self, s_next: &[f64], s: &[f64], utt: &[u32], a: usize, noise: &[f64]) -> Result<f64> {
        self.check_turn(utt, s, s_next, noise)?;
        if a >= self.num_actions {
            return Err(Error::dim(
                "action id",
                format!("< {}", self.num_actions),
                a.to_string(),
            ));
        }
        let (mut tape, hu, sv, nv) = self.single(utt, s, s_next);
        let nz = tape.row(noise);
        let parts = labeled_transition(self, &mut tape, &self.params, hu, sv, nv, &[a], nz)?;
        Ok(tape.scalar(parts.bound))
    }

    /// Unlabeled transition bound of one turn, weighting each action by
    /// the model's own predictor.
    pub fn unlabeled_bound(&self, s_next: &[f64], s: &[f64], utt: &[u32], noise: &[f64]) -> Result<f64> {
        self.check_turn(utt, s, s_next, noise)?;
        let (mut tape, hu, sv, nv) = self.single(utt, s, s_next);
        let logits = self.predictor_logits(&mut tape, &self.params, hu, sv, nv)?;
        let log_q = tape.log_softmax(logits);
        let nz = tape.row(noise);
        let u = unlabeled_transition(self, &mut tape, &self.params, hu, sv, nv, log_q, nz)?;
        Ok(tape.scalar(u))
    }

    /// Unlabeled transition bound under an externally supplied action
    /// distribution (log-probabilities over the action set).
    pub fn unlabeled_bound_with(
        &self,
        s_next: &[f64],
        s: &[f64],
        utt: &[u32],
        log_q: &[f64],
        noise: &[f64],
    ) -> Result<f64> {
        self.check_turn(utt, s, s_next, noise)?;
        if log_q.len() != self.num_actions {
            return Err(Error::dim(
                "action distribution",
                self.num_actions.to_string(),
                log_q.len().to_string(),
            ));
        }
        let (mut tape, hu, sv, nv) = self.single(utt, s, s_next);
        let lq = tape.row(log_q);
        let nz = tape.row(noise);
        let u = unlabeled_transition(self, &mut tape, &self.params, hu, sv, nv, lq, nz)?;
        Ok(tape.scalar(u))
    }

    fn response_setup(&self, utt: &[u32], prev: &[u32], next: &[u32]) -> Result<(Tape, Encodings)> {
        let mut tape = Tape::new();
        let hu = self.encode(&mut tape, &self.params, &[utt])?;
        let hprev = self.encode(&mut tape, &self.params, &[prev])?;
        let hnext = self.encode(&mut tape, &self.params, &[next])?;
        Ok((tape, Encodings { hu, hprev, hnext }))
    }

    pub fn response_labeled_bound(
        &self,
        utt: &[u32],
        prev: &[u32],
        next: &[u32],
        a: usize,
        noise: &[f64],
    ) -> Result<f64> {
        let (mut tape, enc) = self.response_setup(utt, prev, next)?;
        let nz = tape.row(noise);
        let parts = labeled_response(self, &mut tape, &self.params, &enc, &[utt], &[a], nz)?;
        Ok(tape.scalar(parts.bound))
    }

    pub fn response_unlabeled_bound(&self, utt: &[u32], prev: &[u32], next: &[u32], noise: &[f64]) -> Result<f64> {
        let (mut tape, enc) = self.response_setup(utt, prev, next)?;
        let logits = self.text_logits(&mut tape, &self.params, enc.hu, enc.hprev, enc.hnext)?;
        let log_q = tape.log_softmax(logits);
        let nz = tape.row(noise);
        let u = unlabeled_response(self, &mut tape, &self.params, &enc, &[utt], log_q, nz)?;
        Ok(tape.scalar(u))
    }

    /// Mean negative log-likelihood of the true actions.
    pub fn classification_loss(&self, turns: &[&TurnExample]) -> Result<f64> {
        let mut tape = Tape::new();
        let utts: Vec<&[u32]> = turns.iter().map(|e| e.utt.as_slice()).collect();
        let hu = self.encode(&mut tape, &self.params, &utts)?;
        let s = tape.constant(states(turns, false)?);
        let n = tape.constant(states(turns, true)?);
        let logits = self.predictor_logits(&mut tape, &self.params, hu, s, n)?;
        let loss = classification_loss(&mut tape, logits, &labels(turns)?);
        Ok(tape.scalar(loss))
    }
}
