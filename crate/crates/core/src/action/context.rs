//! State placeholders for text-only dialogues: a recurrent summary of the
//! utterance history trained to reconstruct the annotated state bits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{bernoulli_loglik, ActionConfig, ActionModel};
use crate::corpus::{to_dense, Corpus, Demonstration};
use crate::error::{Error, Result};
use crate::math::{dense_forward, gru_step, sigmoid, Activation, Adam, Matrix, ParamSet, Tape};
use crate::seed::{stream_rng, STREAM_INIT, STREAM_TRAIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextModel {
    pub hidden: usize,
    pub state_width: usize,
    pub params: ParamSet,
}

/// Per-step inputs `[enc(system_{k-1}), enc(user_{k-1})]`, with the opening
/// as the user half of step 0.
fn step_inputs(model: &ActionModel, d: &Demonstration) -> Result<Matrix> {
    let mut utts: Vec<&[u32]> = vec![&[], &d.opening];
    for t in &d.turns {
        utts.push(&t.system);
        utts.push(&t.user);
    }
    let mut tape = Tape::new();
    let h = model.encode(&mut tape, &model.params, &utts)?;
    let enc = tape.value(h);
    let width = 2 * enc.cols;
    // rows: steps 0..=n
    Ok(Matrix::from_vec(d.turns.len() + 1, width, enc.data.clone()))
}

impl ContextModel {
    fn new(hidden: usize, input: usize, state_width: usize, seed: u64) -> Result<Self> {
        let mut ps = ParamSet::new(seed);
        let mut rng = ps.rng(STREAM_INIT + 100);
        ps.add_gru("ctx", input, hidden, &mut rng)?;
        ps.add_dense("ctx_out", hidden, state_width, &mut rng)?;
        Ok(ContextModel {
            hidden,
            state_width,
            params: ps,
        })
    }

    /// Estimated binary state before each turn plus the final state
    /// (`turns + 1` vectors).
    pub fn placeholders(&self, model: &ActionModel, d: &Demonstration) -> Result<Vec<Vec<f64>>> {
        let x = step_inputs(model, d)?;
        let mut tape = Tape::new();
        let mut h = tape.constant(Matrix::zeros(1, self.hidden));
        let mut out = Vec::with_capacity(x.rows);
        for k in 0..x.rows {
            let xk = tape.row(x.row(k));
            h = gru_step(&mut tape, &self.params, "ctx", xk, h)?;
            let logits = dense_forward(&mut tape, &self.params, "ctx_out", h, Activation::Linear)?;
            out.push(
                tape.value(logits)
                    .data
                    .iter()
                    .map(|&l| if sigmoid(l) > 0.5 { 1.0 } else { 0.0 })
                    .collect(),
            );
        }
        Ok(out)
    }
}

/// Fits the context model on dialogues that carry states; the utterance
/// encoder of `model` is frozen.
pub fn train_context_model(
    model: &ActionModel,
    corpora: &[&Corpus],
    config: &ActionConfig,
) -> Result<(ContextModel, Vec<f64>)> {
    let width = model.state_width;
    let mut data = Vec::new();
    for c in corpora {
        for d in &c.dialogues {
            let Some(final_state) = &d.final_state else { continue };
            let x = step_inputs(model, d)?;
            let mut targets: Vec<Vec<f64>> = Vec::with_capacity(x.rows);
            for t in &d.turns {
                let s = t
                    .state
                    .as_ref()
                    .ok_or_else(|| Error::State(format!("dialogue {} lacks states", d.id)))?;
                targets.push(to_dense(s, width));
            }
            targets.push(to_dense(final_state, width));
            data.push((x, targets));
        }
    }
    if data.is_empty() {
        return Err(Error::Config("context model needs dialogues with states".into()));
    }
    let input = data[0].0.cols;
    let mut ctx = ContextModel::new(config.hidden, input, width, config.seed)?;
    let mut opt = Adam::new(config.lr);
    let mut rng = stream_rng(config.seed, STREAM_TRAIN + 100);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = config.batch_size.max(1);
    let mut losses = Vec::with_capacity(config.context_epochs);
    for _ in 0..config.context_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0.0;
        for chunk in order.chunks(bs) {
            let batch: Vec<&(Matrix, Vec<Vec<f64>>)> = chunk.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let b = batch.len();
            let steps = batch.iter().map(|(x, _)| x.rows).max().unwrap_or(0);
            let mut h = tape.constant(Matrix::zeros(b, ctx.hidden));
            let mut ll_terms = Vec::new();
            let mut valid_total = 0.0;
            for k in 0..steps {
                let mut xk = Matrix::zeros(b, input);
                let mut tk = Matrix::zeros(b, width);
                let mut mask = Matrix::zeros(b, 1);
                for (r, (x, targets)) in batch.iter().enumerate() {
                    if k < x.rows {
                        xk.row_mut(r).copy_from_slice(x.row(k));
                        tk.row_mut(r).copy_from_slice(&targets[k]);
                        mask.set(r, 0, 1.0);
                        valid_total += 1.0;
                    }
                }
                let xv = tape.constant(xk);
                let h_new = gru_step(&mut tape, &ctx.params, "ctx", xv, h)?;
                let mv = tape.constant(mask);
                let delta = tape.sub(h_new, h);
                let delta = tape.mul(delta, mv);
                h = tape.add(h, delta);
                let logits = dense_forward(&mut tape, &ctx.params, "ctx_out", h, Activation::Linear)?;
                let tv = tape.constant(tk);
                let ll = bernoulli_loglik(&mut tape, logits, tv);
                let ll = tape.mul(ll, mv);
                ll_terms.push(tape.sum(ll));
            }
            let cat = tape.concat(&ll_terms);
            let s = tape.sum(cat);
            let loss = tape.scale(s, -1.0 / valid_total);
            total += tape.scalar(s);
            count += valid_total;
            tape.backward(loss);
            tape.accumulate(&mut ctx.params);
            opt.step(&mut ctx.params);
        }
        losses.push(-total / count);
    }
    Ok((ctx, losses))
}
