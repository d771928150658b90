use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub num_params: usize,
    pub pass: bool,
}

/// Compares tape gradients with central finite differences over every
/// parameter entry. Returns the largest
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `objective` must be deterministic for fixed parameters (freeze any noise).
pub fn grad_check<F>(params: &ParamSet, epsilon: f64, objective: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut work = params.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let out = objective(&mut tape, &work)?;
    tape.backward(out);
    tape.accumulate(&mut work);
    let analytic = work.flat_grads();
    work.zero_grads();

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let o = objective(&mut t, ps)?;
        Ok(t.scalar(o))
    };

    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let orig = *work.entry_mut(k);
        *work.entry_mut(k) = orig + epsilon;
        let up = eval(&work)?;
        *work.entry_mut(k) = orig - epsilon;
        let down = eval(&work)?;
        *work.entry_mut(k) = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub fn report<F>(op_name: &str, params: &ParamSet, epsilon: f64, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let max_rel_err = grad_check(params, epsilon, objective)?;
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_err,
        num_params: params.num_scalars(),
        pass: max_rel_err < GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gru_step, Activation, Matrix};

    #[test]
    fn quadratic_objective_is_exact() {
        let mut ps = ParamSet::new(0);
        ps.insert("w", Matrix::row_vector(vec![0.3, -1.2, 2.5, 0.01])).unwrap();
        let err = grad_check(&ps, 1e-5, |t, ps| {
            let w = t.param(ps, "w")?;
            let sq = t.square(w);
            let s = t.sum(sq);
            Ok(t.scale(s, 0.5))
        })
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    fn sig_len(t: &Tape, v: Var) -> usize {
        t.value(v).len()
    }

    #[test]
    fn every_tape_op_passes() {
        let mut ps = ParamSet::new(21);
        let mut rng = ps.rng(0);
        ps.add_dense("a", 3, 4, &mut rng).unwrap();
        ps.add_gru("g", 4, 4, &mut rng).unwrap();
        ps.add_embedding("emb", 5, 3, 0.5, &mut rng).unwrap();
        ps.add_dense("head", 4, 5, &mut rng).unwrap();
        let err = grad_check(&ps, 1e-5, |t, ps| {
            let table = t.param(ps, "emb")?;
            let x = t.gather(table, &[1, 3, 3]);
            let h = crate::math::dense_forward(t, ps, "a", x, Activation::Tanh)?;
            let h0 = t.constant(Matrix::from_rows(&vec![vec![0.1, -0.2, 0.3, 0.0]; 3]));
            let h = gru_step(t, ps, "g", h, h0)?;
            let logits = crate::math::dense_forward(t, ps, "head", h, Activation::Linear)?;
            let lsm = t.log_softmax(logits);
            let picked = t.pick(lsm, &[0, 4, 2]);
            let tr = t.transpose(logits);
            let rep = t.repeat_rows(tr, 2);
            let grp = t.group_sum(rep, 2);
            let tiled = t.tile_rows(grp, 2);
            let sp = t.softplus(tiled);
            let sl = t.slice(sp, 1, 2);
            let cl = t.clamp(sl, -10.0, 10.0);
            let sig = t.sigmoid(cl);
            let rows = t.sum_rows(sig);
            let flat = t.reshape(sig, sig_len(t, sig), 1);
            let seg = t.segment_sum(
                flat,
                &[0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1][..sig_len(t, sig)],
                2,
            );
            let seg = t.square(seg);
            let seg = t.sum(seg);
            let rs = t.sum(rows);
            let rs = t.add(rs, seg);
            let m = t.min(picked, rs);
            let a = t.sum(picked);
            let b = t.sum(m);
            let cat = t.concat(&[a, b]);
            let e = t.exp(cat);
            let s = t.sum(e);
            Ok(t.mean(s))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
