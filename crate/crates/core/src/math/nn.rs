//! Layer-level helpers built on the tape.

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

/// Affine map `x W + b` followed by `act`. `x` may hold several rows.
pub fn dense_forward(tape: &mut Tape, params: &ParamSet, layer: &str, input: Var, act: Activation) -> Result<Var> {
    let w = tape.param(params, &format!("{layer}.w"))?;
    let b = tape.param(params, &format!("{layer}.b"))?;
    let (_, in_cols) = tape.shape(input);
    let (w_rows, w_cols) = tape.shape(w);
    if in_cols != w_rows {
        return Err(Error::dim(
            format!("dense layer {layer}"),
            format!("input width {w_rows} (weights {w_rows}x{w_cols})"),
            format!("input width {in_cols}"),
        ));
    }
    let xw = tape.matmul(input, w);
    let y = tape.add(xw, b);
    Ok(match act {
        Activation::Linear => y,
        Activation::Tanh => tape.tanh(y),
        Activation::Sigmoid => tape.sigmoid(y),
    })
}

/// Gated recurrent update:
///
/// ```text
/// z  = σ(x Wz + h Uz + bz)
/// r  = σ(x Wr + h Ur + br)
/// ĥ  = tanh(x Wh + (r ⊙ h) Uh + bh)
/// h' = h + z ⊙ (ĥ − h)
/// ```
pub fn gru_step(tape: &mut Tape, params: &ParamSet, cell: &str, input: Var, hidden: Var) -> Result<Var> {
    let wz = tape.param(params, &format!("{cell}.wz"))?;
    let uz = tape.param(params, &format!("{cell}.uz"))?;
    let (w_in, w_hid) = tape.shape(wz);
    let (in_rows, in_cols) = tape.shape(input);
    let (h_rows, h_cols) = tape.shape(hidden);
    if in_cols != w_in || h_cols != w_hid || in_rows != h_rows {
        return Err(Error::dim(
            format!("recurrent cell {cell}"),
            format!("input ?x{w_in}, hidden ?x{w_hid}"),
            format!("input {in_rows}x{in_cols}, hidden {h_rows}x{h_cols}"),
        ));
    }
    let gate = |tape: &mut Tape, w: Var, u: Var, b: &str, h: Var| -> Result<Var> {
        let b = tape.param(params, &format!("{cell}.{b}"))?;
        let xw = tape.matmul(input, w);
        let hu = tape.matmul(h, u);
        let s = tape.add(xw, hu);
        Ok(tape.add(s, b))
    };
    let za = gate(tape, wz, uz, "bz", hidden)?;
    let z = tape.sigmoid(za);
    let wr = tape.param(params, &format!("{cell}.wr"))?;
    let ur = tape.param(params, &format!("{cell}.ur"))?;
    let ra = gate(tape, wr, ur, "br", hidden)?;
    let r = tape.sigmoid(ra);
    let rh = tape.mul(r, hidden);
    let wh = tape.param(params, &format!("{cell}.wh"))?;
    let uh = tape.param(params, &format!("{cell}.uh"))?;
    let ca = gate(tape, wh, uh, "bh", rh)?;
    let cand = tape.tanh(ca);
    let diff = tape.sub(cand, hidden);
    let step = tape.mul(z, diff);
    Ok(tape.add(hidden, step))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::math::Matrix;

    fn seeded(seed: u64) -> ParamSet {
        ParamSet::new(seed)
    }

    #[test]
    fn identity_dense_is_identity() {
        let mut ps = seeded(0);
        ps.insert("l.w", Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]))
            .unwrap();
        ps.insert("l.b", Matrix::zeros(1, 2)).unwrap();
        let mut t = Tape::new();
        let x = t.row(&[1.0, 2.0]);
        let y = dense_forward(&mut t, &ps, "l", x, Activation::Linear).unwrap();
        assert_eq!(t.value(y).data, vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weight_dense_returns_bias() {
        let mut ps = seeded(0);
        ps.add_dense_zero("l", 3, 2).unwrap();
        ps.get_mut("l.b").unwrap().data = vec![0.25, -4.0];
        let mut t = Tape::new();
        let x = t.row(&[9.0, -1.0, 3.5]);
        let y = dense_forward(&mut t, &ps, "l", x, Activation::Linear).unwrap();
        assert_eq!(t.value(y).data, vec![0.25, -4.0]);
    }

    #[test]
    fn dense_matches_straight_line_product() {
        let mut ps = seeded(11);
        let mut rng = ps.rng(0);
        ps.add_dense("l", 3, 2, &mut rng).unwrap();
        ps.get_mut("l.b").unwrap().data = vec![0.3, -0.7];
        let x = [0.5, -1.25, 2.0];
        let mut t = Tape::new();
        let xv = t.row(&x);
        let y = dense_forward(&mut t, &ps, "l", xv, Activation::Linear).unwrap();
        let w = ps.get("l.w").unwrap();
        let b = ps.get("l.b").unwrap();
        for j in 0..2 {
            let mut acc = b.data[j];
            acc += x[0] * w.data[j];
            acc += x[1] * w.data[2 + j];
            acc += x[2] * w.data[4 + j];
            assert!((t.value(y).data[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_shape_mismatch_names_layer() {
        let mut ps = seeded(0);
        ps.add_dense_zero("proj", 3, 2).unwrap();
        let mut t = Tape::new();
        let x = t.row(&[1.0, 2.0]);
        let err = dense_forward(&mut t, &ps, "proj", x, Activation::Linear).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("proj") && msg.contains("3x2"), "{msg}");
    }

    #[test]
    fn zero_gru_keeps_zero_hidden() {
        let mut ps = seeded(0);
        for g in ["z", "r", "h"] {
            ps.insert(&format!("c.w{g}"), Matrix::zeros(4, 4)).unwrap();
            ps.insert(&format!("c.u{g}"), Matrix::zeros(4, 4)).unwrap();
            ps.insert(&format!("c.b{g}"), Matrix::zeros(1, 4)).unwrap();
        }
        let mut t = Tape::new();
        let x = t.row(&[1.0, -2.0, 3.0, 0.5]);
        let h = t.row(&[0.0; 4]);
        let h2 = gru_step(&mut t, &ps, "c", x, h).unwrap();
        assert_eq!(t.value(h2).data, vec![0.0; 4]);
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut ps = seeded(4);
        let mut rng = ps.rng(1);
        ps.add_gru("c", 4, 4, &mut rng).unwrap();
        for g in ["z", "r", "h"] {
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            ps.get_mut(&format!("c.b{g}")).unwrap().data = b;
        }
        let x = [0.3, -0.8, 1.1, 0.05];
        let h = [0.2, -0.4, 0.9, -0.1];
        let mut t = Tape::new();
        let xv = t.row(&x);
        let hv = t.row(&h);
        let out = gru_step(&mut t, &ps, "c", xv, hv).unwrap();

        let get = |n: &str| ps.get(n).unwrap().clone();
        let lin = |w: &Matrix, u: &Matrix, b: &Matrix, hh: &[f64], j: usize| {
            let mut s = b.data[j];
            for i in 0..4 {
                s += x[i] * w.data[i * 4 + j];
            }
            for i in 0..4 {
                s += hh[i] * u.data[i * 4 + j];
            }
            s
        };
        let (wz, uz, bz) = (get("c.wz"), get("c.uz"), get("c.bz"));
        let (wr, ur, br) = (get("c.wr"), get("c.ur"), get("c.br"));
        let (wh, uh, bh) = (get("c.wh"), get("c.uh"), get("c.bh"));
        let r: Vec<f64> = (0..4).map(|j| sig(lin(&wr, &ur, &br, &h, j))).collect();
        let rh: Vec<f64> = (0..4).map(|j| r[j] * h[j]).collect();
        for j in 0..4 {
            let z = sig(lin(&wz, &uz, &bz, &h, j));
            let c = lin(&wh, &uh, &bh, &rh, j).tanh();
            let expect = (1.0 - z) * h[j] + z * c;
            assert!((t.value(out).data[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_hidden_stays_bounded() {
        let mut ps = seeded(9);
        let mut rng = ps.rng(2);
        ps.add_gru("c", 3, 5, &mut rng).unwrap();
        for trial in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
            let scale = if trial % 2 == 0 { 0.5 } else { 5.0 };
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-scale..scale)).collect();
            let mut t = Tape::new();
            let xv = t.row(&x);
            let hv = t.row(&h);
            let out = gru_step(&mut t, &ps, "c", xv, hv).unwrap();
            let bound = h.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(t.value(out).data.iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }
}
