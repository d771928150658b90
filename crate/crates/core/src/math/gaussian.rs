//! Diagonal Gaussians, closed-form KL, reparameterized sampling and the
//! Boltzmann softmax, in both plain and tape-recorded forms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl Gaussian {
    /// Builds a Gaussian, clamping log-variances into `[-20, 20]`.
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::dim("gaussian", mean.len(), log_variance.len()));
        }
        let log_variance = log_variance
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Gaussian { mean, log_variance })
    }

    pub fn standard(dim: usize) -> Self {
        Gaussian {
            mean: vec![0.0; dim],
            log_variance: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density of `x` under this diagonal Gaussian.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("gaussian log-density", self.dim(), x.len()));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_variance)
            .map(|((x, m), lv)| -0.5 * ((2.0 * PI).ln() + lv + (x - m) * (x - m) * (-lv).exp()))
            .sum())
    }
}

/// `KL(q ‖ p)` for diagonal Gaussians.
pub fn gaussian_kl(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::dim("gaussian_kl", q.dim(), p.dim()));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, lq) = (q.mean[i], q.log_variance[i]);
        let (mp, lp) = (p.mean[i], p.log_variance[i]);
        let d = lq - lp;
        kl += 0.5 * (d.exp() - d + (mq - mp) * (mq - mp) * (-lp).exp() - 1.0);
    }
    Ok(kl.max(0.0))
}

/// `mean + exp(log_variance / 2) ⊙ noise`.
pub fn reparam_sample(g: &Gaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::dim("reparam_sample", g.dim(), noise.len()));
    }
    Ok(g.mean
        .iter()
        .zip(&g.log_variance)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Boltzmann distribution `softmax(logits / temperature)` with max subtraction.
pub fn softmax_logits(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("softmax logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Tape-recorded diagonal Gaussian over the columns of `mean`/`log_var`
/// (one distribution per row).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVar {
    /// Wraps raw head outputs, clamping log-variances.
    pub fn from_heads(tape: &mut Tape, mean: Var, raw_log_var: Var) -> Self {
        let log_var = tape.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        GaussianVar { mean, log_var }
    }

    pub fn standard(tape: &mut Tape, rows: usize, dim: usize) -> Self {
        let mean = tape.constant(Matrix::zeros(rows, dim));
        let log_var = tape.constant(Matrix::zeros(rows, dim));
        GaussianVar { mean, log_var }
    }

    pub fn to_plain(&self, tape: &Tape, row: usize) -> Gaussian {
        Gaussian {
            mean: tape.value(self.mean).row(row).to_vec(),
            log_variance: tape.value(self.log_var).row(row).to_vec(),
        }
    }

    /// Reparameterized sample; `noise` broadcasts when it has one row.
    pub fn sample(&self, tape: &mut Tape, noise: Var) -> Var {
        let half = tape.scale(self.log_var, 0.5);
        let std = tape.exp(half);
        let scaled = tape.mul(std, noise);
        tape.add(self.mean, scaled)
    }

    /// Per-row `KL(self ‖ p)`, shape `rows × 1`.
    pub fn kl(&self, tape: &mut Tape, p: &GaussianVar) -> Var {
        let diff = tape.sub(self.mean, p.mean);
        let sq = tape.square(diff);
        let neg_lp = tape.neg(p.log_var);
        let inv_p = tape.exp(neg_lp);
        let maha = tape.mul(sq, inv_p);
        let lv_diff = tape.sub(self.log_var, p.log_var);
        let ratio = tape.exp(lv_diff);
        let s = tape.sub(ratio, lv_diff);
        let s = tape.add(s, maha);
        let s = tape.add_scalar(s, -1.0);
        let row = tape.sum_cols(s);
        tape.scale(row, 0.5)
    }

    /// Per-row `KL(self ‖ N(0, I))`, shape `rows × 1`.
    pub fn kl_standard(&self, tape: &mut Tape) -> Var {
        let sq = tape.square(self.mean);
        let ratio = tape.exp(self.log_var);
        let s = tape.sub(ratio, self.log_var);
        let s = tape.add(s, sq);
        let s = tape.add_scalar(s, -1.0);
        let row = tape.sum_cols(s);
        tape.scale(row, 0.5)
    }

    /// Per-row log-density of `x`, shape `rows × 1`; `x` broadcasts over rows.
    pub fn log_density(&self, tape: &mut Tape, x: Var) -> Var {
        let diff = tape.sub(x, self.mean);
        let diff = tape.neg(diff);
        let sq = tape.square(diff);
        let neg_lv = tape.neg(self.log_var);
        let inv = tape.exp(neg_lv);
        let maha = tape.mul(sq, inv);
        let s = tape.add(maha, self.log_var);
        let s = tape.add_scalar(s, (2.0 * PI).ln());
        let row = tape.sum_cols(s);
        tape.scale(row, -0.5)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn g(m: &[f64], lv: &[f64]) -> Gaussian {
        Gaussian::new(m.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn kl_identical_is_zero() {
        let q = Gaussian::standard(3);
        assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let kl = gaussian_kl(&g(&[1.0], &[0.0]), &g(&[0.0], &[0.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert!(gaussian_kl(&Gaussian::standard(2), &Gaussian::standard(3)).is_err());
    }

    /// 1-D KL by trapezoid quadrature of q(x) (ln q(x) − ln p(x)).
    fn quadrature_kl(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
        let sq = (0.5 * lq).exp();
        let (lo, hi) = (mq - 12.0 * sq, mq + 12.0 * sq);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let logn = |x: f64, m: f64, lv: f64| -0.5 * ((2.0 * PI).ln() + lv + (x - m) * (x - m) / lv.exp());
        let f = |x: f64| {
            let lqx = logn(x, mq, lq);
            lqx.exp() * (lqx - logn(x, mp, lp))
        };
        let mut acc = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            acc += f(lo + i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (mq, lq) = (rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));
            let (mp, lp) = (rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5));
            let closed = gaussian_kl(&g(&[mq], &[lq]), &g(&[mp], &[lp])).unwrap();
            let quad = quadrature_kl(mq, lq, mp, lp);
            assert!((closed - quad).abs() < 1e-6, "{closed} vs {quad}");
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_only_on_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let d = rng.random_range(1..5);
            let mk = |rng: &mut ChaCha8Rng| {
                let m: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let l: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                g(&m, &l)
            };
            let (q, p) = (mk(&mut rng), mk(&mut rng));
            assert!(gaussian_kl(&q, &p).unwrap() > 0.0);
            assert_eq!(gaussian_kl(&q, &q).unwrap(), 0.0);
        }
    }

    #[test]
    fn tape_kl_agrees_with_closed_form() {
        let q = g(&[0.3, -1.0], &[0.5, -0.2]);
        let p = g(&[-0.1, 0.4], &[-0.3, 0.7]);
        let mut t = Tape::new();
        let qv = GaussianVar {
            mean: t.row(&q.mean),
            log_var: t.row(&q.log_variance),
        };
        let pv = GaussianVar {
            mean: t.row(&p.mean),
            log_var: t.row(&p.log_variance),
        };
        let kl = qv.kl(&mut t, &pv);
        assert!((t.scalar(kl) - gaussian_kl(&q, &p).unwrap()).abs() < 1e-12);
        let ks = qv.kl_standard(&mut t);
        let expect = gaussian_kl(&q, &Gaussian::standard(2)).unwrap();
        assert!((t.scalar(ks) - expect).abs() < 1e-12);
    }

    #[test]
    fn log_variance_is_clamped() {
        let q = g(&[0.0], &[-1e6]);
        assert_eq!(q.log_variance[0], LOG_VAR_MIN);
        let q = g(&[0.0], &[1e6]);
        assert_eq!(q.log_variance[0], LOG_VAR_MAX);
    }

    #[test]
    fn reparam_zero_noise_is_mean() {
        let q = g(&[1.5, -2.0], &[0.3, 4.0]);
        assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), q.mean);
    }

    #[test]
    fn reparam_collapsed_variance_is_mean() {
        let q = g(&[1.5, -2.0], &[-1e9, -1e9]);
        let s = reparam_sample(&q, &[1.0, -1.0]).unwrap();
        for (a, b) in s.iter().zip(&q.mean) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn reparam_monte_carlo_mean() {
        let q = g(&[0.7, -1.3], &[0.4, -0.8]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s = reparam_sample(&q, &e).unwrap();
            sum[0] += s[0];
            sum[1] += s[1];
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let sd = (0.5 * q.log_variance[i]).exp();
            assert!((mean - q.mean[i]).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_logits(&[0.0, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax_logits(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax_logits(&[5.0, -3.0, 1.0], 1e6).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-3));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax_logits(&[f64::NAN, 0.0], 1.0), Err(Error::Numeric(_))));
        assert!(softmax_logits(&[0.0], 0.0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
