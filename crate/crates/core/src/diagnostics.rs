//! Gradient checks of every trained objective on small random instances,
//! as surfaced by the `gradcheck` command.

use rand::Rng;

use crate::action::{objective, ActionConfig, ActionModel, ObjectiveNoise, TurnExample};
use crate::error::Result;
use crate::math::{gradcheck_report, GradCheckReport, Matrix, ParamSet};
use crate::policy::{surrogate, PolicyConfig, PolicyNet, UpdateBatch};
use crate::reward::{DiscConfig, DiscSample, Discriminator};
use crate::seed::{stream_rng, STREAM_INIT};
use crate::vrnn::{sample_noise, Vrnn, VrnnConfig, VrnnMode, VrnnSequence};

/// Finite-difference step used by the suite.
pub const EPSILON: f64 = 1e-5;

fn jitter(ps: &mut ParamSet, rng: &mut impl Rng, scale: f64) {
    for k in 0..ps.num_scalars() {
        *ps.entry_mut(k) = rng.random_range(-scale..scale);
    }
}

fn bits(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

fn turn(rng: &mut impl Rng, width: usize, vocab: u32, actions: usize) -> TurnExample {
    let mut utt = |n: usize| (0..n).map(|_| rng.random_range(0..vocab)).collect::<Vec<u32>>();
    let (u, p, n) = (utt(3), utt(2), utt(2));
    TurnExample {
        utt: u,
        prev: p,
        next: n,
        state: Some(bits(rng, width)),
        next_state: Some(bits(rng, width)),
        action: Some(rng.random_range(0..actions)),
    }
}

/// The semi-supervised action-learning objective over all three supervision levels.
pub fn check_action_objective(seed: u64) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, STREAM_INIT + 900);
    let cfg = ActionConfig {
        embed_dim: 2,
        latent_dim: 2,
        hidden: 3,
        token_dim: 2,
        max_len: 5,
        seed,
        ..ActionConfig::default()
    };
    let (width, actions, vocab) = (4, 4, 6);
    let m = ActionModel::new(cfg.clone(), width, actions, vocab)?;
    let f: Vec<TurnExample> = (0..3).map(|_| turn(&mut rng, width, vocab as u32, actions)).collect();
    let p: Vec<TurnExample> = (0..2)
        .map(|_| TurnExample {
            action: None,
            ..turn(&mut rng, width, vocab as u32, actions)
        })
        .collect();
    let u: Vec<TurnExample> = (0..2)
        .map(|_| TurnExample {
            action: None,
            state: None,
            next_state: None,
            ..turn(&mut rng, width, vocab as u32, actions)
        })
        .collect();
    let (fr, pr, ur): (Vec<&TurnExample>, Vec<&TurnExample>, Vec<&TurnExample>) =
        (f.iter().collect(), p.iter().collect(), u.iter().collect());
    let noise = ObjectiveNoise::sample(cfg.latent_dim, fr.len(), pr.len(), ur.len(), &mut rng);
    gradcheck_report("action_objective", &m.params, EPSILON, |t, ps| {
        Ok(objective(&m, t, ps, &fr, &pr, &ur, &noise)?.0)
    })
}

/// The VRNN ELBO of two random trajectories with frozen noise.
pub fn check_vrnn_elbo(seed: u64, mode: VrnnMode) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, STREAM_INIT + 901);
    let cfg = VrnnConfig {
        z_dim: 2,
        h_dim: 3,
        hidden: 3,
        mode,
        seed,
        ..VrnnConfig::default()
    };
    let table = random_matrix(&mut rng, 3, 2);
    let mut m = Vrnn::new(cfg, table.clone(), 2)?;
    jitter(&mut m.params, &mut rng, 0.5);
    let mut seq = |len: usize| -> Result<VrnnSequence> {
        let states: Vec<Vec<f64>> = (0..len).map(|_| bits(&mut rng, 2)).collect();
        let actions: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
        VrnnSequence::from_actions(&table, &states, &actions)
    };
    let (a, b) = (seq(4)?, seq(2)?);
    let noise = sample_noise(1, 4, 2, 2, &mut rng);
    let name = match mode {
        VrnnMode::Full => "vrnn_elbo",
        VrnnMode::DeterministicOnly => "vrnn_elbo_deterministic",
        VrnnMode::StochasticOnly => "vrnn_elbo_stochastic",
    };
    gradcheck_report(name, &m.params, EPSILON, |t, ps| m.elbo_var(t, ps, &[&a, &b], &noise))
}

/// The importance-weighted adversarial discriminator loss.
pub fn check_adversarial_loss(seed: u64) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, STREAM_INIT + 902);
    let cfg = DiscConfig {
        hidden: 6,
        seed,
        ..DiscConfig::default()
    };
    let mut disc = Discriminator::new(cfg, random_matrix(&mut rng, 5, 3), 4)?;
    jitter(&mut disc.params, &mut rng, 0.7);
    let mut batch = |n: usize| -> Result<Vec<DiscSample>> {
        (0..n)
            .map(|_| {
                let s = bits(&mut rng, 4);
                let a = rng.random_range(0..5);
                disc.sample(&s, a, rng.random_range(-2.0..0.0))
            })
            .collect()
    };
    let (expert, policy) = (batch(5)?, batch(7)?);
    gradcheck_report("adversarial_loss", &disc.params, EPSILON, |t, ps| {
        disc.loss_var(t, ps, &expert, &policy)
    })
}

/// The policy-gradient surrogate with value regression and entropy bonus;
/// `clip` selects the PPO form.
pub fn check_policy_surrogate(seed: u64, clip: Option<f64>) -> Result<GradCheckReport> {
    let mut rng = stream_rng(seed, STREAM_INIT + 903);
    let cfg = PolicyConfig {
        hidden: 4,
        entropy: 0.05,
        seed,
        ..PolicyConfig::default()
    };
    let mut p = PolicyNet::new(cfg, 3, 2)?;
    jitter(&mut p.params, &mut rng, 0.8);
    let n = 7;
    let states = Matrix::from_vec(n, 3, (0..n).flat_map(|_| bits(&mut rng, 3)).collect());
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    // old log-probabilities a little off the current ones keep ratios away from the clip edges
    let old_log_probs = (0..n)
        .map(|i| Ok(p.log_prob(states.row(i), actions[i])? + 0.05))
        .collect::<Result<Vec<f64>>>()?;
    let batch = UpdateBatch {
        states,
        actions,
        old_log_probs,
        returns: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        advantages: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let name = if clip.is_some() {
        "ppo_surrogate"
    } else {
        "policy_surrogate"
    };
    gradcheck_report(name, &p.params, EPSILON, |t, ps| {
        Ok(surrogate(&p, t, ps, &batch, clip)?.0)
    })
}

/// Every check, in a fixed order.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_action_objective(seed)?,
        check_vrnn_elbo(seed, VrnnMode::Full)?,
        check_vrnn_elbo(seed, VrnnMode::DeterministicOnly)?,
        check_vrnn_elbo(seed, VrnnMode::StochasticOnly)?,
        check_adversarial_loss(seed)?,
        check_policy_surrogate(seed, None)?,
        check_policy_surrogate(seed, Some(0.2))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_small_nets() {
        for r in gradcheck_suite(0).unwrap() {
            assert!(r.pass, "{r:?}");
            assert!(r.num_params <= 500, "{r:?}");
        }
    }
}
