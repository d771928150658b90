use actvrnn::action::{EnrichedCorpus, EnrichedDialogue, EnrichedTurn};
use actvrnn::corpus::Level;
use actvrnn::env::{expert_policy, DialogueEnv, Preset};
use actvrnn::math::{grad_check, Adam, Matrix, ParamSet, Tape};
use actvrnn::policy::{
    batch_rewards, ppo_update, prepare, reinforce_update, returns, rollout, run_episode, surrogate, train_policy,
    Algorithm, PolicyConfig, PolicyNet, Step, Trajectory, UpdateBatch,
};
use actvrnn::reward::{HandcraftedRewardConfig, RewardHandle, RewardKind};
use actvrnn::vrnn::{train_vrnn, VrnnConfig, VrnnInput};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scramble(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    for k in 0..ps.num_scalars() {
        *ps.entry_mut(k) = rng.random_range(-scale..scale);
    }
}

fn toy(entropy: f64, hidden: usize) -> PolicyNet {
    let cfg = PolicyConfig {
        hidden,
        entropy,
        seed: 3,
        ..PolicyConfig::default()
    };
    PolicyNet::new(cfg, 3, 2).unwrap()
}

fn toy_batch(rng: &mut ChaCha8Rng, n: usize, k: usize) -> UpdateBatch {
    let states = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(0..2) as f64).collect());
    UpdateBatch {
        states,
        actions: (0..n).map(|_| rng.random_range(0..k)).collect(),
        old_log_probs: (0..n).map(|_| rng.random_range(-1.5..-0.2)).collect(),
        returns: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        advantages: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

fn grads(policy: &PolicyNet, batch: &UpdateBatch, clip: Option<f64>) -> Vec<f64> {
    let mut ps = policy.params.clone();
    ps.zero_grads();
    let mut tape = Tape::new();
    let (loss, _) = surrogate(policy, &mut tape, &ps, batch, clip).unwrap();
    tape.backward(loss);
    tape.accumulate(&mut ps);
    ps.flat_grads()
}

/// Flat indices of the policy-head parameters (`pol1`, `pol2`).
fn policy_entries(ps: &ParamSet) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for name in ps.names() {
        let n = ps.get(name).unwrap().data.len();
        if name.starts_with("pol") {
            out.extend(offset..offset + n);
        }
        offset += n;
    }
    out
}

fn loss_value(policy: &PolicyNet, batch: &UpdateBatch, clip: Option<f64>) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = surrogate(policy, &mut tape, &policy.params, batch, clip).unwrap();
    tape.scalar(loss)
}

fn traj(rewards: &[f64], width: usize) -> Trajectory {
    Trajectory {
        steps: rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| Step {
                state: vec![(t % 2) as f64; width],
                action: t % 2,
                log_prob: 0.5f64.ln(),
                reward: r,
                done: t + 1 == rewards.len(),
            })
            .collect(),
        success: false,
        provided: 0,
        correct: 0,
        required: 1,
        domains: 1,
    }
}

#[test]
fn zero_weights_sample_uniformly() {
    let mut p = PolicyNet::new(PolicyConfig::default(), 4, 5).unwrap();
    for k in 0..p.params.num_scalars() {
        *p.params.entry_mut(k) = 0.0;
    }
    let lp = p.log_probs(&[1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(lp.iter().all(|l| (l - 0.2f64.ln()).abs() < 1e-15));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut counts = [0usize; 5];
    for _ in 0..5000 {
        counts[p.act(&[1.0, 0.0, 0.0, 1.0], &mut rng, true).unwrap().0] += 1;
    }
    assert!(counts.iter().all(|&c| c > 850 && c < 1150), "{counts:?}");
}

#[test]
fn sampling_frequencies_match_the_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = PolicyNet::new(
        PolicyConfig {
            hidden: 8,
            ..PolicyConfig::default()
        },
        3,
        4,
    )
    .unwrap();
    scramble(&mut p.params, &mut rng, 1.0);
    let s = [1.0, 0.0, 1.0];
    let probs: Vec<f64> = p.log_probs(&s).unwrap().iter().map(|l| l.exp()).collect();
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let (a, lp) = p.act(&s, &mut rng, true).unwrap();
        assert_eq!(lp, probs[a].ln());
        counts[a] += 1;
    }
    for (c, q) in counts.iter().zip(&probs) {
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        assert!(
            (*c as f64 - n as f64 * q).abs() < 3.0 * sigma,
            "{counts:?} vs {probs:?}"
        );
    }
}

#[test]
fn greedy_mode_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = PolicyNet::new(
        PolicyConfig {
            hidden: 8,
            ..PolicyConfig::default()
        },
        3,
        4,
    )
    .unwrap();
    scramble(&mut p.params, &mut rng, 1.0);
    let s = [0.0, 1.0, 1.0];
    let lp = p.log_probs(&s).unwrap();
    let best = (0..4).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap();
    for seed in 0..20 {
        let (a, l) = p.act(&s, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
        assert_eq!((a, l), (best, lp[best]));
    }
    assert!(p.act(&[0.0, 1.0], &mut rng, false).is_err());
}

#[test]
fn zero_advantages_give_no_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = toy(0.0, 4);
    scramble(&mut p.params, &mut rng, 0.8);
    let mut batch = toy_batch(&mut rng, 6, 2);
    batch.advantages = vec![0.0; 6];
    let g = grads(&p, &batch, None);
    for k in policy_entries(&p.params) {
        assert_eq!(g[k], 0.0);
    }
    let g = grads(&p, &batch, Some(0.2));
    for k in policy_entries(&p.params) {
        assert_eq!(g[k], 0.0);
    }
}

#[test]
fn surrogate_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = toy(0.05, 4);
    scramble(&mut p.params, &mut rng, 0.8);
    let batch = toy_batch(&mut rng, 7, 2);
    let err = grad_check(&p.params, 1e-5, |tape, ps| Ok(surrogate(&p, tape, ps, &batch, None)?.0)).unwrap();
    assert!(err < 1e-4, "{err}");
    // old log-probs far from the current ones keep every ratio off the clip boundary
    let mut ppo = batch.clone();
    ppo.old_log_probs = (0..7)
        .map(|i| p.log_prob(ppo.states.row(i), ppo.actions[i]).unwrap() + 0.05)
        .collect();
    let err = grad_check(&p.params, 1e-6, |tape, ps| {
        Ok(surrogate(&p, tape, ps, &ppo, Some(0.2))?.0)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn unit_ratios_reduce_ppo_to_the_vanilla_surrogate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = toy(0.01, 5);
    scramble(&mut p.params, &mut rng, 0.8);
    let mut batch = toy_batch(&mut rng, 8, 2);
    batch.old_log_probs = (0..8)
        .map(|i| p.log_prob(batch.states.row(i), batch.actions[i]).unwrap())
        .collect();
    let vanilla = loss_value(&p, &batch, None);
    let clipped = loss_value(&p, &batch, Some(0.2));
    // the vanilla surrogate is log π · A, the clipped one π/π_old · A; at
    // ratio 1 the values differ by mean(A) and the gradients coincide
    let mean_adv: f64 = batch.advantages.iter().sum::<f64>() / 8.0;
    let vanilla_log = {
        let mut b = batch.clone();
        b.advantages = vec![0.0; 8];
        loss_value(&p, &b, None)
    };
    let pg_vanilla = vanilla - vanilla_log;
    let pg_clipped = clipped - vanilla_log;
    let logs: f64 = (0..8)
        .map(|i| batch.old_log_probs[i] * batch.advantages[i])
        .sum::<f64>()
        / 8.0;
    assert!((pg_vanilla + logs).abs() < 1e-12);
    assert!((pg_clipped + mean_adv).abs() < 1e-12);
    let gv = grads(&p, &batch, None);
    let gc = grads(&p, &batch, Some(0.2));
    for (a, b) in gv.iter().zip(&gc) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn clipped_ratios_with_positive_advantage_stop_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = toy(0.0, 4);
    scramble(&mut p.params, &mut rng, 0.8);
    let mut batch = toy_batch(&mut rng, 5, 2);
    batch.advantages = vec![1.0; 5];
    // ratio = exp(0.5) > 1.2 everywhere
    batch.old_log_probs = (0..5)
        .map(|i| p.log_prob(batch.states.row(i), batch.actions[i]).unwrap() - 0.5)
        .collect();
    let g = grads(&p, &batch, Some(0.2));
    for k in policy_entries(&p.params) {
        assert_eq!(g[k], 0.0);
    }
    let pg = loss_value(&p, &batch, Some(0.2)) - {
        let mut b = batch.clone();
        b.advantages = vec![0.0; 5];
        loss_value(&p, &b, Some(0.2))
    };
    assert!((pg + 1.2).abs() < 1e-12);
}

#[test]
fn single_epoch_ppo_follows_reinforce() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = toy(0.0, 5);
    scramble(&mut p.params, &mut rng, 0.8);
    let mut batch = toy_batch(&mut rng, 10, 2);
    batch.old_log_probs = (0..10)
        .map(|i| p.log_prob(batch.states.row(i), batch.actions[i]).unwrap())
        .collect();
    let before = p.params.flat();
    let mut a = p.clone();
    reinforce_update(&mut a, &mut Adam::new(1e-3), &batch).unwrap();
    let mut b = p.clone();
    // an enormous clip range never binds
    ppo_update(&mut b, &mut Adam::new(1e-3), &batch, 1e6, 1).unwrap();
    let da: Vec<f64> = a.params.flat().iter().zip(&before).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = b.params.flat().iter().zip(&before).map(|(x, y)| x - y).collect();
    let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
    let na: f64 = da.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = db.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(na > 0.0);
    assert!(dot / (na * nb) > 1.0 - 1e-9);
}

#[test]
fn discounted_returns_match_a_backward_sum() {
    let r = [0.3, -1.0, 0.0, 2.5, -0.25];
    for gamma in [0.0, 0.5, 0.99, 1.0] {
        let g = returns(&r, gamma);
        for t in 0..r.len() {
            let brute: f64 = (t..r.len()).map(|k| gamma.powi((k - t) as i32) * r[k]).sum();
            assert!((g[t] - brute).abs() < 1e-12);
            if t + 1 < r.len() {
                assert!((g[t] - (r[t] + gamma * g[t + 1])).abs() < 1e-12);
            }
        }
    }
    assert!(returns(&[], 0.9).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn standardized_advantages_ignore_reward_shifts(
        a in prop::collection::vec(-3.0f64..3.0, 1..8),
        b in prop::collection::vec(-3.0f64..3.0, 1..8),
        c in -50.0f64..50.0,
    ) {
        let p = PolicyNet::new(PolicyConfig { hidden: 4, ..PolicyConfig::default() }, 2, 2).unwrap();
        let batch = vec![traj(&a, 2), traj(&b, 2)];
        let shifted: Vec<Trajectory> = batch
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for s in &mut t.steps {
                    s.reward += c;
                }
                t
            })
            .collect();
        let r0 = batch_rewards(&batch, true);
        let r1 = batch_rewards(&shifted, true);
        for (x, y) in r0.iter().flatten().zip(r1.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-7);
        }
        let u0 = prepare(&p, &batch, true).unwrap();
        let u1 = prepare(&p, &shifted, true).unwrap();
        for (x, y) in u0.advantages.iter().zip(&u1.advantages) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        let raw = batch_rewards(&batch, false);
        prop_assert_eq!(raw, vec![a.clone(), b.clone()]);
    }
}

#[test]
fn empty_batches_are_rejected() {
    let p = PolicyNet::new(PolicyConfig::default(), 2, 2).unwrap();
    assert!(prepare(&p, &[], false).is_err());
    assert!(prepare(&p, &[traj(&[], 2)], false).is_err());
    assert!(PolicyConfig {
        discount: 1.5,
        ..PolicyConfig::default()
    }
    .validate()
    .is_err());
    assert!("sarsa".parse::<Algorithm>().is_err());
}

#[test]
fn rollouts_are_seed_deterministic() {
    let mut env = DialogueEnv::new(Preset::TwoDomain.schemas(), 20).unwrap();
    let p = PolicyNet::new(PolicyConfig::default(), env.state_width(), env.actions().len()).unwrap();
    let h = RewardHandle::Handcrafted(HandcraftedRewardConfig::default());
    let run = |env: &mut DialogueEnv| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..5)
            .map(|_| rollout(env, &p, &h, &mut rng, true).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run(&mut env);
    assert_eq!(a, run(&mut env));
    assert!(a.iter().all(|t| t.turns() <= env.max_turns()));
}

#[test]
fn handcrafted_reinforce_solves_one_domain() {
    let mut env = DialogueEnv::new(Preset::OneDomain.schemas(), 20).unwrap();
    let mut h = RewardHandle::Handcrafted(HandcraftedRewardConfig::default());
    let cfg = PolicyConfig::default();
    let (_, log) = train_policy(&mut env, &mut h, &cfg).unwrap();
    assert_eq!(log.len(), cfg.episodes);
    let tail = &log[log.len() - log.len() / 10..];
    let rate = tail.iter().filter(|l| l.success).count() as f64 / tail.len() as f64;
    let head = &log[..log.len() / 10];
    let start = head.iter().filter(|l| l.success).count() as f64 / head.len() as f64;
    assert!(rate > 0.9, "final success {rate} (started at {start})");
}

#[test]
fn trained_act_vrnn_prefers_expert_rollouts() {
    let mut env = DialogueEnv::new(Preset::OneDomain.schemas(), 20).unwrap();
    let k = env.actions().len();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let table = Matrix::from_vec(k, 4, (0..k * 4).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut dialogues = Vec::new();
    for i in 0..120 {
        env.reset(&mut rng);
        let mut turns = Vec::new();
        loop {
            let state = env.encoded_state().unwrap();
            let action = expert_policy(env.state().unwrap(), env.actions());
            let mut probs = vec![0.0; k];
            probs[action] = 1.0;
            turns.push(EnrichedTurn {
                state,
                action,
                embedding: table.row(action).to_vec(),
                probs,
            });
            if env.step(action).unwrap().done {
                break;
            }
        }
        dialogues.push(EnrichedDialogue {
            id: i,
            level: Level::Fully,
            turns,
        });
    }
    let corpus = EnrichedCorpus {
        state_width: env.state_width(),
        num_actions: k,
        embed_dim: 4,
        table,
        dialogues,
    };
    let (vrnn, _) = train_vrnn(
        &corpus,
        VrnnInput::Embedding,
        &VrnnConfig {
            epochs: 12,
            seed: 2,
            ..VrnnConfig::default()
        },
    )
    .unwrap();
    let handle = RewardHandle::Vrnn {
        kind: RewardKind::ActVrnn,
        model: Box::new(vrnn),
    };

    let mut mean_reward = |expert: bool, seed: u64| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..50 {
            env.reset(&mut rng);
            let t = run_episode(&mut env, &handle, &mut rng, |env, _, rng| {
                let a = if expert {
                    expert_policy(env.state()?, env.actions())
                } else {
                    rng.random_range(0..k)
                };
                Ok((a, 0.0))
            })
            .unwrap();
            total += t.total_reward();
            steps += t.turns();
        }
        total / steps as f64
    };
    let expert = mean_reward(true, 11);
    let random = mean_reward(false, 11);
    assert!(expert > random, "expert {expert} vs random {random}");
}
