use actvrnn::action::{
    accuracy, enrich, examples, objective, train_action_model, ActionConfig, ActionModel, ObjectiveNoise, TurnExample,
    EMBEDDING_TABLE,
};
use actvrnn::corpus::{generate_corpus, mask_labels, Corpus, SplitSpec};
use actvrnn::env::Preset;
use actvrnn::math::{grad_check, Adam, Matrix, ParamSet, Tape};
use actvrnn::Error;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ActionConfig {
    ActionConfig {
        embed_dim: 2,
        latent_dim: 2,
        hidden: 3,
        token_dim: 2,
        max_len: 5,
        seed: 3,
        ..ActionConfig::default()
    }
}

fn random_turn(rng: &mut ChaCha8Rng, width: usize, vocab: u32, actions: usize) -> TurnExample {
    let utt = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(0..vocab)).collect::<Vec<u32>>();
    let bits = |rng: &mut ChaCha8Rng| {
        (0..width)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect()
    };
    let utt_len = rng.random_range(1..5);
    let u = utt(rng, utt_len);
    let p = if rng.random_bool(0.3) { Vec::new() } else { utt(rng, 3) };
    let n = utt(rng, 2);
    TurnExample {
        utt: u,
        prev: p,
        next: n,
        state: Some(bits(rng)),
        next_state: Some(bits(rng)),
        action: Some(rng.random_range(0..actions)),
    }
}

fn set(ps: &mut ParamSet, name: &str, m: Matrix) {
    *ps.get_mut(name).unwrap() = m;
}

// ---------- straight-line oracle ----------

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..w.cols)
        .map(|j| b.get(0, j) + (0..w.rows).map(|i| x[i] * w.get(i, j)).sum::<f64>())
        .collect()
}

fn layer(ps: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    affine(
        x,
        ps.get(&format!("{name}.w")).unwrap(),
        ps.get(&format!("{name}.b")).unwrap(),
    )
}

fn oracle_encode(ps: &ParamSet, hidden: usize, utt: &[u32]) -> Vec<f64> {
    let tok = ps.get("tok").unwrap();
    let g = |n: &str| ps.get(&format!("enc.{n}")).unwrap();
    let mut h = vec![0.0; hidden];
    for &t in utt {
        let x = tok.row(t as usize);
        let pre = |w: &str, u: &str, b: &str, hh: &[f64]| -> Vec<f64> {
            let a = affine(x, g(w), g(b));
            (0..hidden)
                .map(|j| a[j] + (0..hidden).map(|i| hh[i] * g(u).get(i, j)).sum::<f64>())
                .collect()
        };
        let z: Vec<f64> = pre("wz", "uz", "bz", &h).into_iter().map(sig).collect();
        let r: Vec<f64> = pre("wr", "ur", "br", &h).into_iter().map(sig).collect();
        let rh: Vec<f64> = (0..hidden).map(|i| r[i] * h[i]).collect();
        let cand: Vec<f64> = pre("wh", "uh", "bh", &rh).into_iter().map(f64::tanh).collect();
        h = (0..hidden).map(|i| h[i] + z[i] * (cand[i] - h[i])).collect();
    }
    h
}

fn oracle_labeled_bound(m: &ActionModel, s_next: &[f64], s: &[f64], utt: &[u32], a: usize, noise: &[f64]) -> f64 {
    let ps = &m.params;
    let hu = oracle_encode(ps, m.config.hidden, utt);
    let e = ps.get(EMBEDDING_TABLE).unwrap().row(a).to_vec();
    let x: Vec<f64> = hu.iter().chain(&e).copied().collect();
    let h: Vec<f64> = layer(ps, "q1", &x).into_iter().map(f64::tanh).collect();
    let mu = layer(ps, "q_mu", &h);
    let lv: Vec<f64> = layer(ps, "q_lv", &h)
        .into_iter()
        .map(|v| v.clamp(-20.0, 20.0))
        .collect();
    let z: Vec<f64> = (0..mu.len()).map(|i| mu[i] + (lv[i] / 2.0).exp() * noise[i]).collect();
    let x: Vec<f64> = s.iter().chain(&z).copied().collect();
    let h: Vec<f64> = layer(ps, "p1", &x).into_iter().map(f64::tanh).collect();
    let logits = layer(ps, "p2", &h);
    let recon: f64 = logits
        .iter()
        .zip(s_next)
        .map(|(l, t)| t * l - (1.0 + l.exp()).ln())
        .sum();
    let kl: f64 = 0.5
        * (0..mu.len())
            .map(|i| lv[i].exp() - lv[i] + mu[i] * mu[i] - 1.0)
            .sum::<f64>();
    recon - kl
}

#[test]
fn labeled_bound_matches_straight_line_oracle() {
    let m = ActionModel::new(
        ActionConfig {
            seed: 9,
            ..ActionConfig::default()
        },
        6,
        5,
        12,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let ex = random_turn(&mut rng, 6, 12, 5);
        let noise: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (s, n, a) = (ex.state.unwrap(), ex.next_state.unwrap(), ex.action.unwrap());
        let got = m.labeled_bound(&n, &s, &ex.utt, a, &noise).unwrap();
        let want = oracle_labeled_bound(&m, &n, &s, &ex.utt, a, &noise);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn confident_decoder_leaves_only_the_kl() {
    let cfg = tiny_config();
    let mut m = ActionModel::new(cfg, 4, 3, 6).unwrap();
    let s_next = [1.0, 0.0, 1.0, 1.0];
    set(&mut m.params, "p2.w", Matrix::zeros(3, 4));
    set(
        &mut m.params,
        "p2.b",
        Matrix::row_vector(s_next.iter().map(|b| if *b == 1.0 { 20.0 } else { -20.0 }).collect()),
    );
    // fix the posterior: mean (0.5, -1), log-variance (0.3, -0.2)
    set(&mut m.params, "q_mu.w", Matrix::zeros(3, 2));
    set(&mut m.params, "q_mu.b", Matrix::row_vector(vec![0.5, -1.0]));
    set(&mut m.params, "q_lv.w", Matrix::zeros(3, 2));
    set(&mut m.params, "q_lv.b", Matrix::row_vector(vec![0.3, -0.2]));
    let kl = 0.5 * ((0.3f64.exp() - 0.3 + 0.25 - 1.0) + ((-0.2f64).exp() + 0.2 + 1.0 - 1.0));
    let b = m.labeled_bound(&s_next, &[0.0; 4], &[1, 2], 1, &[0.7, -0.4]).unwrap();
    assert!((b + kl).abs() < 1e-7, "{b} vs {}", -kl);
    assert!(kl >= 0.0);
}

#[test]
fn zero_embeddings_give_uniform_predictions() {
    let mut m = ActionModel::new(tiny_config(), 4, 7, 6).unwrap();
    set(&mut m.params, EMBEDDING_TABLE, Matrix::zeros(7, 2));
    let p = m.predict_action(&[1, 2, 3], &[1.0, 0.0, 0.0, 1.0], &[1.0; 4]).unwrap();
    assert!(p.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));

    let mut hot = ActionModel::new(
        ActionConfig {
            temperature: 1e6,
            ..tiny_config()
        },
        4,
        7,
        6,
    )
    .unwrap();
    set(&mut hot.params, "g2.b", Matrix::row_vector(vec![3.0, -2.0]));
    let p = hot.predict_action(&[1, 2, 3], &[0.0; 4], &[1.0; 4]).unwrap();
    assert!(p.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-3));
}

#[test]
fn temperature_never_changes_the_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..50 {
        let base = ActionModel::new(
            ActionConfig {
                seed: k,
                ..tiny_config()
            },
            4,
            6,
            6,
        )
        .unwrap();
        let ex = random_turn(&mut rng, 4, 6, 6);
        let (s, n) = (ex.state.unwrap(), ex.next_state.unwrap());
        let p1 = base.predict_action(&ex.utt, &s, &n).unwrap();
        let mut warm = base.clone();
        warm.config.temperature = 7.5;
        let p2 = warm.predict_action(&ex.utt, &s, &n).unwrap();
        assert_eq!(actvrnn::math::argmax(&p1), actvrnn::math::argmax(&p2));
    }
}

#[test]
fn one_hot_and_uniform_classifier_limits() {
    let m = ActionModel::new(tiny_config(), 4, 3, 6).unwrap();
    let (s, n, u, noise) = ([1.0, 0.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0], [2u32, 4, 1], [0.3, -1.1]);
    for a in 0..3 {
        let mut log_q = vec![-1e4; 3];
        log_q[a] = 0.0;
        let lu = m.unlabeled_bound_with(&n, &s, &u, &log_q, &noise).unwrap();
        let ll = m.labeled_bound(&n, &s, &u, a, &noise).unwrap();
        assert!((lu - ll).abs() < 1e-12, "{lu} vs {ll}");
    }
    // two actions sharing one embedding have equal bounds
    let mut two = ActionModel::new(tiny_config(), 4, 2, 6).unwrap();
    set(
        &mut two.params,
        EMBEDDING_TABLE,
        Matrix::from_rows(&[vec![0.4, -0.3], vec![0.4, -0.3]]),
    );
    let half = 0.5f64.ln();
    let lu = two.unlabeled_bound_with(&n, &s, &u, &[half, half], &noise).unwrap();
    let l = two.labeled_bound(&n, &s, &u, 0, &noise).unwrap();
    assert!((lu - (l + 2f64.ln())).abs() < 1e-12);
    // the model's own predictor is uniform here too
    let own = two.unlabeled_bound(&n, &s, &u, &noise).unwrap();
    assert!((own - (l + 2f64.ln())).abs() < 1e-12);

    let mut flipped = two.clone();
    flipped.config.entropy_sign = -1.0;
    let lu = flipped.unlabeled_bound_with(&n, &s, &u, &[half, half], &noise).unwrap();
    assert!((lu - (l - 2f64.ln())).abs() < 1e-12);
}

#[test]
fn response_bounds_behave() {
    let cfg = tiny_config();
    let mut m = ActionModel::new(cfg, 4, 3, 6).unwrap();
    let (u, p, nx) = ([2u32, 4, 1], [3u32], [5u32, 5]);
    let noise = [0.2, 0.9];
    for a in 0..3 {
        let mut forced = m.clone();
        set(&mut forced.params, "gt2.w", Matrix::zeros(3, 2));
        // text logits e(a)^T g with g a large multiple pointing at action a
        set(
            &mut forced.params,
            EMBEDDING_TABLE,
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]]),
        );
        let g = match a {
            0 => vec![1e4, 0.0],
            1 => vec![0.0, 1e4],
            _ => vec![-1e4, -1e4],
        };
        set(&mut forced.params, "gt2.b", Matrix::row_vector(g));
        let lu = forced.response_unlabeled_bound(&u, &p, &nx, &noise).unwrap();
        let ll = forced.response_labeled_bound(&u, &p, &nx, a, &noise).unwrap();
        assert!((lu - ll).abs() < 1e-9, "{lu} vs {ll}");
    }
    // decoder sure of every true token: bound collapses to -KL
    let vocab = 6;
    set(&mut m.params, "r2.w", Matrix::zeros(3, vocab));
    set(&mut m.params, "r2.b", Matrix::zeros(1, vocab));
    let mut pos = Matrix::zeros(5, vocab);
    for (j, &t) in u.iter().enumerate() {
        for v in 0..vocab {
            pos.set(j, v, if v == t as usize { 20.0 } else { -20.0 });
        }
    }
    set(&mut m.params, "r_pos", pos);
    set(&mut m.params, "q_mu.w", Matrix::zeros(3, 2));
    set(&mut m.params, "q_mu.b", Matrix::row_vector(vec![1.0, 0.0]));
    set(&mut m.params, "q_lv.w", Matrix::zeros(3, 2));
    set(&mut m.params, "q_lv.b", Matrix::row_vector(vec![0.0, 0.0]));
    let b = m.response_labeled_bound(&u, &p, &nx, 1, &noise).unwrap();
    assert!((b + 0.5).abs() < 1e-6, "{b}");
}

#[test]
fn classification_loss_limits() {
    let s = Preset::OneDomain.schemas();
    let c = generate_corpus(&s, 5, 1, 20, "t").unwrap();
    let ex = examples(&c);
    let refs: Vec<&TurnExample> = ex.iter().collect();
    let mut m = ActionModel::new(
        tiny_config(),
        c.header.state_width,
        c.header.num_actions,
        c.header.vocab.len(),
    )
    .unwrap();
    assert_eq!(m.num_actions, 20);
    set(&mut m.params, EMBEDDING_TABLE, Matrix::zeros(20, 2));
    let loss = m.classification_loss(&refs).unwrap();
    assert!((loss - 20f64.ln()).abs() < 1e-12);

    let mut tape = Tape::new();
    let logits = tape.constant(Matrix::from_rows(&[vec![0.0, 800.0, 0.0], vec![900.0, 0.0, 0.0]]));
    let l = actvrnn::action::classification_loss(&mut tape, logits, &[1, 0]);
    assert_eq!(tape.scalar(l), 0.0);
}

#[test]
fn full_objective_passes_gradient_check() {
    let cfg = tiny_config();
    let (width, actions, vocab) = (4, 4, 6);
    let m = ActionModel::new(cfg.clone(), width, actions, vocab).unwrap();
    assert!(m.params.num_scalars() <= 500, "{}", m.params.num_scalars());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f: Vec<TurnExample> = (0..3)
        .map(|_| random_turn(&mut rng, width, vocab as u32, actions))
        .collect();
    let p: Vec<TurnExample> = (0..2)
        .map(|_| TurnExample {
            action: None,
            ..random_turn(&mut rng, width, vocab as u32, actions)
        })
        .collect();
    let u: Vec<TurnExample> = (0..2)
        .map(|_| TurnExample {
            action: None,
            state: None,
            next_state: None,
            ..random_turn(&mut rng, width, vocab as u32, actions)
        })
        .collect();
    let fr: Vec<&TurnExample> = f.iter().collect();
    let pr: Vec<&TurnExample> = p.iter().collect();
    let ur: Vec<&TurnExample> = u.iter().collect();
    let noise = ObjectiveNoise::sample(cfg.latent_dim, 3, 2, 2, &mut rng);
    for (pp, uu) in [(&pr[..0], &ur[..0]), (&pr[..], &ur[..0]), (&pr[..], &ur[..])] {
        let err = grad_check(
            &m.params,
            1e-5,
            |t, ps| Ok(objective(&m, t, ps, &fr, pp, uu, &noise)?.0),
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}

#[test]
fn empty_fully_labeled_split_is_rejected() {
    let c = generate_corpus(&Preset::OneDomain.schemas(), 10, 1, 20, "t").unwrap();
    let (s, _) = mask_labels(&c, &SplitSpec::new(0.0, 1.0, 0.0, 1).unwrap()).unwrap();
    let r = train_action_model(&s.fully, &s.partial, &s.unlabeled, &tiny_config());
    assert!(matches!(r, Err(Error::Config(m)) if m.contains("fully labeled")));
    assert!(matches!(
        ActionModel::new(tiny_config(), 4, 600, 6),
        Err(Error::Config(_))
    ));
}

#[test]
fn shared_inference_net_and_embeddings() {
    let m0 = ActionModel::new(tiny_config(), 4, 3, 6).unwrap();
    let (s, n, u) = ([1.0, 0.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0], [2u32, 4, 1]);
    let before = m0.labeled_bound(&n, &s, &u, 2, &[0.1, 0.2]).unwrap();
    // one optimizer step on the response bound alone
    let mut m = m0.clone();
    let mut tape = Tape::new();
    let out = {
        let enc_u = m.encode(&mut tape, &m.params, &[&u]).unwrap();
        let enc_p = m.encode(&mut tape, &m.params, &[&[3u32][..]]).unwrap();
        let enc = actvrnn::action::Encodings {
            hu: enc_u,
            hprev: enc_p,
            hnext: enc_p,
        };
        let nz = tape.row(&[0.1, 0.2]);
        let parts = actvrnn::action::labeled_response(&m, &mut tape, &m.params, &enc, &[&u], &[2], nz).unwrap();
        let sum = tape.sum(parts.bound);
        tape.neg(sum)
    };
    tape.backward(out);
    tape.accumulate(&mut m.params);
    assert!(m
        .params
        .grad(EMBEDDING_TABLE)
        .unwrap()
        .unwrap()
        .data
        .iter()
        .any(|g| *g != 0.0));
    assert!(m.params.grad("q1.w").unwrap().unwrap().data.iter().any(|g| *g != 0.0));
    Adam::new(0.1).step(&mut m.params);
    let after = m.labeled_bound(&n, &s, &u, 2, &[0.1, 0.2]).unwrap();
    assert!((after - before).abs() > 1e-6);
}

fn one_domain(n: usize, seed: u64) -> Corpus {
    generate_corpus(&Preset::OneDomain.schemas(), n, seed, 20, "t").unwrap()
}

fn smoothed(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn supervised_training_learns_and_logs() {
    let train = one_domain(150, 1);
    let test = one_domain(60, 2);
    let empty = Corpus {
        header: train.header.clone(),
        dialogues: vec![],
    };
    let cfg = ActionConfig {
        epochs: 25,
        seed: 5,
        ..ActionConfig::default()
    };
    let (m, ctx, log) = train_action_model(&train, &empty, &empty, &cfg).unwrap();
    assert!(ctx.is_none());
    let acc = accuracy(&m, &examples(&test)).unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc}");
    assert_eq!(log.epochs.len(), 25);
    let cls: Vec<f64> = log.epochs.iter().map(|t| t.classification).collect();
    let obj: Vec<f64> = log.epochs.iter().map(|t| t.objective).collect();
    let cs = smoothed(&cls, 5);
    let os = smoothed(&obj, 5);
    assert!(cs.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{cs:?}");
    assert!(os.windows(2).all(|w| w[1] >= w[0] - 1e-2), "{os:?}");
    assert!(cs.last().unwrap() < &cs[0]);

    let (m2, _, _) = train_action_model(&train, &empty, &empty, &cfg).unwrap();
    assert_eq!(m, m2);
}

#[test]
fn enrichment_recovers_hidden_actions() {
    let c = one_domain(120, 3);
    let (s, ledger) = mask_labels(&c, &SplitSpec::new(0.4, 0.4, 0.2, 3).unwrap()).unwrap();
    let cfg = ActionConfig {
        epochs: 20,
        context_epochs: 15,
        seed: 2,
        ..ActionConfig::default()
    };
    let (m, ctx, _) = train_action_model(&s.fully, &s.partial, &s.unlabeled, &cfg).unwrap();
    let ctx = ctx.expect("context model trained when text-only dialogues exist");
    let e = enrich(&[&s.fully, &s.partial, &s.unlabeled], &m, Some(&ctx)).unwrap();
    let table = m.embedding_table();
    let (mut hits, mut total, mut state_hits, mut state_total, mut zero_hits) = (0, 0, 0, 0, 0);
    for d in &e.dialogues {
        let truth = &ledger.hidden[&d.id];
        for (t, turn) in d.turns.iter().enumerate() {
            let a = truth.turns[t].action.unwrap();
            assert!((turn.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            match d.level {
                actvrnn::corpus::Level::Fully => {
                    assert_eq!(turn.action, a);
                    assert_eq!(turn.embedding, table.row(a));
                }
                actvrnn::corpus::Level::Partial => {
                    total += 1;
                    hits += usize::from(turn.action == a);
                }
                actvrnn::corpus::Level::Unlabeled => {
                    let s = actvrnn::corpus::to_dense(truth.turns[t].state.as_ref().unwrap(), e.state_width);
                    state_total += s.len();
                    state_hits += s.iter().zip(&turn.state).filter(|(a, b)| a == b).count();
                    zero_hits += s.iter().filter(|b| **b == 0.0).count();
                }
            }
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc >= 0.85, "partial-turn recovery {acc}");
    let bit_acc = state_hits as f64 / state_total as f64;
    let all_zero = zero_hits as f64 / state_total as f64;
    assert!(
        bit_acc > 0.85 && bit_acc > all_zero + 0.2,
        "placeholder bits {bit_acc} vs all-zero {all_zero}"
    );
    let again = enrich(&[&s.fully, &s.partial, &s.unlabeled], &m, Some(&ctx)).unwrap();
    assert_eq!(e, again);
    assert!(enrich(&[&s.unlabeled], &m, None).is_err());
}
