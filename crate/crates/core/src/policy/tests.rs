use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cohort::N_ACTIONS;
use crate::numerics::{grad_check_params, Tensor};
use crate::training::LatentTransition;

// Exhaustive reference: scan all actions, keep eligible ones, first max wins.
fn select_oracle(q: &[f64], p: &[f64], tau: f64) -> usize {
    let max = p.iter().cloned().fold(f64::MIN, f64::max);
    let mut best = usize::MAX;
    for a in 0..q.len() {
        if p[a] / max >= tau && (best == usize::MAX || q[a] > q[best]) {
            best = a;
        }
    }
    best
}

fn random_dist(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..N_ACTIONS).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

#[test]
fn select_action_plain_argmax_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let q: Vec<f64> = (0..N_ACTIONS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = random_dist(&mut rng);
        let best = crate::numerics::argmax(&q);
        assert_eq!(dbcq_select_action(&q, &p, 0.0), best);
        assert_eq!(dbcq_select_action(&q, &[1.0 / 25.0; 25], 1.0), best);
    }
}

#[test]
fn select_action_skips_rare_best() {
    let mut q = vec![0.0; N_ACTIONS];
    q[3] = 5.0;
    q[7] = 2.0;
    q[9] = 1.0;
    let mut p = vec![0.01; N_ACTIONS];
    p[9] = 0.5;
    p[3] = 0.05;
    p[7] = 0.2;
    assert_eq!(dbcq_select_action(&q, &p, 0.3), 7);
    assert_eq!(dbcq_select_action(&q, &p, 0.0), 3);
    assert_eq!(dbcq_select_action(&q, &p, 0.5), 9);
}

#[test]
fn select_action_ties_take_lowest_index() {
    let q = vec![1.0; N_ACTIONS];
    assert_eq!(dbcq_select_action(&q, &[0.04; 25], 0.3), 0);
    let mut p = vec![0.0; N_ACTIONS];
    p[11] = 1.0;
    assert_eq!(dbcq_select_action(&q, &p, 1.0), 11);
}

proptest! {
    #[test]
    fn select_action_matches_mask_oracle(seed in any::<u64>(), tau in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..N_ACTIONS).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = random_dist(&mut rng);
        let a = dbcq_select_action(&q, &p, tau);
        prop_assert_eq!(a, select_oracle(&q, &p, tau));
        let max = p.iter().cloned().fold(0.0, f64::max);
        prop_assert!(p[a] / max >= tau);
    }
}

fn separable(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..38 * N_ACTIONS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut wr = ChaCha8Rng::seed_from_u64(seed + 1);
    for _ in 0..n {
        let x: Vec<f64> = (0..38).map(|_| wr.random_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = (0..N_ACTIONS)
            .map(|k| (0..38).map(|j| w[k * 38 + j] * x[j]).sum())
            .collect();
        labels.push(crate::numerics::argmax(&scores));
        rows.push(x);
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

#[test]
fn bc_starts_uniform() {
    let (x, y) = separable(64, 3);
    let cfg = BcConfig {
        epochs: 1,
        batch_size: 32,
        ..BcConfig::default()
    };
    let t = train_behavior_cloning(&x, &y, &cfg).unwrap();
    assert!((t.initial_loss - 25f64.ln()).abs() < 1e-12);
    assert!(!t.model.training);
    assert!(t.warnings.is_empty());
}

#[test]
fn bc_learns_a_linear_rule() {
    let (x, y) = separable(3000, 5);
    let cfg = BcConfig {
        epochs: 40,
        lr: 1e-3,
        ..BcConfig::default()
    };
    let t = train_behavior_cloning(&x, &y, &cfg).unwrap();
    assert!(t.epoch_loss.last().unwrap() < &t.epoch_loss[0]);
    let (xt, yt) = separable(1000, 5);
    let acc = bc_accuracy(&t.model, &xt, &yt).unwrap();
    assert!(acc > 0.6, "held-out accuracy {acc}");
}

#[test]
fn bc_random_labels_near_chance() {
    let (x, _) = separable(2000, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let y: Vec<usize> = (0..2000).map(|_| rng.random_range(0..N_ACTIONS)).collect();
    let cfg = BcConfig {
        epochs: 3,
        ..BcConfig::default()
    };
    let t = train_behavior_cloning(&x, &y, &cfg).unwrap();
    let (xt, _) = separable(10_000, 11);
    let yt: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..N_ACTIONS)).collect();
    let acc = bc_accuracy(&t.model, &xt, &yt).unwrap();
    assert!((acc - 0.04).abs() < 0.02, "accuracy {acc}");
}

#[test]
fn bc_single_class_warns() {
    let (x, _) = separable(20, 2);
    let y = vec![4; 20];
    let cfg = BcConfig {
        epochs: 1,
        batch_size: 8,
        ..BcConfig::default()
    };
    let t = train_behavior_cloning(&x, &y, &cfg).unwrap();
    assert_eq!(t.warnings.len(), 1);
}

#[test]
fn bc_probs_are_floored_distributions() {
    let (x, y) = separable(200, 4);
    let cfg = BcConfig {
        epochs: 30,
        lr: 1e-2,
        weight_decay: 0.0,
        ..BcConfig::default()
    };
    let t = train_behavior_cloning(&x, &y, &cfg).unwrap();
    let logits = t.model.logits(&x).unwrap();
    let floor = PROB_FLOOR / (1.0 + 25.0 * PROB_FLOOR);
    for r in 0..20 {
        let p = bc_probs(x.row(r), &t.model).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= floor * (1.0 - 1e-12)));
        assert_eq!(crate::numerics::argmax(&p), crate::numerics::argmax(logits.row(r)));
    }
    let mut m = t.model.clone();
    m.train();
    assert!(bc_probs(x.row(0), &m).is_err());
}

#[test]
fn bc_eval_mode_uses_running_statistics() {
    let (x, _) = separable(16, 8);
    let mut m = BcParams::new(38, 1);
    m.running_mean = [vec![0.3; BC_HIDDEN], vec![-0.2; BC_HIDDEN]];
    m.running_var = [vec![2.0; BC_HIDDEN], vec![0.5; BC_HIDDEN]];
    // a non-zero output layer makes the hidden activations visible
    let id = m.params.find("bc.l3.w").unwrap();
    m.params.get_mut(id).value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 * 0.1);
    m.eval();
    let got = m.logits(&x).unwrap();
    let val = |n: &str| m.params.get(m.params.find(n).unwrap()).value.clone();
    let mut h = x.clone();
    for (i, l) in ["l1", "l2"].iter().enumerate() {
        let z = crate::numerics::linear(&h, &val(&format!("bc.{l}.w")), &val(&format!("bc.{l}.b"))).unwrap();
        let rows: Vec<Vec<f64>> = (0..z.rows())
            .map(|r| {
                z.row(r)
                    .iter()
                    .enumerate()
                    .map(|(j, v)| ((v - m.running_mean[i][j]) / (m.running_var[i][j] + 1e-5).sqrt()).max(0.0))
                    .collect()
            })
            .collect();
        h = Tensor::from_rows(&rows).unwrap();
    }
    let want = crate::numerics::linear(&h, &val("bc.l3.w"), &val("bc.l3.b")).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn bc_gradients_match_finite_differences() {
    let (x, y) = separable(12, 21);
    let mut m = BcParams::new(38, 21);
    let id = m.params.find("bc.l3.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    m.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    let err = grad_check_params(
        &[&m.params],
        |tape, vars| bc_loss(tape, &m, &vars[0], &x, &y),
        1e-6,
        Some(6),
        23,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

fn transition(s: Vec<f64>, a: usize, r: f64, s_next: Vec<f64>, done: bool) -> LatentTransition {
    LatentTransition { s, a, r, s_next, done }
}

fn set_const_output(p: &mut crate::numerics::ParamSet, prefix: &str, bias: &[f64]) {
    let w = p.find(&format!("{prefix}.l3.w")).unwrap();
    p.get_mut(w).value.fill(0.0);
    let b = p.find(&format!("{prefix}.l3.b")).unwrap();
    p.get_mut(b).value.data_mut().copy_from_slice(bias);
}

#[test]
fn terminal_targets_equal_reward() {
    let q = QParams::new(4, 1);
    let t = transition(vec![0.1; 4], 2, -1.0, vec![0.5; 4], true);
    let y = dbcq_targets(&q, &[&t], &DbcqConfig::default()).unwrap();
    assert_eq!(y, vec![-1.0]);
}

#[test]
fn bootstrap_target_arithmetic() {
    let mut q = QParams::new(4, 1);
    let mut bias = vec![0.0; N_ACTIONS];
    bias[6] = 1.0;
    set_const_output(&mut q.q, "q", &bias);
    set_const_output(&mut q.target, "q", &bias);
    let t = transition(vec![0.0; 4], 0, 0.0, vec![0.3; 4], false);
    let y = dbcq_targets(&q, &[&t], &DbcqConfig::default()).unwrap();
    assert!((y[0] - 0.99).abs() < 1e-15);

    // the behaviour head can rule action 6 out, leaving the best eligible one
    let mut pb = vec![0.0; N_ACTIONS];
    pb[6] = -10.0;
    set_const_output(&mut q.behavior, "pi", &pb);
    let y = dbcq_targets(&q, &[&t], &DbcqConfig::default()).unwrap();
    assert_eq!(y[0], 0.0);
}

#[test]
fn unconstrained_step_is_double_dqn() {
    // two states, τ = 0 and a uniform behaviour head
    let mut q = QParams::new(2, 5);
    set_const_output(&mut q.behavior, "pi", &[0.0; N_ACTIONS]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    q.target.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1)));
    let (s0, s1) = (vec![1.0, 0.0], vec![0.0, 1.0]);
    let batch = [transition(s0.clone(), 4, 0.0, s1.clone(), false), transition(s1.clone(), 2, 0.0, s0.clone(), false)];
    let refs: Vec<&LatentTransition> = batch.iter().collect();
    let cfg = DbcqConfig {
        threshold: 0.0,
        ..DbcqConfig::default()
    };
    let y = dbcq_targets(&q, &refs, &cfg).unwrap();
    for (i, next) in [&s1, &s0].iter().enumerate() {
        let x = Tensor::matrix(1, 2, next.to_vec()).unwrap();
        let online = q.q_values(&x).unwrap();
        let a = crate::numerics::argmax(online.row(0));
        let hand = 0.99 * q.target_q_values(&x).unwrap().row(0)[a];
        assert_eq!(y[i], hand);
    }
}

#[test]
fn polyak_tracks_frozen_online_network() {
    let mut q = QParams::new(3, 2);
    q.target.iter_mut().for_each(|p| p.value.fill(0.0));
    let gap0 = q.q.iter().map(|p| p.value.data().iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>();
    let cfg = DbcqConfig {
        lr: 0.0,
        ..DbcqConfig::default()
    };
    let mut tr = DbcqTrainer::new(q, cfg).unwrap();
    let t = transition(vec![0.2; 3], 1, 0.0, vec![0.1; 3], false);
    for _ in 0..50 {
        tr.train_step(&[&t]).unwrap();
    }
    let p = &tr.params;
    let gap: f64 = p
        .q
        .iter()
        .zip(p.target.iter())
        .map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    assert!((gap - gap0 * 0.99f64.powi(50)).abs() < 1e-9 * gap0);

    let mut full = DbcqTrainer::new(QParams::new(3, 4), DbcqConfig { polyak: 1.0, ..DbcqConfig::default() }).unwrap();
    full.train_step(&[&t]).unwrap();
    assert_eq!(full.params.q, full.params.target);
}

#[test]
fn non_finite_loss_aborts() {
    let mut tr = DbcqTrainer::new(QParams::new(2, 1), DbcqConfig::default()).unwrap();
    let t = transition(vec![f64::NAN, 0.0], 0, 0.0, vec![0.0, 0.0], false);
    assert!(matches!(tr.train_step(&[&t]), Err(crate::Error::Numeric(_))));
}

// One-step episodes: the reward is +1 for the planted action of the state's
// quadrant and −1 otherwise. Clinicians pick the planted action a fifth
// of the time and a uniform action otherwise.
fn planted(n: usize, seed: u64) -> (Vec<LatentTransition>, Vec<(Vec<f64>, usize)>) {
    let best = |s: &[f64]| [0, 7, 13, 24][(s[0] > 0.0) as usize * 2 + (s[1] > 0.0) as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut held = Vec::new();
    for i in 0..n + 200 {
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        if i >= n {
            let b = best(&s);
            held.push((s, b));
            continue;
        }
        let a = if rng.random_bool(0.2) { best(&s) } else { rng.random_range(0..N_ACTIONS) };
        let r = if a == best(&s) { 1.0 } else { -1.0 };
        data.push(transition(s.clone(), a, r, s, true));
    }
    (data, held)
}

#[test]
fn train_counts_evaluations_and_learns_planted_actions() {
    let (data, held) = planted(6000, 3);
    let cfg = DbcqConfig {
        iterations: 6000,
        eval_period: 600,
        ..DbcqConfig::default()
    };
    let mut calls = Vec::new();
    let run = dbcq_train(&data, &cfg, |it, _| {
        calls.push(it);
        Ok(it as f64)
    })
    .unwrap();
    assert_eq!(run.curve.iterations.len(), 10);
    assert_eq!(calls, (1..=10).map(|k| k * 600).collect::<Vec<_>>());
    assert_eq!(run.td_loss.len(), 6000);
    assert_eq!(run.td_jsonl().lines().count(), 6000);
    let states: Vec<Vec<f64>> = held.iter().map(|h| h.0.clone()).collect();
    let picks = run.params.select_actions(&Tensor::from_rows(&states).unwrap(), 0.3).unwrap();
    let hits = picks.iter().zip(&held).filter(|(a, h)| **a == h.1).count();
    assert!(hits as f64 >= 0.8 * held.len() as f64, "{hits}/{}", held.len());
}

#[test]
fn train_is_deterministic() {
    let (data, _) = planted(500, 4);
    let cfg = DbcqConfig {
        iterations: 200,
        eval_period: 50,
        batch_size: 32,
        ..DbcqConfig::default()
    };
    let a = dbcq_train(&data, &cfg, |_, q| Ok(q.q_values(&Tensor::matrix(1, 8, vec![0.1; 8])?)?.data()[0])).unwrap();
    let b = dbcq_train(&data, &cfg, |_, q| Ok(q.q_values(&Tensor::matrix(1, 8, vec![0.1; 8])?)?.data()[0])).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.params, b.params);
    assert_eq!(a.td_loss, b.td_loss);
}

#[test]
fn config_checks() {
    assert!(DbcqConfig { threshold: 1.5, ..DbcqConfig::default() }.validate().is_err());
    assert!(DbcqConfig { gamma: 0.0, ..DbcqConfig::default() }.validate().is_err());
    let d = DbcqConfig::default();
    assert_eq!((d.threshold, d.gamma, d.polyak, d.lr, d.eval_period), (0.3, 0.99, 0.01, 1e-3, 500));
    let b = BcConfig::default();
    assert_eq!((b.epochs, b.lr, b.weight_decay), (5000, 1e-4, 0.1));
}
