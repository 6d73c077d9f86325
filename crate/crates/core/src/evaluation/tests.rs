use proptest::prelude::*;

use super::*;
use crate::cohort::{generate_synthetic, EncoderMode, Standardizer, SyntheticConfig};
use crate::policy::{train_behavior_cloning, BcConfig};
use crate::training::LatentTrajectory;

fn one_step(pi_e: f64, pi_b: f64, reward: f64) -> EvalTrajectory {
    EvalTrajectory {
        steps: vec![EvalStep { pi_e, pi_b, action: 0 }],
        reward,
    }
}

#[test]
fn soften_examples() {
    let mut q = vec![0.0; 25];
    q[5] = 1.0;
    let all = vec![true; 25];
    let p = soften_policy(&q, &all, 0.0).unwrap();
    assert_eq!(p[5], 1.0);
    assert_eq!(p.iter().sum::<f64>(), 1.0);
    let p = soften_policy(&q, &all, 0.24).unwrap();
    assert!((p[5] - 0.76).abs() < 1e-15);
    assert!(p.iter().enumerate().all(|(a, v)| a == 5 || (v - 0.01).abs() < 1e-15));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut only = vec![false; 25];
    only[2] = true;
    assert_eq!(soften_policy(&q, &only, 0.01).unwrap()[2], 0.99);
    assert!(soften_policy(&q, &[false; 25], 0.01).is_err());
    assert!(soften_policy(&q, &all, 1.0).is_err());
}

#[test]
fn wis_examples() {
    let same: Vec<EvalTrajectory> = [1.0, -1.0, 1.0, 1.0].iter().map(|&r| one_step(0.3, 0.3, r)).collect();
    assert_eq!(wis(&same, 1.0).unwrap(), 0.5);
    assert_eq!(wis(&[one_step(0.01, 0.9, -1.0)], 1.0).unwrap(), -1.0);
    let two = [one_step(0.8, 0.4, 1.0), one_step(0.2, 0.4, -1.0)];
    assert!((wis(&two, 1.0).unwrap() - 0.6).abs() < 1e-15);
}

#[test]
fn wis_discounts_by_length() {
    let t = EvalTrajectory {
        steps: vec![EvalStep { pi_e: 0.5, pi_b: 0.5, action: 1 }; 3],
        reward: 1.0,
    };
    assert!((wis(std::slice::from_ref(&t), 0.9).unwrap() - 0.81).abs() < 1e-15);
    let cfg = WisConfig {
        discounted: false,
        ..WisConfig::default()
    };
    assert_eq!(wis_report(&[t], &cfg).unwrap().value, 1.0);
}

#[test]
fn wis_errors() {
    assert!(wis(&[], 1.0).is_err());
    let cfg = WisConfig {
        clip: None,
        ..WisConfig::default()
    };
    let e = wis_report(&[one_step(0.0, 0.5, 1.0)], &cfg).unwrap_err();
    assert!(e.to_string().contains("degenerate weights"));
    assert!(wis(&[one_step(0.5, 0.0, 1.0)], 1.0).is_err());
}

#[test]
fn wis_clipping_is_reported() {
    let r = wis_report(&[one_step(1.0, 1e-6, 1.0), one_step(0.5, 0.5, -1.0)], &WisConfig::default()).unwrap();
    assert_eq!(r.clipped_steps, 1);
    assert!((r.total_weight - (1e4 + 1.0)).abs() < 1e-9);
}

proptest! {
    #[test]
    fn wis_is_scale_invariant_and_bounded(
        raw in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0, any::<bool>()), 1..30),
        c in 0.1f64..0.9,
    ) {
        let ts: Vec<EvalTrajectory> = raw.iter().map(|&(e, b, s)| one_step(e, b, if s { 1.0 } else { -1.0 })).collect();
        let v = wis(&ts, 1.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        let scaled: Vec<EvalTrajectory> = raw.iter().map(|&(e, b, s)| one_step(e * c, b, if s { 1.0 } else { -1.0 })).collect();
        prop_assert!((wis(&scaled, 1.0).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn ema_is_linear(xs in proptest::collection::vec(-5.0f64..5.0, 1..20), k in -3.0f64..3.0) {
        let a = ema(&xs, 0.1).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|x| k * x).collect();
        let b = ema(&scaled, 0.1).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((k * p - q).abs() < 1e-12);
        }
        prop_assert_eq!(a[0], xs[0]);
    }
}

#[test]
fn ema_examples() {
    assert_eq!(ema(&[0.0, 1.0], 0.1).unwrap(), vec![0.0, 0.1]);
    assert_eq!(ema(&[2.5; 6], 0.1).unwrap(), vec![2.5; 6]);
    let xs = [0.3, -1.0, 4.0];
    assert_eq!(ema(&xs, 1.0).unwrap(), xs.to_vec());
    assert!(ema(&[], 0.1).is_err());
    assert!(ema(&[1.0], 0.0).is_err());
}

#[test]
fn aggregate_examples() {
    let (m, s) = aggregate_seeds(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
    assert_eq!((m, s), (vec![1.0, 1.0], vec![1.0, 1.0]));
    let (_, s) = aggregate_seeds(&vec![vec![0.4, 1.0]; 3]).unwrap();
    assert_eq!(s, vec![0.0, 0.0]);
    assert!(aggregate_seeds(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    assert!(aggregate_seeds(&[]).is_err());

    let curves = vec![vec![0.1, 0.7, -0.2], vec![0.5, 0.3, 0.9], vec![-0.4, 0.2, 0.6]];
    let (m, s) = aggregate_seeds(&curves).unwrap();
    for i in 0..3 {
        let (a, b, c) = (curves[0][i], curves[1][i], curves[2][i]);
        let mu = (a + b + c) / 3.0;
        let sd = (((a - mu).powi(2) + (b - mu).powi(2) + (c - mu).powi(2)) / 3.0).sqrt();
        assert!((m[i] - mu).abs() < 1e-12 && (s[i] - sd).abs() < 1e-12);
    }
}

#[test]
fn normalize_examples() {
    for (loss, dim, want) in [(15.44, 33, 0.035179), (15.91, 34, 0.035184), (15.75, 34, 0.034830)] {
        assert!((normalize_loss(loss, dim).unwrap() - want).abs() < 1e-6);
    }
    assert!(normalize_loss(1.0, 0).is_err());
}

#[test]
fn curves_csv_and_svg() {
    let a = EvalCurve::new(vec![500, 1000, 1500], vec![0.1, 0.4, 0.2]).unwrap();
    let b = EvalCurve::new(vec![500, 1000, 1500], vec![0.3, 0.0, 0.5]).unwrap();
    assert_eq!(a.smoothed[0], 0.1);
    assert_eq!(a.to_jsonl().lines().next().unwrap(), r#"{"iteration":500,"wis":0.1}"#);
    let c = SeedCurves::from_runs(&[(1234, a), (2020, b)]).unwrap();
    let csv = c.to_csv();
    assert!(csv.starts_with("iteration,mean,std,seed_1234,seed_2020\n"));
    let back = SeedCurves::from_csv(&csv).unwrap();
    assert_eq!(back, c);
    let svg = render_svg(&back, "WIS");
    assert_eq!(svg, render_svg(&c, "WIS"));
    assert!(svg.contains("<polygon") && svg.contains("<polyline"));
    assert!(SeedCurves::from_csv("iteration,mean\n1,2\n").is_err());
    assert!(EvalCurve::new(vec![1], vec![]).is_err());
}

// Uniform clinicians: a near-uniform behaviour model makes WIS of the
// uniform policy close to the plain mean return.
#[test]
fn uniform_policy_on_uniform_logging_matches_mean_return() {
    let cfg = SyntheticConfig {
        n_traj: 2000,
        behavior_sharpness: 0.0,
        ..SyntheticConfig::default()
    };
    let c = generate_synthetic(&cfg, 8).unwrap().to_mode(EncoderMode::Ae).unwrap();
    let st = Standardizer::fit(&c.trajectories).unwrap();
    let raw = st.apply_all(&c.trajectories);
    let obs: Vec<Vec<f64>> = raw.iter().flat_map(|t| (0..t.len()).map(|i| t.observation(i))).collect();
    let acts: Vec<usize> = raw.iter().flat_map(|t| t.actions.clone()).collect();
    let bc = train_behavior_cloning(
        &Tensor::from_rows(&obs).unwrap(),
        &acts,
        &BcConfig {
            epochs: 2,
            ..BcConfig::default()
        },
    )
    .unwrap();
    let latent = LatentDataset {
        latent_dim: 2,
        trajectories: raw
            .iter()
            .map(|t| LatentTrajectory {
                id: t.id.clone(),
                states: vec![vec![0.0, 0.0]; t.len()],
                actions: t.actions.clone(),
                rewards: (0..t.len()).map(|i| if i + 1 == t.len() { t.reward } else { 0.0 }).collect(),
                dones: (0..t.len()).map(|i| i + 1 == t.len()).collect(),
            })
            .collect(),
    };
    let wcfg = WisConfig {
        discounted: false,
        ..WisConfig::default()
    };
    let ev = WisEvaluator::new(&bc.model, &latent, &raw, 0.3, wcfg).unwrap();
    let mean = raw.iter().map(|t| t.reward).sum::<f64>() / raw.len() as f64;
    assert!((ev.evaluate_behavior().unwrap() - mean).abs() < 1e-12);
    let u = ev.evaluate_uniform().unwrap();
    assert!((u - mean).abs() < 0.05, "uniform {u}, mean {mean}");

    let mut shifted = raw.clone();
    shifted.swap(0, 1);
    assert!(WisEvaluator::new(&bc.model, &latent, &shifted, 0.3, WisConfig::default()).is_err());
}
