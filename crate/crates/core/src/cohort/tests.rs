use std::collections::HashSet;

use proptest::prelude::*;

use super::*;

fn tiny_schema() -> FeatureSchema {
    FeatureSchema::new(
        vec!["o:age".into()],
        vec!["o:HR".into(), "o:SOFA".into()],
        EncoderMode::Gnn,
    )
    .unwrap()
}

fn traj(id: &str, len: usize, reward: f64) -> Trajectory {
    Trajectory {
        id: id.into(),
        invariant: vec![60.0],
        steps: (0..len).map(|t| vec![80.0 + t as f64, 0.5 * t as f64]).collect(),
        actions: (0..len).map(|t| (3 * t) % N_ACTIONS).collect(),
        reward,
    }
}

fn cohort_of(lens_rewards: &[(usize, f64)]) -> Cohort {
    let ts = lens_rewards
        .iter()
        .enumerate()
        .map(|(i, (l, r))| traj(&format!("t{i}"), *l, *r))
        .collect();
    Cohort::new(tiny_schema(), ts).unwrap()
}

const TWO_TRAJ_CSV: &str = "\
traj_id,step,o:age,o:HR,o:SOFA,action,reward
a,0,61,90.5,3,0,
a,1,61,88,2.25,7,1
b,0,45,101,6,24,
b,1,45,99.125,7,12,
b,2,45,97,8,3,-1
";

#[test]
fn csv_two_trajectories() {
    let c = read_csv(TWO_TRAJ_CSV.as_bytes(), &tiny_schema()).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c.trajectories[0].steps[1], vec![88.0, 2.25]);
    assert_eq!(c.trajectories[1].actions, vec![24, 12, 3]);
    assert!(c.trajectories[0].survived());
    assert!(!c.trajectories[1].survived());
}

#[test]
fn csv_round_trip_is_exact() {
    let c = read_csv(TWO_TRAJ_CSV.as_bytes(), &tiny_schema()).unwrap();
    let mut out = Vec::new();
    write_csv(&c, &mut out).unwrap();
    assert_eq!(String::from_utf8(out.clone()).unwrap(), TWO_TRAJ_CSV);
    let again = read_csv(out.as_slice(), &tiny_schema()).unwrap();
    assert_eq!(again, c);
}

#[test]
fn csv_rejects_step_gap() {
    let text = "traj_id,step,o:age,o:HR,o:SOFA,action,reward\na,0,61,90,3,0,\na,2,61,88,2,7,1\n";
    let err = read_csv(text.as_bytes(), &tiny_schema()).unwrap_err().to_string();
    assert!(err.contains("non-contiguous steps"), "{err}");
}

#[test]
fn csv_rejects_bad_rows() {
    let cases = [
        ("traj_id,step,o:age,o:HR,o:BOGUS,action,reward\n", "unknown column"),
        ("traj_id,step,o:age,o:HR,o:SOFA,action,reward\na,0,61,,3,0,1\n", "line 2"),
        ("traj_id,step,o:age,o:HR,o:SOFA,action,reward\na,0,61,90,3,25,1\n", "action"),
        ("traj_id,step,o:age,o:HR,o:SOFA,action,reward\na,0,61,90,3,1,0\n", "reward"),
    ];
    for (text, needle) in cases {
        let err = read_csv(text.as_bytes(), &tiny_schema()).unwrap_err().to_string();
        assert!(err.contains(needle), "{needle}: {err}");
    }
}

#[test]
fn filter_short_counts() {
    let (kept, removed) = filter_short(&cohort_of(&[(1, 1.0), (3, 1.0)]));
    assert_eq!((kept.len(), removed), (1, 1));

    let c = cohort_of(&[(2, 1.0), (5, -1.0)]);
    let (kept, removed) = filter_short(&c);
    assert_eq!(removed, 0);
    assert_eq!(kept, c);

    let mixed: Vec<(usize, f64)> = (0..10).map(|i| (if i % 3 == 0 && i > 0 { 1 } else { 4 }, 1.0)).collect();
    let (kept, removed) = filter_short(&cohort_of(&mixed));
    assert_eq!((kept.len(), removed), (7, 3));
    assert!(kept.trajectories.iter().all(|t| t.len() >= 2));
}

#[test]
fn stratified_split_100_with_6_deaths() {
    let spec: Vec<(usize, f64)> = (0..100).map(|i| (3, if i % 17 == 0 { -1.0 } else { 1.0 })).collect();
    let c = cohort_of(&spec);
    let deaths = c.trajectories.iter().filter(|t| !t.survived()).count();
    assert_eq!(deaths, 6);
    let s = stratified_split(&c, [0.7, 0.15, 0.15], 3).unwrap();
    let count_deaths = |idx: &[usize]| idx.iter().filter(|&&i| !c.trajectories[i].survived()).count();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    // ideal 4.2 / 0.9 / 0.9 deaths, largest remainder gives 4 / 1 / 1
    assert_eq!(
        (count_deaths(&s.train), count_deaths(&s.val), count_deaths(&s.test)),
        (4, 1, 1)
    );
    assert_eq!(s, stratified_split(&c, [0.7, 0.15, 0.15], 3).unwrap());

    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}

#[test]
fn stratified_split_too_small() {
    let c = cohort_of(&[(2, 1.0), (2, 1.0), (2, 1.0), (2, -1.0)]);
    assert!(matches!(
        stratified_split(&c, [0.7, 0.15, 0.15], 0),
        Err(Error::Data(_))
    ));
}

#[test]
fn batches_cover_each_item_once() {
    let sizes: Vec<usize> = make_batches(300, 128, 1, 0).unwrap().iter().map(Batch::len).collect();
    assert_eq!(sizes, vec![128, 128, 44]);
    assert_eq!(make_batches(50, 128, 1, 0).unwrap().len(), 1);
    assert!(make_batches(0, 128, 1, 0).is_err());

    let flat = |e: u64| -> Vec<usize> {
        make_batches(300, 128, 9, e)
            .unwrap()
            .into_iter()
            .flat_map(|b| b.indices)
            .collect()
    };
    let (e0, e1) = (flat(0), flat(1));
    assert_ne!(e0, e1);
    let (mut s0, mut s1) = (e0.clone(), e1);
    s0.sort_unstable();
    s1.sort_unstable();
    assert_eq!(s0, (0..300).collect::<Vec<_>>());
    assert_eq!(s0, s1);
    assert_eq!(e0, flat(0));
}

#[test]
fn discretize_extremes() {
    let edges = QuartileEdges {
        vaso: [0.1, 0.2, 0.4],
        fluid: [50.0, 100.0, 500.0],
    };
    assert_eq!(discretize_actions(0.0, 0.0, &edges).unwrap(), 0);
    assert_eq!(discretize_actions(9.0, 9000.0, &edges).unwrap(), 24);
    assert_eq!(discretize_actions(0.0, 100.0, &edges).unwrap(), 2);
    assert!(discretize_actions(-0.1, 0.0, &edges).is_err());
}

// Empirical-quantile oracle: a dose's bin is 1 + the number of quartile
// positions whose sorted-sample value lies strictly below it.
#[test]
fn dose_bins_match_sorted_quantile_oracle() {
    let doses: Vec<f64> = (1..=9).map(|v| v as f64).collect(); // edges 3, 5, 7
    let edges = quartile_edges(&[&[0.0, 0.0][..], &doses].concat()).unwrap();
    let mut sorted = doses.clone();
    sorted.sort_by(f64::total_cmp);
    let oracle_edges = [sorted[2], sorted[4], sorted[6]];
    assert_eq!(edges, oracle_edges);
    for d in [0.5, 3.0, 3.0001, 5.0, 6.9, 7.0, 7.5, 100.0] {
        let oracle = 1 + oracle_edges.iter().filter(|e| **e < d).count();
        assert_eq!(dose_bin(d, &edges).unwrap(), oracle, "dose {d}");
    }
    assert_eq!(dose_bin(3.0, &edges).unwrap(), 1);
}

#[test]
fn stats_hand_cases() {
    let s = cohort_stats(&cohort_of(&[(2, 1.0), (20, -1.0)])).unwrap();
    assert_eq!(s.mortality, 0.5);
    assert_eq!((s.mean_length, s.median_length), (11.0, 11.0));
    assert!(cohort_stats(&cohort_of(&[])).is_err());
}

#[test]
fn mode_conversion_round_trips() {
    let c = generate_synthetic(
        &SyntheticConfig {
            n_traj: 20,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let ae = c.to_mode(EncoderMode::Ae).unwrap();
    assert_eq!((ae.schema.n_variant(), ae.schema.n_invariant()), (33, 5));
    let back = ae.to_mode(EncoderMode::Gnn).unwrap();
    assert_eq!(back.schema, c.schema);
    // weight collapses to its first-step value
    let w = c.schema.variant_index(WEIGHT_FEATURE).unwrap();
    for (a, b) in back.trajectories.iter().zip(&c.trajectories) {
        assert!(a.steps.iter().all(|s| s[w] == b.steps[0][w]));
    }
}

#[test]
fn synthetic_is_deterministic() {
    let cfg = SyntheticConfig {
        n_traj: 50,
        ..Default::default()
    };
    let a = generate_synthetic(&cfg, 11).unwrap();
    assert_eq!(a, generate_synthetic(&cfg, 11).unwrap());
    assert_ne!(a, generate_synthetic(&cfg, 12).unwrap());
    assert!(a.trajectories.iter().all(|t| (2..=MAX_STEPS).contains(&t.len())));
    assert!(generate_synthetic(&SyntheticConfig { n_traj: 0, ..cfg.clone() }, 1).is_err());
    assert!(generate_synthetic(&SyntheticConfig { mortality_rate: 1.0, ..cfg }, 1).is_err());
}

// Binomial(2000, 0.06) has sd ≈ 0.0053, so [0.04, 0.08] is a ±3.7 sd band;
// the length mean has sd ≈ 2.1/sqrt(2000), far inside ±1.
#[test]
fn synthetic_default_statistics() {
    let c = generate_synthetic(&SyntheticConfig::default(), 1234).unwrap();
    let s = cohort_stats(&c).unwrap();
    assert_eq!(s.n, 2000);
    assert!((0.04..=0.08).contains(&s.mortality), "{}", s.mortality);
    assert!((12.3..=14.3).contains(&s.mean_length), "{}", s.mean_length);
    assert!((12.0..=14.0).contains(&s.median_length));
    assert!(c.trajectories.iter().all(|t| t.steps.iter().flatten().all(|v| v.is_finite())));
}

proptest! {
    #[test]
    fn discretisation_is_monotone(a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let edges = [0.1, 0.5, 1.2];
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(dose_bin(lo, &edges).unwrap() <= dose_bin(hi, &edges).unwrap());
    }

    #[test]
    fn split_then_merge_restores_ids(n in 40usize..120, seed in 0u64..1000) {
        let spec: Vec<(usize, f64)> = (0..n).map(|i| (2, if i % 7 == 0 { -1.0 } else { 1.0 })).collect();
        let c = cohort_of(&spec);
        let s = stratified_split(&c, [0.7, 0.15, 0.15], seed).unwrap();
        let ids: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
    }
}
