use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepsis_rl::cohort::{EncoderMode, FeatureSchema, Trajectory, N_ACTIONS};
use sepsis_rl::trajgraph::{
    build_trajectory_graph, one_hot_action, snapshot, snapshots, validate_graph, EdgeType, NodeType,
};

fn random_trajectory(rng: &mut ChaCha8Rng, schema: &FeatureSchema, len: usize) -> Trajectory {
    Trajectory {
        id: format!("p{}", rng.random::<u32>()),
        invariant: (0..schema.n_invariant()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        steps: (0..len)
            .map(|_| (0..schema.n_variant()).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
        actions: (0..len).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
        reward: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
    }
}

#[test]
fn thousand_random_trajectories_have_exact_counts() {
    let schema = FeatureSchema::default_for(EncoderMode::Gnn);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let len = rng.random_range(2..=20);
        let tr = random_trajectory(&mut rng, &schema, len);
        let g = build_trajectory_graph(&tr, &schema).unwrap();
        assert!(validate_graph(&g).is_ok());
        assert_eq!(g.nodes.len(), len + 2);
        assert_eq!(g.count_edges(EdgeType::Action), len - 1);
        assert_eq!(g.count_edges(EdgeType::ToTerminal), 1);
        for (i, s) in snapshots(&g).unwrap().iter().enumerate() {
            let t = i + 1;
            assert!(validate_graph(s).is_ok());
            assert_eq!(s.nodes.len(), t + 1);
            assert_eq!(s.count_nodes(NodeType::Terminal), 0);
            assert_eq!(s.count_edges(EdgeType::Action), t - 1);
            let pt = s.count_edges(EdgeType::PatientToTimestep) + s.count_edges(EdgeType::TimestepToPatient);
            assert_eq!(pt, 2 * t);
        }
    }
}

#[test]
fn last_snapshot_plus_terminal_is_the_full_graph() {
    let schema = FeatureSchema::default_for(EncoderMode::Gnn);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tr = random_trajectory(&mut rng, &schema, 9);
    let g = build_trajectory_graph(&tr, &schema).unwrap();
    let last = snapshot(&g, 9).unwrap();
    let non_terminal: Vec<_> = g.nodes.iter().filter(|n| n.kind != NodeType::Terminal).cloned().collect();
    assert_eq!(last.nodes, non_terminal);
    let kept: Vec<_> = g.edges.iter().filter(|e| e.kind != EdgeType::ToTerminal).cloned().collect();
    assert_eq!(last.edges, kept);
    assert!(snapshot(&g, 10).is_err());
    assert!(snapshot(&g, 0).is_err());
}

#[test]
fn action_edges_carry_their_action() {
    let schema = FeatureSchema::default_for(EncoderMode::Gnn);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tr = random_trajectory(&mut rng, &schema, 12);
    let g = build_trajectory_graph(&tr, &schema).unwrap();
    for e in g.edges.iter().filter(|e| e.kind == EdgeType::Action) {
        let step = g.nodes[e.src].step.unwrap();
        assert_eq!(g.nodes[e.dst].step, Some(step + 1));
        let a = e.attr.iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(a, tr.actions[step]);
    }
}

proptest! {
    #[test]
    fn one_hot_round_trip(a in 0usize..N_ACTIONS) {
        let v = one_hot_action(a).unwrap();
        prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(v.iter().position(|&x| x == 1.0), Some(a));
    }

    #[test]
    fn out_of_range_actions_are_rejected(a in N_ACTIONS..1000usize) {
        prop_assert!(one_hot_action(a).is_err());
    }
}
