use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cohort::Trajectory;
use crate::numerics::grad_check_params;
use crate::trajgraph::{build_trajectory_graph, one_hot_action, snapshot, GraphKind, HeteroGraph};

fn small_schema() -> FeatureSchema {
    FeatureSchema::new(
        vec!["o:age".into(), "o:gender".into()],
        vec!["o:HR".into(), "o:SOFA".into(), "o:MeanBP".into()],
        EncoderMode::Gnn,
    )
    .unwrap()
}

fn random_traj(len: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    Trajectory {
        id: "r".into(),
        invariant: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
        steps: (0..len)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
        actions: (0..len).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
        reward: 1.0,
    }
}

fn small_encoder(kind: EncoderKind, n_conv: usize, seed: u64) -> Encoder {
    let arch = EncoderArch::for_schema(kind, &small_schema()).with_conv(4, n_conv);
    Encoder::new(arch, seed).unwrap()
}

fn param(set: &ParamSet, name: &str) -> Tensor {
    set.get(set.find(name).unwrap()).value.clone()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (n_in, n_out) = (w.rows(), w.cols());
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|j| (0..n_in).map(|i| x[i] * w.data()[i * n_out + j]).sum())
        .collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn naive_layer(set: &ParamSet, name: &str, x: &[f64], relu: bool) -> Vec<f64> {
    let y = plus(&vecmat(x, &param(set, &format!("{name}.w"))), param(set, &format!("{name}.b")).data());
    if relu {
        y.into_iter().map(|v| v.max(0.0)).collect()
    } else {
        y
    }
}

// Direct per-node message passing over the stored graph, independent of the
// batched tape implementation.
fn dense_oracle(enc: &Encoder, g: &HeteroGraph) -> Vec<f64> {
    let set = enc.params();
    let mut h: Vec<Vec<f64>> = g
        .nodes
        .iter()
        .map(|n| match n.kind {
            NodeType::Patient => naive_layer(set, "proj.patient", &n.features, false),
            _ => naive_layer(set, "proj.timestep", &n.features, false),
        })
        .collect();
    for l in 0..enc.arch().n_conv {
        let mut next = Vec::with_capacity(h.len());
        for (v, node) in g.nodes.iter().enumerate() {
            let mut acc = vec![0.0; enc.arch().f_out];
            for r in RELATIONS {
                if endpoints(r).1 != node.kind {
                    continue;
                }
                let base = format!("conv{l}.{}", r.name());
                acc = plus(&acc, &vecmat(&h[v], &param(set, &format!("{base}.w_self"))));
                acc = plus(&acc, param(set, &format!("{base}.bias")).data());
                let inc: Vec<_> = g.edges.iter().filter(|e| e.kind == r && e.dst == v).collect();
                if inc.is_empty() {
                    continue;
                }
                match enc.kind() {
                    EncoderKind::Sage => {
                        let mut mean = vec![0.0; acc.len()];
                        for e in &inc {
                            mean = plus(&mean, &h[e.src]);
                        }
                        mean.iter_mut().for_each(|m| *m /= inc.len() as f64);
                        acc = plus(&acc, &vecmat(&mean, &param(set, &format!("{base}.w_neigh"))));
                    }
                    _ => {
                        let ws = param(set, &format!("{base}.w_s"));
                        let wt = param(set, &format!("{base}.w_t"));
                        let we = param(set, &format!("{base}.w_e"));
                        let att = param(set, &format!("{base}.att"));
                        let scores: Vec<f64> = inc
                            .iter()
                            .map(|e| {
                                let z = plus(&plus(&vecmat(&h[e.src], &ws), &vecmat(&h[v], &wt)), &vecmat(&e.attr, &we));
                                z.iter()
                                    .zip(att.data())
                                    .map(|(z, a)| a * if *z > 0.0 { *z } else { 0.2 * z })
                                    .sum()
                            })
                            .collect();
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let ex: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let z: f64 = ex.iter().sum();
                        for (e, x) in inc.iter().zip(&ex) {
                            let m = plus(&vecmat(&h[e.src], &ws), &vecmat(&e.attr, &we));
                            acc = plus(&acc, &m.iter().map(|v| v * x / z).collect::<Vec<_>>());
                        }
                    }
                }
            }
            next.push(acc.into_iter().map(|v| v.max(0.0)).collect());
        }
        h = next;
    }
    let p = g.patient().unwrap();
    let ts: Vec<usize> = (0..g.nodes.len()).filter(|&i| g.nodes[i].kind == NodeType::Timestep).collect();
    let mut pooled = h[p].clone();
    for &i in &ts {
        pooled = plus(&pooled, &h[i].iter().map(|v| v / ts.len() as f64).collect::<Vec<_>>());
    }
    naive_layer(set, "head", &pooled, false)
}

fn zero_all(set: &mut ParamSet) {
    set.iter_mut().for_each(|p| p.value.fill(0.0));
}

#[test]
fn ae_shape_zero_and_oracle() {
    let schema = FeatureSchema::default_for(EncoderMode::Ae);
    let enc = Encoder::new(EncoderArch::for_schema(EncoderKind::Ae, &schema), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs: Vec<f64> = (0..38).map(|_| rng.random_range(-2.0..2.0)).collect();
    let prev = one_hot_action(7).unwrap();
    let z = ae_encode(&obs, &prev, &enc).unwrap();
    assert_eq!(z.len(), LATENT_DIM);

    let set = enc.params();
    let h = naive_layer(set, "ae.l1", &ae_input(&obs, &prev), true);
    let h = naive_layer(set, "ae.l2", &h, true);
    let oracle = naive_layer(set, "ae.l3", &h, false);
    for (a, b) in z.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut zero = enc.clone();
    zero_all(zero.params_mut());
    assert!(ae_encode(&obs, &prev, &zero).unwrap().iter().all(|v| *v == 0.0));
    assert!(matches!(ae_encode(&obs[..33], &prev, &enc), Err(Error::Dimension(_))));
}

#[test]
fn decoder_shape_zero_and_oracle() {
    for obs_dim in [34, 33] {
        let dec = Decoder::new(DecoderArch { latent_dim: 64, obs_dim }, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(obs_dim as u64);
        let l: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = one_hot_action(11).unwrap();
        let y = decode_next(&l, &a, &dec).unwrap();
        assert_eq!(y.len(), obs_dim);
        let set = dec.params();
        let h = naive_layer(set, "dec.l1", &ae_input(&l, &a), true);
        let h = naive_layer(set, "dec.l2", &h, true);
        let oracle = naive_layer(set, "dec.l3", &h, false);
        for (p, q) in y.iter().zip(&oracle) {
            assert!((p - q).abs() < 1e-12);
        }
        let mut zero = dec.clone();
        zero_all(zero.params_mut());
        assert!(decode_next(&l, &a, &zero).unwrap().iter().all(|v| *v == 0.0));
    }
}

// One-wide layer so hand values can be read off directly.
fn unit_encoder(kind: EncoderKind) -> Encoder {
    let mut e = small_encoder(kind, 1, 0).clone();
    let arch = e.arch().clone().with_conv(1, 1);
    e = Encoder::new(arch, 0).unwrap();
    zero_all(e.params_mut());
    e
}

fn two_neighbour_edges() -> HeteroEdges {
    let mut edges = HeteroEdges::empty();
    let k = relation_index(EdgeType::TimestepToPatient).unwrap();
    edges.relations[k] = Relation::new(
        EdgeType::TimestepToPatient,
        vec![(0, 0, vec![1.0]), (1, 0, vec![1.0])],
    )
    .unwrap();
    edges
}

#[test]
fn conv_without_edges_is_relu_of_self() {
    let mut e = unit_encoder(EncoderKind::Sage);
    e.set("conv0.timestep_patient.w_self", Tensor::identity(1)).unwrap();
    let p = Tensor::matrix(1, 1, vec![-2.0]).unwrap();
    let t = Tensor::zeros(&[0, 1]);
    let (hp, _) = hetero_conv_layer(&p, &t, &HeteroEdges::empty(), &e, 0).unwrap();
    assert_eq!(hp.data(), &[0.0]);
    let p = Tensor::matrix(1, 1, vec![1.5]).unwrap();
    let (hp, _) = hetero_conv_layer(&p, &t, &HeteroEdges::empty(), &e, 0).unwrap();
    assert_eq!(hp.data(), &[1.5]);
}

#[test]
fn sage_message_is_neighbour_mean() {
    let mut e = unit_encoder(EncoderKind::Sage);
    e.set("conv0.timestep_patient.w_neigh", Tensor::identity(1)).unwrap();
    let p = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    let t = Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap();
    let (hp, _) = hetero_conv_layer(&p, &t, &two_neighbour_edges(), &e, 0).unwrap();
    assert_eq!(hp.data(), &[3.0]);
}

#[test]
fn gat_message_is_attention_weighted() {
    let mut e = unit_encoder(EncoderKind::Gatv2);
    e.set("conv0.timestep_patient.w_s", Tensor::identity(1)).unwrap();
    let p = Tensor::matrix(1, 1, vec![0.0]).unwrap();
    let t = Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap();
    // zero attention vector: equal weights
    let (hp, _) = hetero_conv_layer(&p, &t, &two_neighbour_edges(), &e, 0).unwrap();
    assert!((hp.data()[0] - 3.0).abs() < 1e-15);
    // scores 2a and 4a with a = ln3 / 2 give weights (0.25, 0.75)
    e.set("conv0.timestep_patient.att", Tensor::vector(vec![3f64.ln() / 2.0])).unwrap();
    let (hp, _) = hetero_conv_layer(&p, &t, &two_neighbour_edges(), &e, 0).unwrap();
    assert!((hp.data()[0] - 3.5).abs() < 1e-12, "{}", hp.data()[0]);
    let w = attention_coefficients(&[0.0], &[vec![2.0], vec![4.0]], &[vec![1.0], vec![1.0]], &e, 0, EdgeType::TimestepToPatient)
        .unwrap();
    assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
}

#[test]
fn attention_coefficient_cases() {
    let e = small_encoder(EncoderKind::Gatv2, 1, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut vecf = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let target = vecf(4);
    let one = attention_coefficients(&target, &[vecf(4)], &[one_hot_action(3).unwrap()], &e, 0, EdgeType::Action).unwrap();
    assert_eq!(one, vec![1.0]);

    let u = vecf(4);
    let same = attention_coefficients(&target, &[u.clone(), u.clone(), u], &vec![vec![1.0]; 3], &e, 0, EdgeType::TimestepToPatient)
        .unwrap();
    for w in &same {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }

    let nb = [vecf(4), vecf(4), vecf(4)];
    let attrs: Vec<Vec<f64>> = (0..3).map(|a| one_hot_action(a * 5).unwrap()).collect();
    let got = attention_coefficients(&target, &nb, &attrs, &e, 0, EdgeType::Action).unwrap();
    let set = e.params();
    let (ws, wt, we, att) = (
        param(set, "conv0.action.w_s"),
        param(set, "conv0.action.w_t"),
        param(set, "conv0.action.w_e"),
        param(set, "conv0.action.att"),
    );
    let scores: Vec<f64> = nb
        .iter()
        .zip(&attrs)
        .map(|(h, a)| {
            let z = plus(&plus(&vecmat(h, &ws), &vecmat(&target, &wt)), &vecmat(a, &we));
            z.iter().zip(att.data()).map(|(z, a)| a * z.max(0.2 * z)).sum()
        })
        .collect();
    let total: f64 = scores.iter().map(|s| s.exp()).sum();
    for (g, s) in got.iter().zip(&scores) {
        assert!((g - s.exp() / total).abs() < 1e-12);
    }
    assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(attention_coefficients(&target, &[], &[], &e, 0, EdgeType::Action).is_err());
}

#[test]
fn gnn_latent_shape_for_first_and_last_snapshot() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = build_trajectory_graph(&random_traj(20, &mut rng), &small_schema()).unwrap();
    for kind in [EncoderKind::Sage, EncoderKind::Gatv2] {
        let e = small_encoder(kind, 2, 1);
        for t in [1, 20] {
            assert_eq!(gnn_encode(&snapshot(&g, t).unwrap(), &e).unwrap().len(), LATENT_DIM);
        }
    }
}

#[test]
fn gnn_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = build_trajectory_graph(&random_traj(6, &mut rng), &small_schema()).unwrap();
    for kind in [EncoderKind::Sage, EncoderKind::Gatv2] {
        let mut e = small_encoder(kind, 2, 2);
        // small hand-scaled weights
        e.params_mut()
            .iter_mut()
            .for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v *= 0.5));
        for t in [2, 4, 6] {
            let s = snapshot(&g, t).unwrap();
            let got = gnn_encode(&s, &e).unwrap();
            let want = dense_oracle(&e, &s);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{kind} g_{t}: {a} vs {b}");
            }
        }
    }
}

fn shuffled(g: &HeteroGraph, rng: &mut ChaCha8Rng) -> HeteroGraph {
    let mut perm: Vec<usize> = (0..g.nodes.len()).collect();
    perm.shuffle(rng);
    let mut nodes = vec![g.nodes[0].clone(); g.nodes.len()];
    for (old, &new) in perm.iter().enumerate() {
        nodes[new] = g.nodes[old].clone();
    }
    let mut edges: Vec<_> = g
        .edges
        .iter()
        .map(|e| crate::trajgraph::Edge {
            src: perm[e.src],
            dst: perm[e.dst],
            ..e.clone()
        })
        .collect();
    edges.shuffle(rng);
    HeteroGraph {
        kind: g.kind,
        nodes,
        edges,
    }
}

#[test]
fn storage_order_does_not_change_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = build_trajectory_graph(&random_traj(9, &mut rng), &small_schema()).unwrap();
    let s = snapshot(&g, 7).unwrap();
    for kind in [EncoderKind::Sage, EncoderKind::Gatv2] {
        let e = small_encoder(kind, 2, 3);
        let base = gnn_encode(&s, &e).unwrap();
        for _ in 0..5 {
            let p = shuffled(&s, &mut rng);
            assert_eq!(gnn_encode(&p, &e).unwrap(), base);
        }
    }
}

#[test]
fn zero_message_weights_leave_self_features_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = build_trajectory_graph(&random_traj(5, &mut rng), &small_schema()).unwrap();
    let b = SnapshotBatch::from_snapshots(&[snapshot(&g, 5).unwrap()]).unwrap();
    let isolated = SnapshotBatch {
        edges: HeteroEdges::empty(),
        ..b.clone()
    };
    for kind in [EncoderKind::Sage, EncoderKind::Gatv2] {
        let mut e = small_encoder(kind, 2, 4);
        let names: Vec<String> = e.params().names().to_vec();
        for n in names {
            if [".w_neigh", ".w_s", ".w_t", ".w_e", ".att"].iter().any(|s| n.ends_with(s)) {
                let shape = param(e.params(), &n).shape().to_vec();
                e.set(&n, Tensor::zeros(&shape)).unwrap();
            }
        }
        let with = e.encode(EncoderInput::Graph(&b)).unwrap();
        let without = e.encode(EncoderInput::Graph(&isolated)).unwrap();
        assert_eq!(with, without, "{kind}");
    }
}

#[test]
fn action_attributes_reach_gat_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = build_trajectory_graph(&random_traj(4, &mut rng), &small_schema()).unwrap();
    let s = snapshot(&g, 4).unwrap();
    let mut masked = s.clone();
    for e in masked.edges.iter_mut().filter(|e| e.kind == EdgeType::Action) {
        let a = e.attr.iter().position(|v| *v == 1.0).unwrap();
        e.attr = one_hot_action((a + 1) % N_ACTIONS).unwrap();
    }
    let sage = small_encoder(EncoderKind::Sage, 2, 5);
    assert_eq!(gnn_encode(&s, &sage).unwrap(), gnn_encode(&masked, &sage).unwrap());
    let gat = small_encoder(EncoderKind::Gatv2, 1, 5);
    assert_ne!(gnn_encode(&s, &gat).unwrap(), gnn_encode(&masked, &gat).unwrap());
}

#[test]
fn batch_concat_matches_joint_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g1 = build_trajectory_graph(&random_traj(3, &mut rng), &small_schema()).unwrap();
    let g2 = build_trajectory_graph(&random_traj(5, &mut rng), &small_schema()).unwrap();
    let a: Vec<_> = (1..=3).map(|t| snapshot(&g1, t).unwrap()).collect();
    let b: Vec<_> = (1..=5).map(|t| snapshot(&g2, t).unwrap()).collect();
    let joint = SnapshotBatch::from_snapshots(&[a.clone(), b.clone()].concat()).unwrap();
    let ba = SnapshotBatch::from_snapshots(&a).unwrap();
    let bb = SnapshotBatch::from_snapshots(&b).unwrap();
    assert_eq!(SnapshotBatch::concat(&[&ba, &bb]).unwrap(), joint);
    assert_eq!(joint.n_timesteps(), 6 + 15);
}

#[test]
fn non_snapshots_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = build_trajectory_graph(&random_traj(3, &mut rng), &small_schema()).unwrap();
    assert_eq!(g.kind, GraphKind::Trajectory);
    let e = small_encoder(EncoderKind::Sage, 1, 0);
    assert!(matches!(gnn_encode(&g, &e), Err(Error::Graph(_))));
}

fn encoder_decoder_grad_error(kind: EncoderKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = random_traj(3, &mut rng);
    let enc = small_encoder(kind, if kind == EncoderKind::Ae { 0 } else { 2 }, seed);
    let dec = Decoder::new(DecoderArch { latent_dim: LATENT_DIM, obs_dim: 3 }, seed).unwrap();
    let actions = Tensor::from_rows(&[one_hot_action(traj.actions[0]).unwrap(), one_hot_action(traj.actions[1]).unwrap()]).unwrap();
    let target = Tensor::from_rows(&traj.steps[1..3]).unwrap();
    let graph = build_trajectory_graph(&traj, &small_schema()).unwrap();
    let batch = SnapshotBatch::from_snapshots(&[snapshot(&graph, 1).unwrap(), snapshot(&graph, 2).unwrap()]).unwrap();
    let ae_rows = Tensor::from_rows(&[
        ae_input(&traj.observation(0), &[0.0; N_ACTIONS]),
        ae_input(&traj.observation(1), &one_hot_action(traj.actions[0]).unwrap()),
    ])
    .unwrap();
    let input = if kind == EncoderKind::Ae {
        EncoderInput::Ae(&ae_rows)
    } else {
        EncoderInput::Graph(&batch)
    };
    grad_check_params(
        &[enc.params(), dec.params()],
        |tape, vars| {
            let z = enc.forward(tape, &vars[0], input)?;
            let y = dec.forward(tape, &vars[1], z, &actions)?;
            tape.gaussian_nll(y, &target)
        },
        1e-5,
        Some(3),
        seed,
    )
    .unwrap()
}

#[test]
fn encoder_decoder_gradients_match_finite_differences() {
    for kind in [EncoderKind::Ae, EncoderKind::Sage, EncoderKind::Gatv2] {
        let err = encoder_decoder_grad_error(kind, 77);
        assert!(err < 1e-5, "{kind}: {err}");
    }
}
