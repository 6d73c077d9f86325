//! Dynamic heterogeneous trajectory graphs and their prefix snapshots.
//!
//! A trajectory of length T becomes one Patient node (time-invariant
//! features), T Timestep nodes (time-variant features) and a Terminal node
//! carrying the reward. Snapshot `g_t` keeps the Patient node and the first
//! `t` Timestep nodes, never the Terminal.

use std::collections::HashSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::cohort::{FeatureSchema, Trajectory, N_ACTIONS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeType {
    Patient,
    Timestep,
    Terminal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeType {
    /// Timestep t → Timestep t+1, one-hot action attribute.
    Action,
    PatientToTimestep,
    TimestepToPatient,
    /// Last Timestep → Terminal, no attribute.
    ToTerminal,
}

impl EdgeType {
    pub const MESSAGE_TYPES: [EdgeType; 3] = [
        EdgeType::Action,
        EdgeType::PatientToTimestep,
        EdgeType::TimestepToPatient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EdgeType::Action => "action",
            EdgeType::PatientToTimestep => "patient_timestep",
            EdgeType::TimestepToPatient => "timestep_patient",
            EdgeType::ToTerminal => "terminal",
        }
    }
}

impl NodeType {
    pub fn name(self) -> &'static str {
        match self {
            NodeType::Patient => "patient",
            NodeType::Timestep => "timestep",
            NodeType::Terminal => "terminal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeType,
    /// Time index of a Timestep node, starting at 0.
    pub step: Option<usize>,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeType,
    pub attr: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    Trajectory,
    /// Prefix snapshot holding timesteps `0..t`.
    Snapshot(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub kind: GraphKind,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

pub type TrajectoryGraph = HeteroGraph;
pub type GraphSnapshot = HeteroGraph;

impl HeteroGraph {
    pub fn count_nodes(&self, kind: NodeType) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn count_edges(&self, kind: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn patient(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == NodeType::Patient)
    }

    pub fn n_timesteps(&self) -> usize {
        self.count_nodes(NodeType::Timestep)
    }
}

pub fn one_hot_action(a: usize) -> Result<Vec<f64>> {
    if a >= N_ACTIONS {
        return Err(Error::Graph(format!("action {a} outside [0, {}]", N_ACTIONS - 1)));
    }
    let mut v = vec![0.0; N_ACTIONS];
    v[a] = 1.0;
    Ok(v)
}

pub fn build_trajectory_graph(traj: &Trajectory, schema: &FeatureSchema) -> Result<TrajectoryGraph> {
    traj.validate(schema)
        .map_err(|e| Error::Graph(format!("schema/trajectory mismatch: {e}")))?;
    let t_len = traj.len();
    let mut nodes = Vec::with_capacity(t_len + 2);
    nodes.push(Node {
        kind: NodeType::Patient,
        step: None,
        features: traj.invariant.clone(),
    });
    for (s, obs) in traj.steps.iter().enumerate() {
        nodes.push(Node {
            kind: NodeType::Timestep,
            step: Some(s),
            features: obs.clone(),
        });
    }
    let terminal = nodes.len();
    nodes.push(Node {
        kind: NodeType::Terminal,
        step: None,
        features: vec![traj.reward],
    });

    let mut edges = Vec::with_capacity(3 * t_len);
    for s in 0..t_len {
        edges.push(Edge {
            src: 0,
            dst: 1 + s,
            kind: EdgeType::PatientToTimestep,
            attr: vec![1.0],
        });
        edges.push(Edge {
            src: 1 + s,
            dst: 0,
            kind: EdgeType::TimestepToPatient,
            attr: vec![1.0],
        });
    }
    for s in 0..t_len - 1 {
        edges.push(Edge {
            src: 1 + s,
            dst: 2 + s,
            kind: EdgeType::Action,
            attr: one_hot_action(traj.actions[s])?,
        });
    }
    edges.push(Edge {
        src: t_len,
        dst: terminal,
        kind: EdgeType::ToTerminal,
        attr: Vec::new(),
    });
    Ok(HeteroGraph {
        kind: GraphKind::Trajectory,
        nodes,
        edges,
    })
}

/// Prefix snapshot `g_t`: Patient plus timesteps `0..t` and the edges among
/// them. Node ids are reassigned in storage order.
pub fn snapshot(graph: &TrajectoryGraph, t: usize) -> Result<GraphSnapshot> {
    let n_steps = graph.n_timesteps();
    if t == 0 || t > n_steps {
        return Err(Error::Graph(format!("snapshot {t} outside [1, {n_steps}]")));
    }
    let keep = |n: &Node| match n.kind {
        NodeType::Patient => true,
        NodeType::Timestep => n.step.is_some_and(|s| s < t),
        NodeType::Terminal => false,
    };
    let mut remap = vec![usize::MAX; graph.nodes.len()];
    let mut nodes = Vec::with_capacity(t + 1);
    for (i, n) in graph.nodes.iter().enumerate() {
        if keep(n) {
            remap[i] = nodes.len();
            nodes.push(n.clone());
        }
    }
    let edges = graph
        .edges
        .iter()
        .filter(|e| e.kind != EdgeType::ToTerminal)
        .filter(|e| remap[e.src] != usize::MAX && remap[e.dst] != usize::MAX)
        .map(|e| Edge {
            src: remap[e.src],
            dst: remap[e.dst],
            ..e.clone()
        })
        .collect();
    Ok(HeteroGraph {
        kind: GraphKind::Snapshot(t),
        nodes,
        edges,
    })
}

/// All prefix snapshots `[g_1, .., g_T]`.
pub fn snapshots(graph: &TrajectoryGraph) -> Result<Vec<GraphSnapshot>> {
    (1..=graph.n_timesteps()).map(|t| snapshot(graph, t)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub code: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

/// Checks every structural rule of the type graph and returns all
/// violations found.
pub fn validate_graph(g: &HeteroGraph) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut flag = |code: &'static str, detail: String| out.push(Violation { code, detail });

    let n_patient = g.count_nodes(NodeType::Patient);
    let n_terminal = g.count_nodes(NodeType::Terminal);
    let n_steps = g.n_timesteps();
    if n_patient != 1 {
        flag("patient-count", format!("{n_patient} Patient nodes"));
    }
    match g.kind {
        GraphKind::Trajectory => {
            if n_terminal != 1 {
                flag("terminal-count", format!("{n_terminal} Terminal nodes"));
            }
        }
        GraphKind::Snapshot(t) => {
            if n_terminal != 0 {
                flag("terminal-in-snapshot", format!("{n_terminal} Terminal nodes"));
            }
            if t == 0 {
                flag("snapshot-index", "snapshot index 0".into());
            }
            if n_steps != t {
                flag("node-count", format!("snapshot {t} has {n_steps} Timestep nodes"));
            }
        }
    }
    if n_steps == 0 {
        flag("timestep-count", "no Timestep nodes".into());
    }

    // step index -> node id
    let mut by_step = vec![None; g.nodes.len()];
    for (i, n) in g.nodes.iter().enumerate() {
        match (n.kind, n.step) {
            (NodeType::Timestep, Some(s)) if s < n_steps => {
                if by_step[s].replace(i).is_some() {
                    flag("timestep-steps", format!("step {s} appears twice"));
                }
            }
            (NodeType::Timestep, s) => flag("timestep-steps", format!("node {i} has step {s:?}")),
            (_, Some(_)) => flag("timestep-steps", format!("non-Timestep node {i} has a step")),
            _ => {}
        }
    }
    let widths: HashSet<usize> = g
        .nodes
        .iter()
        .filter(|n| n.kind == NodeType::Timestep)
        .map(|n| n.features.len())
        .collect();
    if widths.len() > 1 {
        flag("feature-width", format!("Timestep widths {widths:?}"));
    }

    let mut action_from = HashSet::new();
    let mut to_patient = vec![0usize; g.nodes.len()];
    let mut from_patient = vec![0usize; g.nodes.len()];
    let mut terminal_edges = 0;
    for (k, e) in g.edges.iter().enumerate() {
        let (Some(src), Some(dst)) = (g.nodes.get(e.src), g.nodes.get(e.dst)) else {
            flag("edge-endpoint", format!("edge {k} references a missing node"));
            continue;
        };
        let types_ok = match e.kind {
            EdgeType::Action => src.kind == NodeType::Timestep && dst.kind == NodeType::Timestep,
            EdgeType::PatientToTimestep => src.kind == NodeType::Patient && dst.kind == NodeType::Timestep,
            EdgeType::TimestepToPatient => src.kind == NodeType::Timestep && dst.kind == NodeType::Patient,
            EdgeType::ToTerminal => src.kind == NodeType::Timestep && dst.kind == NodeType::Terminal,
        };
        if !types_ok {
            flag("edge-endpoint", format!("edge {k} of type {} joins {:?} to {:?}", e.kind.name(), src.kind, dst.kind));
            continue;
        }
        match e.kind {
            EdgeType::Action => {
                let (s, d) = (src.step.unwrap_or(usize::MAX), dst.step.unwrap_or(usize::MAX));
                if d != s.wrapping_add(1) || !action_from.insert(s) {
                    flag("non-path action edges", format!("edge {k} from step {s} to step {d}"));
                }
                let hot = e.attr.iter().filter(|v| **v == 1.0).count();
                let zero = e.attr.iter().filter(|v| **v == 0.0).count();
                if e.attr.len() != N_ACTIONS || hot != 1 || zero != N_ACTIONS - 1 {
                    flag("action-attribute", format!("edge {k} is not a {N_ACTIONS}-dim one-hot"));
                }
            }
            EdgeType::PatientToTimestep | EdgeType::TimestepToPatient => {
                if e.attr != [1.0] {
                    flag("patient-edge-weight", format!("edge {k} has attribute {:?}", e.attr));
                }
                if e.kind == EdgeType::PatientToTimestep {
                    from_patient[e.dst] += 1;
                } else {
                    to_patient[e.src] += 1;
                }
            }
            EdgeType::ToTerminal => {
                terminal_edges += 1;
                if !e.attr.is_empty() {
                    flag("terminal-edge", format!("edge {k} carries attributes"));
                }
                if src.step != Some(n_steps.saturating_sub(1)) {
                    flag("terminal-edge", format!("edge {k} leaves step {:?}", src.step));
                }
            }
        }
    }
    let n_action = g.count_edges(EdgeType::Action);
    if n_action != n_steps.saturating_sub(1) {
        flag("action-edge-count", format!("{n_action} action edges for {n_steps} timesteps"));
    }
    for (i, n) in g.nodes.iter().enumerate() {
        if n.kind == NodeType::Timestep && (from_patient[i] != 1 || to_patient[i] != 1) {
            flag(
                "patient-edges",
                format!("timestep node {i} has {} in / {} out patient edges", from_patient[i], to_patient[i]),
            );
        }
    }
    let expected_terminal = usize::from(g.kind == GraphKind::Trajectory);
    if terminal_edges != expected_terminal {
        flag("terminal-edge", format!("{terminal_edges} terminal edges"));
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Plain-text dump: `node <id> <type> <features...>` then
/// `edge <src> <dst> <type> <attrs...>`.
pub fn to_text(g: &HeteroGraph) -> String {
    let mut s = String::new();
    for (i, n) in g.nodes.iter().enumerate() {
        let _ = write!(s, "node {i} {}", n.kind.name());
        for v in &n.features {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    for e in &g.edges {
        let _ = write!(s, "edge {} {} {}", e.src, e.dst, e.kind.name());
        for v in &e.attr {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}
