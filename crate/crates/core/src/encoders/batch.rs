use std::sync::Arc;

use crate::cohort::N_ACTIONS;
use crate::error::{Error, Result};
use crate::numerics::{Segments, Tensor};
use crate::trajgraph::{validate_graph, EdgeType, GraphKind, GraphSnapshot, NodeType};

/// Message relations in the order used by parameter layouts.
pub const RELATIONS: [EdgeType; 3] = EdgeType::MESSAGE_TYPES;

pub fn relation_index(kind: EdgeType) -> Option<usize> {
    RELATIONS.iter().position(|r| *r == kind)
}

/// Width of the edge attribute carried by each relation.
pub fn edge_attr_dim(kind: EdgeType) -> usize {
    match kind {
        EdgeType::Action => N_ACTIONS,
        EdgeType::PatientToTimestep | EdgeType::TimestepToPatient => 1,
        EdgeType::ToTerminal => 0,
    }
}

/// Source and destination node types of a message relation.
pub fn endpoints(kind: EdgeType) -> (NodeType, NodeType) {
    match kind {
        EdgeType::Action => (NodeType::Timestep, NodeType::Timestep),
        EdgeType::PatientToTimestep => (NodeType::Patient, NodeType::Timestep),
        EdgeType::TimestepToPatient => (NodeType::Timestep, NodeType::Patient),
        EdgeType::ToTerminal => (NodeType::Timestep, NodeType::Terminal),
    }
}

/// Edges of one relation as row indices into the source and destination
/// feature matrices, sorted by `(dst, src)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub src: Segments,
    pub dst: Segments,
    pub attr: Tensor,
}

impl Relation {
    pub fn empty(kind: EdgeType) -> Self {
        Self {
            src: Arc::from(Vec::new()),
            dst: Arc::from(Vec::new()),
            attr: Tensor::zeros(&[0, edge_attr_dim(kind)]),
        }
    }

    pub fn new(kind: EdgeType, mut edges: Vec<(usize, usize, Vec<f64>)>) -> Result<Self> {
        let width = edge_attr_dim(kind);
        edges.sort_by_key(|e| (e.1, e.0));
        let mut attr = Vec::with_capacity(edges.len() * width);
        for (_, _, a) in &edges {
            if a.len() != width {
                return Err(Error::Graph(format!(
                    "{} edge attribute of width {}, expected {width}",
                    kind.name(),
                    a.len()
                )));
            }
            attr.extend_from_slice(a);
        }
        Ok(Self {
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            attr: Tensor::matrix(edges.len(), width, attr)?,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Typed edge sets of a heterogeneous graph, indexed like [`RELATIONS`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroEdges {
    pub relations: [Relation; 3],
}

impl HeteroEdges {
    pub fn empty() -> Self {
        Self {
            relations: RELATIONS.map(Relation::empty),
        }
    }

    pub fn get(&self, kind: EdgeType) -> &Relation {
        &self.relations[relation_index(kind).expect("message relation")]
    }
}

/// Disjoint union of snapshots in canonical layout.
///
/// Graph `i` owns patient row `i`. Its timestep rows are contiguous and
/// ordered by time, and every relation's edges are sorted, so the layout
/// does not depend on how the source graphs stored their nodes or edges.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotBatch {
    pub n_graphs: usize,
    pub patient: Tensor,
    pub timestep: Tensor,
    /// Owning graph of each timestep row.
    pub timestep_graph: Segments,
    pub edges: HeteroEdges,
}

impl SnapshotBatch {
    pub fn from_snapshots(snapshots: &[GraphSnapshot]) -> Result<Self> {
        if snapshots.is_empty() {
            return Err(Error::Graph("no snapshots to batch".into()));
        }
        let mut patient_rows = Vec::with_capacity(snapshots.len());
        let mut ts_rows: Vec<Vec<f64>> = Vec::new();
        let mut ts_graph = Vec::new();
        let mut rel_edges: [Vec<(usize, usize, Vec<f64>)>; 3] = Default::default();

        for (gi, g) in snapshots.iter().enumerate() {
            if !matches!(g.kind, GraphKind::Snapshot(_)) {
                return Err(Error::Graph(format!("graph {gi} is not a snapshot")));
            }
            if let Err(v) = validate_graph(g) {
                let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
                return Err(Error::Graph(format!("invalid snapshot {gi}: {}", msgs.join("; "))));
            }
            let offset = ts_rows.len();
            let n_steps = g.n_timesteps();
            // canonical row of every stored node
            let mut row = vec![0usize; g.nodes.len()];
            let mut ordered: Vec<Option<&Vec<f64>>> = vec![None; n_steps];
            for (i, n) in g.nodes.iter().enumerate() {
                match n.kind {
                    NodeType::Patient => {
                        row[i] = gi;
                        patient_rows.push(n.features.clone());
                    }
                    NodeType::Timestep => {
                        let s = n.step.expect("validated");
                        row[i] = offset + s;
                        ordered[s] = Some(&n.features);
                    }
                    NodeType::Terminal => unreachable!("validated snapshot"),
                }
            }
            for f in ordered {
                ts_rows.push(f.expect("validated").clone());
                ts_graph.push(gi);
            }
            for e in &g.edges {
                let r = relation_index(e.kind).expect("snapshots carry message edges only");
                rel_edges[r].push((row[e.src], row[e.dst], e.attr.clone()));
            }
        }

        let patient = Tensor::from_rows(&patient_rows)
            .map_err(|_| Error::Graph("patient feature widths differ".into()))?;
        let timestep = Tensor::from_rows(&ts_rows)
            .map_err(|_| Error::Graph("timestep feature widths differ".into()))?;
        let [a, b, c] = rel_edges;
        Ok(Self {
            n_graphs: snapshots.len(),
            patient,
            timestep,
            timestep_graph: Arc::from(ts_graph),
            edges: HeteroEdges {
                relations: [
                    Relation::new(RELATIONS[0], a)?,
                    Relation::new(RELATIONS[1], b)?,
                    Relation::new(RELATIONS[2], c)?,
                ],
            },
        })
    }

    pub fn n_timesteps(&self) -> usize {
        self.timestep_graph.len()
    }

    /// Concatenates batches graph-wise, preserving their order.
    pub fn concat(parts: &[&SnapshotBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Graph("no batches to concatenate".into()))?;
        let (np, nt) = (first.patient.cols(), first.timestep.cols());
        let mut patient = Vec::new();
        let mut timestep = Vec::new();
        let mut ts_graph = Vec::new();
        let mut rels: [(Vec<usize>, Vec<usize>, Vec<f64>); 3] = Default::default();
        let (mut g_off, mut t_off) = (0, 0);
        for p in parts {
            if p.patient.cols() != np || p.timestep.cols() != nt {
                return Err(Error::dim("snapshot batches with different feature widths"));
            }
            patient.extend_from_slice(p.patient.data());
            timestep.extend_from_slice(p.timestep.data());
            ts_graph.extend(p.timestep_graph.iter().map(|g| g + g_off));
            for (k, rel) in p.edges.relations.iter().enumerate() {
                let (src_t, dst_t) = endpoints(RELATIONS[k]);
                let off = |t: NodeType| if t == NodeType::Patient { g_off } else { t_off };
                let (so, doff) = (off(src_t), off(dst_t));
                rels[k].0.extend(rel.src.iter().map(|s| s + so));
                rels[k].1.extend(rel.dst.iter().map(|d| d + doff));
                rels[k].2.extend_from_slice(rel.attr.data());
            }
            g_off += p.n_graphs;
            t_off += p.n_timesteps();
        }
        let relations = {
            let mut it = rels.into_iter().enumerate().map(|(k, (s, d, a))| {
                let width = edge_attr_dim(RELATIONS[k]);
                let n = s.len();
                Ok(Relation {
                    src: Arc::from(s),
                    dst: Arc::from(d),
                    attr: Tensor::matrix(n, width, a)?,
                })
            });
            let a: Result<Relation> = it.next().expect("three relations");
            let b: Result<Relation> = it.next().expect("three relations");
            let c: Result<Relation> = it.next().expect("three relations");
            [a?, b?, c?]
        };
        Ok(Self {
            n_graphs: g_off,
            patient: Tensor::matrix(g_off, np, patient)?,
            timestep: Tensor::matrix(t_off, nt, timestep)?,
            timestep_graph: Arc::from(ts_graph),
            edges: HeteroEdges { relations },
        })
    }
}
