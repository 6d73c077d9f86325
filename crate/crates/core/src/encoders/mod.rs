//! State encoders and the next-observation decoder.
//!
//! Three encoders map a patient's history to a latent vector of size
//! [`LATENT_DIM`]: an MLP over the current observation and previous action
//! (`Ae`), and two heterogeneous GNNs over prefix snapshots (`Sage`,
//! `Gatv2`). GNN encoders project each node type to width `f_out`, apply
//! `n_conv` relation-summed convolutions, mean-pool each node type per
//! graph, sum the pooled vectors and map them through a final linear layer.
//!
//! A GATv2 message is `Σ_u α_uv (W_s h_u + W_e e_uv)` with `α` the
//! attention softmax over the in-neighbours of `v`.

mod batch;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{
    edge_attr_dim, endpoints, relation_index, HeteroEdges, Relation, SnapshotBatch, RELATIONS,
};

use crate::cohort::{EncoderMode, FeatureSchema, N_ACTIONS};
use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, ParamId, ParamSet, Segments, Tape, Tensor, Var};
use crate::trajgraph::{EdgeType, GraphSnapshot, NodeType};

pub const LATENT_DIM: usize = 64;
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Ae,
    Sage,
    Gatv2,
}

impl EncoderKind {
    pub fn is_graph(self) -> bool {
        self != EncoderKind::Ae
    }

    /// Schema layout the encoder consumes.
    pub fn mode(self) -> EncoderMode {
        if self.is_graph() {
            EncoderMode::Gnn
        } else {
            EncoderMode::Ae
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Ae => "ae",
            EncoderKind::Sage => "sage",
            EncoderKind::Gatv2 => "gatv2",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(EncoderKind::Ae),
            "sage" => Ok(EncoderKind::Sage),
            "gatv2" => Ok(EncoderKind::Gatv2),
            other => Err(Error::Config(format!("unknown encoder {other:?}"))),
        }
    }
}

/// Shape of an encoder; together with a seed it fixes the initial weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub kind: EncoderKind,
    pub n_invariant: usize,
    pub n_variant: usize,
    pub f_out: usize,
    pub n_conv: usize,
    pub latent_dim: usize,
}

impl EncoderArch {
    /// Default widths for `kind`: SAGE (64, 2), GATv2 (64, 1).
    pub fn for_schema(kind: EncoderKind, schema: &FeatureSchema) -> Self {
        let n_conv = match kind {
            EncoderKind::Ae => 0,
            EncoderKind::Sage => 2,
            EncoderKind::Gatv2 => 1,
        };
        Self {
            kind,
            n_invariant: schema.n_invariant(),
            n_variant: schema.n_variant(),
            f_out: 64,
            n_conv,
            latent_dim: LATENT_DIM,
        }
    }

    pub fn with_conv(mut self, f_out: usize, n_conv: usize) -> Self {
        self.f_out = f_out;
        self.n_conv = n_conv;
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.n_invariant + self.n_variant
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n_variant == 0 {
            return Err(Error::config("encoder widths must be positive"));
        }
        if self.kind.is_graph() && (self.f_out == 0 || self.n_conv == 0 || self.n_invariant == 0) {
            return Err(Error::config("graph encoders need f_out, n_conv and patient features"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum RelIds {
    Sage {
        w_self: ParamId,
        bias: ParamId,
        w_neigh: ParamId,
    },
    Gat {
        w_self: ParamId,
        bias: ParamId,
        w_s: ParamId,
        w_t: ParamId,
        w_e: ParamId,
        att: ParamId,
    },
}

impl RelIds {
    fn self_weights(&self) -> (ParamId, ParamId) {
        match *self {
            RelIds::Sage { w_self, bias, .. } | RelIds::Gat { w_self, bias, .. } => (w_self, bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    Ae([Lin; 3]),
    Gnn {
        proj_patient: Lin,
        proj_timestep: Lin,
        layers: Vec<[RelIds; 3]>,
        head: Lin,
    },
}

fn add_linear(p: &mut ParamSet, name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Lin {
    Lin {
        w: p.add_weight(format!("{name}.w"), n_in, n_out, rng),
        b: p.add_zeros(format!("{name}.b"), &[n_out]),
    }
}

fn apply(tape: &mut Tape, vars: &[Var], l: Lin, x: Var) -> Result<Var> {
    tape.linear(x, vars[l.w.0], vars[l.b.0])
}

/// Learnable state encoder of any [`EncoderKind`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    arch: EncoderArch,
    params: ParamSet,
    layout: Layout,
}

/// Input rows for one encoder forward pass.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    /// One row per state: observation followed by the previous-action one-hot.
    Ae(&'a Tensor),
    Graph(&'a SnapshotBatch),
}

impl Encoder {
    /// Glorot-initialised weights and zero biases drawn from `seed`.
    pub fn new(arch: EncoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let layout = match arch.kind {
            EncoderKind::Ae => {
                let n_in = arch.obs_dim() + N_ACTIONS;
                Layout::Ae([
                    add_linear(&mut p, "ae.l1", n_in, 64, &mut rng),
                    add_linear(&mut p, "ae.l2", 64, 128, &mut rng),
                    add_linear(&mut p, "ae.l3", 128, arch.latent_dim, &mut rng),
                ])
            }
            kind => {
                let f = arch.f_out;
                let proj_patient = add_linear(&mut p, "proj.patient", arch.n_invariant, f, &mut rng);
                let proj_timestep = add_linear(&mut p, "proj.timestep", arch.n_variant, f, &mut rng);
                let mut layers = Vec::with_capacity(arch.n_conv);
                for l in 0..arch.n_conv {
                    let rel = |p: &mut ParamSet, r: EdgeType, rng: &mut ChaCha8Rng| {
                        let base = format!("conv{l}.{}", r.name());
                        let w_self = p.add_weight(format!("{base}.w_self"), f, f, rng);
                        let bias = p.add_zeros(format!("{base}.bias"), &[f]);
                        if kind == EncoderKind::Sage {
                            RelIds::Sage {
                                w_self,
                                bias,
                                w_neigh: p.add_weight(format!("{base}.w_neigh"), f, f, rng),
                            }
                        } else {
                            let w_s = p.add_weight(format!("{base}.w_s"), f, f, rng);
                            let w_t = p.add_weight(format!("{base}.w_t"), f, f, rng);
                            let e = edge_attr_dim(r);
                            let w_e = p.add_weight(format!("{base}.w_e"), e, f, rng);
                            let att = p.add(format!("{base}.att"), glorot_uniform(f, 1, &[f], rng));
                            RelIds::Gat {
                                w_self,
                                bias,
                                w_s,
                                w_t,
                                w_e,
                                att,
                            }
                        }
                    };
                    layers.push([
                        rel(&mut p, RELATIONS[0], &mut rng),
                        rel(&mut p, RELATIONS[1], &mut rng),
                        rel(&mut p, RELATIONS[2], &mut rng),
                    ]);
                }
                let head = add_linear(&mut p, "head", f, arch.latent_dim, &mut rng);
                Layout::Gnn {
                    proj_patient,
                    proj_timestep,
                    layers,
                    head,
                }
            }
        };
        Ok(Self {
            arch,
            params: p,
            layout,
        })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn kind(&self) -> EncoderKind {
        self.arch.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Overwrites the named tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        set_named(&mut self.params, name, value)
    }

    /// Latent rows `[n_states × latent_dim]` on `tape`; `vars` are the bound
    /// parameters of this encoder.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: EncoderInput<'_>) -> Result<Var> {
        match (&self.layout, input) {
            (Layout::Ae(l), EncoderInput::Ae(x)) => {
                if x.shape().len() != 2 || x.cols() != self.arch.obs_dim() + N_ACTIONS {
                    return Err(Error::dim(format!(
                        "AE input {:?}, expected rows of {}",
                        x.shape(),
                        self.arch.obs_dim() + N_ACTIONS
                    )));
                }
                let x = tape.leaf(x.clone());
                let h = apply(tape, vars, l[0], x)?;
                let h = tape.relu(h);
                let h = apply(tape, vars, l[1], h)?;
                let h = tape.relu(h);
                apply(tape, vars, l[2], h)
            }
            (
                Layout::Gnn {
                    proj_patient,
                    proj_timestep,
                    layers,
                    head,
                },
                EncoderInput::Graph(b),
            ) => {
                self.check_batch(b)?;
                let xp = tape.leaf(b.patient.clone());
                let xt = tape.leaf(b.timestep.clone());
                let mut hp = apply(tape, vars, *proj_patient, xp)?;
                let mut ht = apply(tape, vars, *proj_timestep, xt)?;
                for ids in layers {
                    (hp, ht) = self.conv(tape, vars, ids, hp, ht, &b.edges)?;
                }
                let pooled_t = tape.segment_mean(ht, b.timestep_graph.clone(), b.n_graphs)?;
                let pooled = tape.add(hp, pooled_t)?;
                apply(tape, vars, *head, pooled)
            }
            _ => Err(Error::config(format!(
                "input kind does not match the {} encoder",
                self.arch.kind
            ))),
        }
    }

    fn check_batch(&self, b: &SnapshotBatch) -> Result<()> {
        if b.patient.cols() != self.arch.n_invariant || b.timestep.cols() != self.arch.n_variant {
            return Err(Error::dim(format!(
                "snapshot widths ({}, {}) vs encoder ({}, {})",
                b.patient.cols(),
                b.timestep.cols(),
                self.arch.n_invariant,
                self.arch.n_variant
            )));
        }
        Ok(())
    }

    /// Latents without recording gradients.
    pub fn encode(&self, input: EncoderInput<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let z = self.forward(&mut tape, &vars, input)?;
        Ok(tape.value(z).clone())
    }

    // One heterogeneous convolution. Each destination type sums, over the
    // relations that target it, a self transform plus the relation message.
    fn conv(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &[RelIds; 3],
        hp: Var,
        ht: Var,
        edges: &HeteroEdges,
    ) -> Result<(Var, Var)> {
        let n_p = tape.value(hp).rows();
        let n_t = tape.value(ht).rows();
        let rows = |t: NodeType| if t == NodeType::Patient { n_p } else { n_t };
        let feat = |t: NodeType| if t == NodeType::Patient { hp } else { ht };

        let mut out = [None, None]; // patient, timestep
        for dst_type in [NodeType::Patient, NodeType::Timestep] {
            let rel_ids: Vec<usize> = (0..3).filter(|&k| endpoints(RELATIONS[k]).1 == dst_type).collect();
            let h_dst = feat(dst_type);
            // merged self transform of every relation targeting this type
            let (mut w, mut b) = ids[rel_ids[0]].self_weights();
            let (mut wv, mut bv) = (vars[w.0], vars[b.0]);
            for &k in &rel_ids[1..] {
                (w, b) = ids[k].self_weights();
                wv = tape.add(wv, vars[w.0])?;
                bv = tape.add(bv, vars[b.0])?;
            }
            let mut acc = tape.linear(h_dst, wv, bv)?;
            for &k in &rel_ids {
                let src_type = endpoints(RELATIONS[k]).0;
                let msg = self.message(
                    tape,
                    vars,
                    &ids[k],
                    &edges.relations[k],
                    feat(src_type),
                    h_dst,
                    rows(src_type),
                    rows(dst_type),
                )?;
                if let Some(m) = msg {
                    acc = tape.add(acc, m)?;
                }
            }
            out[usize::from(dst_type == NodeType::Timestep)] = Some(tape.relu(acc));
        }
        Ok((out[0].expect("patient"), out[1].expect("timestep")))
    }

    #[allow(clippy::too_many_arguments)]
    fn message(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &RelIds,
        rel: &Relation,
        h_src: Var,
        h_dst: Var,
        n_src: usize,
        n_dst: usize,
    ) -> Result<Option<Var>> {
        if rel.is_empty() {
            return Ok(None);
        }
        let m = match *ids {
            RelIds::Sage { w_neigh, .. } => {
                let w = vars[w_neigh.0];
                // transform on whichever side has fewer rows
                if n_src <= n_dst {
                    let xs = tape.matmul(h_src, w)?;
                    let g = tape.gather_rows(xs, rel.src.clone())?;
                    tape.segment_mean(g, rel.dst.clone(), n_dst)?
                } else {
                    let g = tape.gather_rows(h_src, rel.src.clone())?;
                    let mean = tape.segment_mean(g, rel.dst.clone(), n_dst)?;
                    tape.matmul(mean, w)?
                }
            }
            RelIds::Gat {
                w_s, w_t, w_e, att, ..
            } => {
                let xs = tape.matmul(h_src, vars[w_s.0])?;
                let xt = tape.matmul(h_dst, vars[w_t.0])?;
                let gs = tape.gather_rows(xs, rel.src.clone())?;
                let gt = tape.gather_rows(xt, rel.dst.clone())?;
                let attr = tape.leaf(rel.attr.clone());
                let xe = tape.matmul(attr, vars[w_e.0])?;
                let alpha = gat_alpha(tape, gs, gt, xe, vars[att.0], rel.dst.clone(), n_dst)?;
                // the edge projection also enters the value, so attributes
                // matter even where a node has a single in-neighbour
                let value = tape.add(gs, xe)?;
                tape.segment_weighted_sum(value, alpha, rel.dst.clone(), n_dst)?
            }
        };
        Ok(Some(m))
    }

    fn layer_ids(&self, layer: usize) -> Result<&[RelIds; 3]> {
        match &self.layout {
            Layout::Gnn { layers, .. } => layers
                .get(layer)
                .ok_or_else(|| Error::config(format!("layer {layer} of {}", layers.len()))),
            Layout::Ae(_) => Err(Error::config("the AE encoder has no convolution layers")),
        }
    }
}

// Per-edge attention: softmax over each destination's incoming edges of
// `a · leaky(W_s h_u + W_t h_v + W_e e_uv)`.
fn gat_alpha(tape: &mut Tape, gs: Var, gt: Var, xe: Var, att: Var, dst: Segments, n_dst: usize) -> Result<Var> {
    let z = tape.add(gs, gt)?;
    let z = tape.add(z, xe)?;
    let z = tape.leaky_relu(z, ATTENTION_SLOPE);
    let scores = tape.row_dot(z, att)?;
    tape.segment_softmax(scores, dst, n_dst)
}

fn set_named(params: &mut ParamSet, name: &str, value: Tensor) -> Result<()> {
    let id = params
        .find(name)
        .ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
    let p = params.get_mut(id);
    if p.value.shape() != value.shape() {
        return Err(Error::dim(format!(
            "{name}: {:?} vs {:?}",
            value.shape(),
            p.value.shape()
        )));
    }
    p.value = value;
    Ok(())
}

/// Row layout of the AE input: observation then previous-action one-hot.
pub fn ae_input(obs: &[f64], prev_action_onehot: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + prev_action_onehot.len());
    x.extend_from_slice(obs);
    x.extend_from_slice(prev_action_onehot);
    x
}

/// Latent of one observation (time-variant then time-invariant values) and
/// the one-hot previous action (all zeros at the first step).
pub fn ae_encode(obs: &[f64], prev_action_onehot: &[f64], encoder: &Encoder) -> Result<Vec<f64>> {
    let arch = encoder.arch();
    if arch.kind != EncoderKind::Ae {
        return Err(Error::config("ae_encode needs an AE encoder"));
    }
    if obs.len() != arch.obs_dim() || prev_action_onehot.len() != N_ACTIONS {
        return Err(Error::dim(format!(
            "AE input lengths ({}, {}), expected ({}, {N_ACTIONS})",
            obs.len(),
            prev_action_onehot.len(),
            arch.obs_dim()
        )));
    }
    let x = Tensor::matrix(1, obs.len() + N_ACTIONS, ae_input(obs, prev_action_onehot))?;
    Ok(encoder.encode(EncoderInput::Ae(&x))?.into_data())
}

/// Latent of a single snapshot.
pub fn gnn_encode(snapshot: &GraphSnapshot, encoder: &Encoder) -> Result<Vec<f64>> {
    if !encoder.kind().is_graph() {
        return Err(Error::config("gnn_encode needs a graph encoder"));
    }
    let b = SnapshotBatch::from_snapshots(std::slice::from_ref(snapshot))?;
    Ok(encoder.encode(EncoderInput::Graph(&b))?.into_data())
}

/// One convolution layer of `encoder` applied to explicit node features.
/// Returns the new `(patient, timestep)` features.
pub fn hetero_conv_layer(
    patient: &Tensor,
    timestep: &Tensor,
    edges: &HeteroEdges,
    encoder: &Encoder,
    layer: usize,
) -> Result<(Tensor, Tensor)> {
    let ids = encoder.layer_ids(layer)?;
    let f = encoder.arch().f_out;
    if patient.cols() != f || timestep.cols() != f {
        return Err(Error::dim(format!("conv layer input width must be {f}")));
    }
    let mut tape = Tape::new();
    let vars = tape.bind(encoder.params());
    let hp = tape.leaf(patient.clone());
    let ht = tape.leaf(timestep.clone());
    let (p, t) = encoder.conv(&mut tape, &vars, ids, hp, ht, edges)?;
    Ok((tape.value(p).clone(), tape.value(t).clone()))
}

/// GATv2 attention weights of one target node over its neighbours for
/// `relation` in conv layer `layer`.
pub fn attention_coefficients(
    target: &[f64],
    neighbors: &[Vec<f64>],
    edge_attrs: &[Vec<f64>],
    encoder: &Encoder,
    layer: usize,
    relation: EdgeType,
) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::Graph("attention over an empty neighbourhood".into()));
    }
    if neighbors.len() != edge_attrs.len() {
        return Err(Error::dim("one edge attribute per neighbour"));
    }
    let k = relation_index(relation).ok_or_else(|| Error::Graph("not a message relation".into()))?;
    let RelIds::Gat { w_s, w_t, w_e, att, .. } = encoder.layer_ids(layer)?[k] else {
        return Err(Error::config("attention needs a GATv2 encoder"));
    };
    let n = neighbors.len();
    let mut tape = Tape::new();
    let vars = tape.bind(encoder.params());
    let hs = tape.leaf(Tensor::from_rows(neighbors)?);
    let ht = tape.leaf(Tensor::from_rows(&[target.to_vec()])?);
    let attr = tape.leaf(Tensor::from_rows(edge_attrs)?);
    let xs = tape.matmul(hs, vars[w_s.0])?;
    let xt = tape.matmul(ht, vars[w_t.0])?;
    let gt = tape.gather_rows(xt, vec![0; n].into())?;
    let xe = tape.matmul(attr, vars[w_e.0])?;
    let alpha = gat_alpha(&mut tape, xs, gt, xe, vars[att.0], vec![0; n].into(), 1)?;
    Ok(tape.value(alpha).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderArch {
    pub latent_dim: usize,
    pub obs_dim: usize,
}

/// MLP predicting the next time-variant features from a latent and the
/// action taken: `(l+25, 64) → (64, 128) → (128, obs_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    arch: DecoderArch,
    params: ParamSet,
    layers: [Lin; 3],
}

impl Decoder {
    pub fn new(arch: DecoderArch, seed: u64) -> Result<Self> {
        if arch.latent_dim == 0 || arch.obs_dim == 0 {
            return Err(Error::config("decoder widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut p = ParamSet::new();
        let layers = [
            add_linear(&mut p, "dec.l1", arch.latent_dim + N_ACTIONS, 64, &mut rng),
            add_linear(&mut p, "dec.l2", 64, 128, &mut rng),
            add_linear(&mut p, "dec.l3", 128, arch.obs_dim, &mut rng),
        ];
        Ok(Self {
            arch,
            params: p,
            layers,
        })
    }

    pub fn arch(&self) -> &DecoderArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        set_named(&mut self.params, name, value)
    }

    /// Predicted next features `[n × obs_dim]` for latent rows and one-hot
    /// action rows.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], latent: Var, actions: &Tensor) -> Result<Var> {
        if actions.cols() != N_ACTIONS {
            return Err(Error::dim("decoder actions must be one-hot rows of 25"));
        }
        let a = tape.leaf(actions.clone());
        let x = tape.concat_cols(latent, a)?;
        let h = apply(tape, vars, self.layers[0], x)?;
        let h = tape.relu(h);
        let h = apply(tape, vars, self.layers[1], h)?;
        let h = tape.relu(h);
        apply(tape, vars, self.layers[2], h)
    }
}

/// Predicted `ĉ_{t+1}` for one latent and the one-hot action taken at `t`.
pub fn decode_next(latent: &[f64], next_action_onehot: &[f64], decoder: &Decoder) -> Result<Vec<f64>> {
    if latent.len() != decoder.arch.latent_dim || next_action_onehot.len() != N_ACTIONS {
        return Err(Error::dim(format!(
            "decoder input lengths ({}, {}), expected ({}, {N_ACTIONS})",
            latent.len(),
            next_action_onehot.len(),
            decoder.arch.latent_dim
        )));
    }
    let mut tape = Tape::new();
    let vars = tape.bind(&decoder.params);
    let z = tape.leaf(Tensor::matrix(1, latent.len(), latent.to_vec())?);
    let a = Tensor::matrix(1, N_ACTIONS, next_action_onehot.to_vec())?;
    let y = decoder.forward(&mut tape, &vars, z, &a)?;
    Ok(tape.value(y).data().to_vec())
}

#[cfg(test)]
mod tests;
