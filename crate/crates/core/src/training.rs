//! Representation learning: encoder + decoder trained to predict the next
//! time-variant observation, hyperparameter sweeps, and dataset encoding.
//!
//! Loss units follow the appendix convention: a trajectory's loss is the
//! sum of its per-step losses, a batch loss is the sum over its
//! trajectories, and the reported average trajectory loss is the mean over
//! batches of `batch_loss / |batch|`.

use serde::{Deserialize, Serialize};

use crate::cohort::{make_batches, FeatureSchema, Trajectory, N_ACTIONS};
use crate::encoders::{
    ae_input, Decoder, DecoderArch, Encoder, EncoderArch, EncoderInput, EncoderKind, SnapshotBatch,
};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::par;
use crate::trajgraph::{build_trajectory_graph, one_hot_action, snapshot};

/// Trajectories per gradient work item. Fixed so that the reduction order,
/// and therefore every result bit, is independent of the thread count.
const CHUNK: usize = 16;

/// Window of the trailing running average used for model selection.
pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprTrainConfig {
    pub encoder: EncoderKind,
    pub f_out: usize,
    pub n_conv: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_period: usize,
    pub action_injection: bool,
    pub seed: u64,
}

impl Default for ReprTrainConfig {
    fn default() -> Self {
        Self::for_encoder(EncoderKind::Sage)
    }
}

impl ReprTrainConfig {
    /// Full-scale settings: AE 600 epochs at 5e-4, GNNs 200 epochs at 1e-3.
    pub fn for_encoder(encoder: EncoderKind) -> Self {
        let (epochs, lr, n_conv) = match encoder {
            EncoderKind::Ae => (600, 5e-4, 0),
            EncoderKind::Sage => (200, 1e-3, 2),
            EncoderKind::Gatv2 => (200, 1e-3, 1),
        };
        Self {
            encoder,
            f_out: 64,
            n_conv,
            epochs,
            lr,
            batch_size: 128,
            val_period: 10,
            action_injection: true,
            seed: 1234,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.val_period == 0 {
            return Err(Error::config("epochs, batch_size and val_period must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn arch(&self, schema: &FeatureSchema) -> EncoderArch {
        EncoderArch::for_schema(self.encoder, schema).with_conv(self.f_out, self.n_conv)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub train_epochs: Vec<usize>,
    /// Average trajectory loss per epoch.
    pub train_loss: Vec<f64>,
    /// Sum of batch losses per epoch.
    pub train_total: Vec<f64>,
    pub batches_per_epoch: usize,
    /// Completed epochs at each validation point.
    pub val_epochs: Vec<usize>,
    pub val_loss: Vec<f64>,
}

#[derive(Serialize)]
struct LossRecord<'a> {
    phase: &'a str,
    epoch: usize,
    loss: f64,
}

impl LossCurve {
    /// Trailing running average of the validation loss.
    pub fn smoothed_val(&self, window: usize) -> Vec<f64> {
        running_average(&self.val_loss, window)
    }

    pub fn final_smoothed_val(&self) -> Option<f64> {
        self.smoothed_val(SMOOTHING_WINDOW).last().copied()
    }

    /// `{phase, epoch, loss}` lines, training records first.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let rows = self
            .train_epochs
            .iter()
            .zip(&self.train_loss)
            .map(|(e, l)| ("train", *e, *l))
            .chain(self.val_epochs.iter().zip(&self.val_loss).map(|(e, l)| ("val", *e, *l)));
        for (phase, epoch, loss) in rows {
            let rec = LossRecord { phase, epoch, loss };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

pub fn running_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Encoder/decoder inputs for one trajectory, precomputed once.
#[derive(Clone, Debug)]
enum StateRows {
    Ae(Tensor),
    Graph(SnapshotBatch),
}

#[derive(Clone, Debug)]
struct TrajRows {
    states: StateRows,
    actions: Tensor,
    targets: Tensor,
}

fn state_rows(traj: &Trajectory, schema: &FeatureSchema, kind: EncoderKind, n: usize) -> Result<StateRows> {
    if kind.is_graph() {
        let g = build_trajectory_graph(traj, schema)?;
        let snaps = (1..=n).map(|t| snapshot(&g, t)).collect::<Result<Vec<_>>>()?;
        Ok(StateRows::Graph(SnapshotBatch::from_snapshots(&snaps)?))
    } else {
        traj.validate(schema)?;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                let prev = if t == 0 {
                    vec![0.0; N_ACTIONS]
                } else {
                    one_hot_action(traj.actions[t - 1])?
                };
                Ok(ae_input(&traj.observation(t), &prev))
            })
            .collect::<Result<_>>()?;
        Ok(StateRows::Ae(Tensor::from_rows(&rows)?))
    }
}

// Steps 0..T−1 predict the time-variant features of the following step;
// the final step has no target.
fn training_rows(traj: &Trajectory, schema: &FeatureSchema, kind: EncoderKind, inject: bool) -> Result<TrajRows> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "trajectory {} has {n} step(s); training needs at least 2",
            traj.id
        )));
    }
    let actions: Vec<Vec<f64>> = (0..n - 1)
        .map(|t| {
            if inject {
                one_hot_action(traj.actions[t])
            } else {
                Ok(vec![0.0; N_ACTIONS])
            }
        })
        .collect::<Result<_>>()?;
    Ok(TrajRows {
        states: state_rows(traj, schema, kind, n - 1)?,
        actions: Tensor::from_rows(&actions)?,
        targets: Tensor::from_rows(&traj.steps[1..])?,
    })
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    let mut rows = 0;
    for p in parts {
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Tensor::matrix(rows, cols, data)
}

struct ChunkResult {
    loss: f64,
    enc_grads: Vec<Tensor>,
    dec_grads: Vec<Tensor>,
}

fn chunk_loss(enc: &Encoder, dec: &Decoder, rows: &[&TrajRows], with_grads: bool) -> Result<ChunkResult> {
    let actions = stack(&rows.iter().map(|r| &r.actions).collect::<Vec<_>>())?;
    let targets = stack(&rows.iter().map(|r| &r.targets).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let ev = tape.bind(enc.params());
    let dv = tape.bind(dec.params());
    let z = match &rows[0].states {
        StateRows::Ae(_) => {
            let parts: Vec<&Tensor> = rows
                .iter()
                .map(|r| match &r.states {
                    StateRows::Ae(t) => t,
                    StateRows::Graph(_) => unreachable!("one encoder kind per dataset"),
                })
                .collect();
            let x = stack(&parts)?;
            enc.forward(&mut tape, &ev, EncoderInput::Ae(&x))?
        }
        StateRows::Graph(_) => {
            let parts: Vec<&SnapshotBatch> = rows
                .iter()
                .map(|r| match &r.states {
                    StateRows::Graph(b) => b,
                    StateRows::Ae(_) => unreachable!("one encoder kind per dataset"),
                })
                .collect();
            let b = SnapshotBatch::concat(&parts)?;
            enc.forward(&mut tape, &ev, EncoderInput::Graph(&b))?
        }
    };
    let y = dec.forward(&mut tape, &dv, z, &actions)?;
    let l = tape.gaussian_nll(y, &targets)?;
    let loss = tape.value(l).item();
    if !with_grads {
        return Ok(ChunkResult {
            loss,
            enc_grads: Vec::new(),
            dec_grads: Vec::new(),
        });
    }
    let g = tape.backward(l)?;
    Ok(ChunkResult {
        loss,
        enc_grads: g.for_params(&ev, enc.params()),
        dec_grads: g.for_params(&dv, dec.params()),
    })
}

// Summed loss of a batch and, optionally, its gradients accumulated into
// the parameter sets. Chunks are reduced in order.
fn batch_step(enc: &mut Encoder, dec: &mut Decoder, rows: &[&TrajRows], with_grads: bool) -> Result<f64> {
    let chunks: Vec<&[&TrajRows]> = rows.chunks(CHUNK).collect();
    let results = {
        let (e, d) = (&*enc, &*dec);
        par::map(&chunks, |c| chunk_loss(e, d, c, with_grads))
    };
    let mut total = 0.0;
    for r in results {
        let r = r?;
        total += r.loss;
        if with_grads {
            enc.params_mut().accumulate(&r.enc_grads)?;
            dec.params_mut().accumulate(&r.dec_grads)?;
        }
    }
    Ok(total)
}

fn average_trajectory_loss(enc: &mut Encoder, dec: &mut Decoder, rows: &[TrajRows], batch_size: usize) -> Result<f64> {
    let mut acc = 0.0;
    let mut n_batches = 0;
    for batch in rows.chunks(batch_size) {
        let refs: Vec<&TrajRows> = batch.iter().collect();
        acc += batch_step(enc, dec, &refs, false)? / batch.len() as f64;
        n_batches += 1;
    }
    Ok(acc / n_batches as f64)
}

#[derive(Clone, Debug)]
pub struct TrainedAutoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub best_encoder: Encoder,
    pub best_decoder: Decoder,
    /// Completed epochs at the best validation point.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub curve: LossCurve,
}

fn prepare(trajs: &[Trajectory], schema: &FeatureSchema, cfg: &ReprTrainConfig) -> Result<Vec<TrajRows>> {
    par::map(trajs, |t| training_rows(t, schema, cfg.encoder, cfg.action_injection))
        .into_iter()
        .collect()
}

/// Trains encoder and decoder jointly with Adam on the summed batch loss.
///
/// `train` and `val` must already be expressed in the schema for the
/// configured encoder (see [`EncoderKind::mode`]) and standardised.
/// Validation runs before training and after every `val_period` epochs,
/// and always after the last epoch.
pub fn train_autoencoder(
    train: &[Trajectory],
    val: &[Trajectory],
    schema: &FeatureSchema,
    cfg: &ReprTrainConfig,
) -> Result<TrainedAutoencoder> {
    cfg.validate()?;
    if schema.mode() != cfg.encoder.mode() {
        return Err(Error::config(format!(
            "the {} encoder needs a {:?}-mode schema",
            cfg.encoder,
            cfg.encoder.mode()
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training and validation splits must be non-empty"));
    }
    let encoder = Encoder::new(cfg.arch(schema), cfg.seed)?;
    let decoder = Decoder::new(
        DecoderArch {
            latent_dim: encoder.arch().latent_dim,
            obs_dim: schema.n_variant(),
        },
        cfg.seed,
    )?;
    train_from(encoder, decoder, train, val, schema, cfg)
}

fn train_from(
    mut encoder: Encoder,
    mut decoder: Decoder,
    train: &[Trajectory],
    val: &[Trajectory],
    schema: &FeatureSchema,
    cfg: &ReprTrainConfig,
) -> Result<TrainedAutoencoder> {
    let train_rows = prepare(train, schema, cfg)?;
    let val_rows = prepare(val, schema, cfg)?;
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut enc_opt = Adam::new(encoder.params(), adam_cfg);
    let mut dec_opt = Adam::new(decoder.params(), adam_cfg);

    let mut curve = LossCurve::default();
    let check = |loss: f64, what: String| -> Result<f64> {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::Numeric(format!("non-finite loss {loss} at {what}")))
        }
    };
    let v0 = check(
        average_trajectory_loss(&mut encoder, &mut decoder, &val_rows, cfg.batch_size)?,
        "validation before training".into(),
    )?;
    curve.val_epochs.push(0);
    curve.val_loss.push(v0);
    let (mut best_encoder, mut best_decoder, mut best_epoch, mut best_val) =
        (encoder.clone(), decoder.clone(), 0, v0);

    for epoch in 0..cfg.epochs {
        let batches = make_batches(train_rows.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        curve.batches_per_epoch = batches.len();
        let (mut avg, mut total) = (0.0, 0.0);
        for (bi, batch) in batches.iter().enumerate() {
            let refs: Vec<&TrajRows> = batch.indices.iter().map(|&i| &train_rows[i]).collect();
            let loss = batch_step(&mut encoder, &mut decoder, &refs, true)?;
            check(loss, format!("epoch {epoch}, batch {bi}"))?;
            enc_opt.step(encoder.params_mut())?;
            dec_opt.step(decoder.params_mut())?;
            total += loss;
            avg += loss / batch.len() as f64;
        }
        curve.train_epochs.push(epoch);
        curve.train_loss.push(avg / batches.len() as f64);
        curve.train_total.push(total);

        let done = epoch + 1;
        if done % cfg.val_period == 0 || done == cfg.epochs {
            let v = check(
                average_trajectory_loss(&mut encoder, &mut decoder, &val_rows, cfg.batch_size)?,
                format!("validation after epoch {epoch}"),
            )?;
            curve.val_epochs.push(done);
            curve.val_loss.push(v);
            if v < best_val {
                best_val = v;
                best_epoch = done;
                best_encoder = encoder.clone();
                best_decoder = decoder.clone();
            }
        }
    }
    Ok(TrainedAutoencoder {
        encoder,
        decoder,
        best_encoder,
        best_decoder,
        best_epoch,
        best_val_loss: best_val,
        curve,
    })
}

/// One `(f_out, n_conv)` grid point of a sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub f_out: usize,
    pub n_conv: usize,
    pub final_smoothed_val: f64,
    pub model: TrainedAutoencoder,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    /// Index into `runs` of the selected configuration.
    pub best: usize,
}

impl SweepResult {
    pub fn best_run(&self) -> &SweepRun {
        &self.runs[self.best]
    }

    /// `f_out,n_conv,final_smoothed_val,best_val_loss,selected` rows.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("f_out,n_conv,final_smoothed_val,best_val_loss,selected\n");
        for (i, r) in self.runs.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.f_out,
                r.n_conv,
                r.final_smoothed_val,
                r.model.best_val_loss,
                u8::from(i == self.best)
            ));
        }
        s
    }
}

/// Trains one model per grid point and selects the lowest final smoothed
/// validation loss; ties go to the smaller `f_out`, then the smaller `n_conv`.
pub fn run_sweep(
    grid: &[(usize, usize)],
    base: &ReprTrainConfig,
    train: &[Trajectory],
    val: &[Trajectory],
    schema: &FeatureSchema,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::config("empty sweep grid"));
    }
    let mut runs = Vec::with_capacity(grid.len());
    for &(f_out, n_conv) in grid {
        let cfg = ReprTrainConfig {
            f_out,
            n_conv,
            ..base.clone()
        };
        let model = train_autoencoder(train, val, schema, &cfg)?;
        let final_smoothed_val = model.curve.final_smoothed_val().expect("at least one validation point");
        runs.push(SweepRun {
            f_out,
            n_conv,
            final_smoothed_val,
            model,
        });
    }
    let best = select_best(&runs.iter().map(|r| (r.f_out, r.n_conv, r.final_smoothed_val)).collect::<Vec<_>>());
    Ok(SweepResult { runs, best })
}

fn select_best(scores: &[(usize, usize, f64)]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        let better = s.2.total_cmp(&b.2).then(s.0.cmp(&b.0)).then(s.1.cmp(&b.1));
        if better.is_lt() {
            best = i;
        }
    }
    best
}

/// One transition of the offline RL dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTransition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrajectory {
    pub id: String,
    /// One latent per step.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    /// Zero except at the final step.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `T − 1` intermediate transitions and one terminal transition whose
    /// next state repeats the last latent (it is never bootstrapped).
    pub fn transitions(&self) -> Vec<LatentTransition> {
        let n = self.len();
        (0..n)
            .map(|t| LatentTransition {
                s: self.states[t].clone(),
                a: self.actions[t],
                r: self.rewards[t],
                s_next: self.states[(t + 1).min(n - 1)].clone(),
                done: self.dones[t],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDataset {
    pub latent_dim: usize,
    pub trajectories: Vec<LatentTrajectory>,
}

impl LatentDataset {
    pub fn transitions(&self) -> Vec<LatentTransition> {
        self.trajectories.iter().flat_map(LatentTrajectory::transitions).collect()
    }

    pub fn n_states(&self) -> usize {
        self.trajectories.iter().map(LatentTrajectory::len).sum()
    }

    /// Joins datasets, keeping trajectory order.
    pub fn merged(parts: &[&LatentDataset]) -> Result<LatentDataset> {
        let latent_dim = parts.first().map_or(0, |p| p.latent_dim);
        if parts.iter().any(|p| p.latent_dim != latent_dim) {
            return Err(Error::dim("latent datasets with different widths"));
        }
        Ok(LatentDataset {
            latent_dim,
            trajectories: parts.iter().flat_map(|p| p.trajectories.iter().cloned()).collect(),
        })
    }
}

/// Latent state for every step of every trajectory. GNN encoders see the
/// prefix snapshot `g_{t+1}` at step `t`; the AE sees `(o_t, a_{t−1})`.
pub fn encode_dataset(trajs: &[Trajectory], schema: &FeatureSchema, encoder: &Encoder) -> Result<LatentDataset> {
    if schema.mode() != encoder.kind().mode()
        || schema.n_variant() != encoder.arch().n_variant
        || schema.n_invariant() != encoder.arch().n_invariant
    {
        return Err(Error::Data(format!(
            "schema ({}, {}) does not match the {} encoder",
            schema.n_invariant(),
            schema.n_variant(),
            encoder.kind()
        )));
    }
    let encoded = par::map(trajs, |t| -> Result<LatentTrajectory> {
        let n = t.len();
        let rows = state_rows(t, schema, encoder.kind(), n)?;
        let z = match &rows {
            StateRows::Ae(x) => encoder.encode(EncoderInput::Ae(x))?,
            StateRows::Graph(b) => encoder.encode(EncoderInput::Graph(b))?,
        };
        let mut rewards = vec![0.0; n];
        rewards[n - 1] = t.reward;
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        Ok(LatentTrajectory {
            id: t.id.clone(),
            states: (0..n).map(|i| z.row(i).to_vec()).collect(),
            actions: t.actions.clone(),
            rewards,
            dones,
        })
    });
    Ok(LatentDataset {
        latent_dim: encoder.arch().latent_dim,
        trajectories: encoded.into_iter().collect::<Result<_>>()?,
    })
}
