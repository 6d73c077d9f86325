//! Pipeline stages. Each reads its inputs from the run directory, writes
//! its artifacts there and records a manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sepsis_rl::cohort::{
    cohort_stats, filter_short, generate_synthetic, read_csv, stratified_split, write_csv, Cohort, CohortStats,
    EncoderMode, FeatureSchema, Split, Standardizer, Trajectory,
};
use sepsis_rl::encoders::{Decoder, DecoderArch, Encoder, EncoderArch, EncoderKind};
use sepsis_rl::evaluation::{render_svg, EvalCurve, SeedCurves, WisEvaluator};
use sepsis_rl::numerics::Tensor;
use sepsis_rl::par;
use sepsis_rl::policy::{bc_accuracy, dbcq_train, train_behavior_cloning, BcParams, DbcqRun, QParams};
use sepsis_rl::training::{
    encode_dataset, run_sweep, train_autoencoder, LatentDataset, LatentTrajectory, TrainedAutoencoder,
};
use sepsis_rl::trajgraph::{build_trajectory_graph, snapshots, validate_graph};

use crate::checkpoint::Checkpoint;
use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::manifest::{write_file, RunManifest, StageRecorder};

pub const COHORT_CSV: &str = "data/cohort.csv";
pub const INGESTED_CSV: &str = "data/ingested.csv";
pub const SPLIT_JSON: &str = "data/split.json";
pub const STATS_JSON: &str = "data/stats.json";
pub const GRAPH_REPORT: &str = "reports/graph_check.json";
pub const ENCODER_DIR: &str = "models/encoder";
pub const SWEEP_DIR: &str = "models/sweep";
pub const LATENT_DIR: &str = "latents";
pub const BC_CKPT: &str = "models/bc/bc.ckpt";
pub const BC_LOSS: &str = "models/bc/loss.jsonl";
pub const POLICY_DIR: &str = "policy";
pub const EVAL_REPORT: &str = "reports/evaluation.json";

const MAX_REPORTED_VIOLATIONS: usize = 100;

/// Stage names in pipeline order.
pub const STAGES: [&str; 10] = [
    "generate",
    "ingest",
    "graph-check",
    "train-encoder",
    "encode",
    "train-bc",
    "train-policy",
    "evaluate",
    "plot",
    "reproduce",
];

fn at(cfg: &Resolved, rel: &str) -> PathBuf {
    cfg.out().join(rel)
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingStage {
            artifact: path.to_path_buf(),
            stage,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn meta_field<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, key: &str, path: &Path) -> Result<T> {
    let v = ck
        .meta
        .get(key)
        .ok_or_else(|| CliError::Data(format!("{}: checkpoint metadata lacks {key}", path.display())))?;
    serde_json::from_value(v.clone()).map_err(|e| CliError::Data(format!("{}: metadata {key}: {e}", path.display())))
}

fn csv_bytes(cohort: &Cohort) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(cohort, &mut buf)?;
    Ok(buf)
}

fn load_cohort(path: &Path, schema: &FeatureSchema) -> Result<Cohort> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file, schema).map_err(|e| match e {
        sepsis_rl::Error::Io(source) => CliError::io(path, source),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub source: String,
    pub removed_short: usize,
    pub stats: CohortStats,
    pub split_sizes: [usize; 3],
}

/// Ingested cohort (graph layout) and its split.
pub struct Data {
    pub cohort: Cohort,
    pub split: Split,
}

impl Data {
    pub fn load(cfg: &Resolved, rec: &mut StageRecorder) -> Result<Self> {
        let csv = at(cfg, INGESTED_CSV);
        let split_path = at(cfg, SPLIT_JSON);
        require(&csv, "ingest")?;
        require(&split_path, "ingest")?;
        rec.input(&csv);
        rec.input(&split_path);
        let cohort = load_cohort(&csv, &cfg.schema)?;
        let file: SplitFile = read_json(&split_path)?;
        let index: HashMap<&str, usize> = cohort
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.as_str(), i))
            .collect();
        let lookup = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| CliError::Data(format!("split lists unknown trajectory {id}")))
                })
                .collect()
        };
        let split = Split {
            train: lookup(&file.train)?,
            val: lookup(&file.val)?,
            test: lookup(&file.test)?,
        };
        Ok(Self { cohort, split })
    }

    fn part(&self, c: &Cohort, idx: &[usize]) -> Vec<Trajectory> {
        c.select(idx).trajectories
    }

    /// Encoder-layout splits standardised with training statistics.
    pub fn encoder_view(&self, kind: EncoderKind, st: Option<&Standardizer>) -> Result<EncoderView> {
        let c = self.cohort.to_mode(kind.mode())?;
        let train = self.part(&c, &self.split.train);
        let st = match st {
            Some(s) => s.clone(),
            None => Standardizer::fit(&train)?,
        };
        Ok(EncoderView {
            splits: [
                st.apply_all(&train),
                st.apply_all(&self.part(&c, &self.split.val)),
                st.apply_all(&self.part(&c, &self.split.test)),
            ],
            schema: c.schema,
            standardizer: st,
        })
    }

    /// Raw MLP-layout observations for behaviour cloning, standardised with
    /// train+val statistics: (train+val rows, test trajectories).
    pub fn bc_view(&self, st: Option<&Standardizer>) -> Result<(Vec<Trajectory>, Vec<Trajectory>, Standardizer)> {
        let c = self.cohort.to_mode(EncoderMode::Ae)?;
        let mut idx = self.split.train.clone();
        idx.extend(&self.split.val);
        let fit = self.part(&c, &idx);
        let st = match st {
            Some(s) => s.clone(),
            None => Standardizer::fit(&fit)?,
        };
        Ok((st.apply_all(&fit), st.apply_all(&self.part(&c, &self.split.test)), st))
    }
}

pub struct EncoderView {
    pub schema: FeatureSchema,
    pub standardizer: Standardizer,
    /// train, val, test
    pub splits: [Vec<Trajectory>; 3],
}

fn observation_rows(trajs: &[Trajectory]) -> Result<(Tensor, Vec<usize>)> {
    let obs: Vec<Vec<f64>> = trajs.iter().flat_map(|t| (0..t.len()).map(|i| t.observation(i))).collect();
    let acts = trajs.iter().flat_map(|t| t.actions.iter().copied()).collect();
    Ok((Tensor::from_rows(&obs)?, acts))
}

pub fn cmd_generate(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "generate");
    if cfg.schema != FeatureSchema::default_for(EncoderMode::Gnn) {
        return Err(CliError::Config("synthetic cohorts use the default schema; drop [schema] or ingest a CSV".into()));
    }
    let cohort = generate_synthetic(&cfg.run.cohort.synthetic, cfg.run.cohort.seed)?;
    let s = cohort_stats(&cohort)?;
    let path = at(cfg, COHORT_CSV);
    write_file(&path, &csv_bytes(&cohort)?)?;
    rec.output(&path);
    rec.note(format!(
        "generated n={} mortality={:.4} mean_length={:.2} median_length={}",
        s.n, s.mortality, s.mean_length, s.median_length
    ));
    rec.finish()
}

pub fn cmd_ingest(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "ingest");
    let source = match &cfg.run.paths.input_csv {
        Some(p) => p.clone(),
        None => {
            let p = at(cfg, COHORT_CSV);
            require(&p, "generate")?;
            p
        }
    };
    rec.input(&source);
    let raw = load_cohort(&source, &cfg.schema)?;
    let (cohort, removed) = filter_short(&raw);
    let stats = cohort_stats(&cohort)?;
    let split = stratified_split(&cohort, cfg.run.cohort.split, cfg.run.cohort.split_seed)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| cohort.trajectories[i].id.clone()).collect::<Vec<_>>();
    let file = SplitFile {
        seed: cfg.run.cohort.split_seed,
        fractions: cfg.run.cohort.split,
        train: ids(&split.train),
        val: ids(&split.val),
        test: ids(&split.test),
    };
    let csv = at(cfg, INGESTED_CSV);
    write_file(&csv, &csv_bytes(&cohort)?)?;
    write_json(&at(cfg, SPLIT_JSON), &file)?;
    let summary = IngestStats {
        source: cfg.display_path(&source),
        removed_short: removed,
        stats,
        split_sizes: [split.train.len(), split.val.len(), split.test.len()],
    };
    write_json(&at(cfg, STATS_JSON), &summary)?;
    for p in [csv, at(cfg, SPLIT_JSON), at(cfg, STATS_JSON)] {
        rec.output(p);
    }
    rec.note(format!(
        "ingested n={} (removed {removed} single-step) mortality={:.4} mean_length={:.2} median_length={} split={:?}",
        stats.n, stats.mortality, stats.mean_length, stats.median_length, summary.split_sizes
    ));
    rec.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub n_graphs: usize,
    pub n_snapshots: usize,
    pub n_violations: usize,
    pub violations: Vec<String>,
}

pub fn cmd_graph_check(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "graph-check");
    let data = Data::load(cfg, &mut rec)?;
    let schema = &data.cohort.schema;
    let per_traj = par::map(&data.cohort.trajectories, |t| -> Result<(usize, Vec<String>)> {
        let g = build_trajectory_graph(t, schema)?;
        let mut found = Vec::new();
        let mut tag = |what: String, r: std::result::Result<(), Vec<sepsis_rl::trajgraph::Violation>>| {
            if let Err(vs) = r {
                found.extend(vs.iter().map(|v| format!("{} {what}: {v}", t.id)));
            }
        };
        tag("graph".into(), validate_graph(&g));
        let snaps = snapshots(&g)?;
        for (i, s) in snaps.iter().enumerate() {
            tag(format!("g_{}", i + 1), validate_graph(s));
        }
        Ok((snaps.len(), found))
    });
    let mut report = GraphReport {
        n_graphs: 0,
        n_snapshots: 0,
        n_violations: 0,
        violations: Vec::new(),
    };
    for r in per_traj {
        let (n, v) = r?;
        report.n_graphs += 1;
        report.n_snapshots += n;
        report.n_violations += v.len();
        let room = MAX_REPORTED_VIOLATIONS.saturating_sub(report.violations.len());
        report.violations.extend(v.into_iter().take(room));
    }
    let path = at(cfg, GRAPH_REPORT);
    write_json(&path, &report)?;
    rec.output(&path);
    rec.note(format!(
        "{} graphs, {} snapshots, {} violations",
        report.n_graphs, report.n_snapshots, report.n_violations
    ));
    let manifest = rec.finish()?;
    if report.n_violations > 0 {
        return Err(CliError::Data(format!(
            "{} graph invariant violations; see {}",
            report.n_violations,
            path.display()
        )));
    }
    Ok(manifest)
}

fn autoencoder_kind(kind: EncoderKind) -> String {
    format!("autoencoder:{kind}")
}

fn autoencoder_checkpoint(
    cfg: &Resolved,
    view: &EncoderView,
    enc: &Encoder,
    dec: &Decoder,
    extra: Value,
) -> Checkpoint {
    let mut meta = json!({
        "encoder_arch": enc.arch(),
        "decoder_arch": dec.arch(),
        "standardizer": view.standardizer,
        "repr": cfg.repr,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    let mut ck = Checkpoint::new(
        autoencoder_kind(enc.kind()),
        view.schema.fingerprint(),
        cfg.repr.seed,
        cfg.config_hash.clone(),
    )
    .with_meta(meta);
    ck.push_params("encoder", enc.params());
    ck.push_params("decoder", dec.params());
    ck
}

fn write_autoencoder(
    cfg: &Resolved,
    view: &EncoderView,
    model: &TrainedAutoencoder,
    dir: &Path,
    rec: &mut StageRecorder,
) -> Result<()> {
    let best = autoencoder_checkpoint(
        cfg,
        view,
        &model.best_encoder,
        &model.best_decoder,
        json!({"which": "best", "epoch": model.best_epoch, "val_loss": model.best_val_loss}),
    );
    let last_val = model.curve.val_loss.last().copied().unwrap_or(f64::NAN);
    let last = autoencoder_checkpoint(
        cfg,
        view,
        &model.encoder,
        &model.decoder,
        json!({"which": "final", "epoch": cfg.repr.epochs, "val_loss": last_val}),
    );
    for (name, ck) in [("best.ckpt", best), ("final.ckpt", last)] {
        let p = dir.join(name);
        ck.save(&p)?;
        rec.output(p);
    }
    let p = dir.join("loss.jsonl");
    write_file(&p, model.curve.to_jsonl().as_bytes())?;
    rec.output(p);
    Ok(())
}

pub fn cmd_train_encoder(cfg: &Resolved, sweep: bool) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "train-encoder");
    let data = Data::load(cfg, &mut rec)?;
    let view = data.encoder_view(cfg.repr.encoder, None)?;
    let [train, val, _] = &view.splits;
    let dir = at(cfg, ENCODER_DIR);
    if sweep {
        if !cfg.repr.encoder.is_graph() {
            return Err(CliError::Config("the sweep grid applies to graph encoders only".into()));
        }
        let grid: Vec<(usize, usize)> = cfg.run.sweep.grid.iter().map(|[f, n]| (*f, *n)).collect();
        let res = run_sweep(&grid, &cfg.repr, train, val, &view.schema)?;
        for run in &res.runs {
            let sub = at(cfg, SWEEP_DIR).join(format!("f{}_c{}", run.f_out, run.n_conv));
            write_autoencoder(cfg, &view, &run.model, &sub, &mut rec)?;
            rec.note(format!(
                "sweep f_out={} n_conv={} final_smoothed_val={:.6}",
                run.f_out, run.n_conv, run.final_smoothed_val
            ));
        }
        let summary = at(cfg, SWEEP_DIR).join("summary.csv");
        write_file(&summary, res.summary_csv().as_bytes())?;
        rec.output(summary);
        let best = res.best_run();
        rec.note(format!("selected f_out={} n_conv={}", best.f_out, best.n_conv));
        write_autoencoder(cfg, &view, &best.model, &dir, &mut rec)?;
    } else {
        let model = train_autoencoder(train, val, &view.schema, &cfg.repr)?;
        rec.note(format!(
            "{} encoder: best epoch {} val_loss {:.6} (per-feature {:.6})",
            cfg.repr.encoder,
            model.best_epoch,
            model.best_val_loss,
            model.best_val_loss / (sepsis_rl::evaluation::MEAN_TRAJECTORY_LENGTH * view.schema.n_variant() as f64)
        ));
        write_autoencoder(cfg, &view, &model, &dir, &mut rec)?;
    }
    rec.finish()
}

/// Loads encoder weights and the standardiser from an autoencoder checkpoint.
pub fn load_encoder(cfg: &Resolved, path: &Path) -> Result<(Encoder, Standardizer)> {
    let ck = Checkpoint::load(path)?;
    let wrap = |source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    ck.expect_kind(&autoencoder_kind(cfg.repr.encoder)).map_err(wrap)?;
    ck.expect_schema(&cfg.encoder_schema().fingerprint()).map_err(wrap)?;
    let arch: EncoderArch = meta_field(&ck, "encoder_arch", path)?;
    let mut enc = Encoder::new(arch, ck.seed)?;
    enc.params_mut().load_values(&ck.params("encoder"))?;
    let st: Standardizer = meta_field(&ck, "standardizer", path)?;
    Ok((enc, st))
}

/// Loads the decoder stored next to an encoder.
pub fn load_decoder(path: &Path) -> Result<Decoder> {
    let ck = Checkpoint::load(path)?;
    let arch: DecoderArch = meta_field(&ck, "decoder_arch", path)?;
    let mut dec = Decoder::new(arch, ck.seed)?;
    dec.params_mut().load_values(&ck.params("decoder"))?;
    Ok(dec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LatentMeta {
    id: String,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn save_latents(cfg: &Resolved, path: &Path, sets: &[LatentDataset; 3], encoder: &str, seed: u64, fingerprint: String) -> Result<()> {
    let mut meta = serde_json::Map::new();
    meta.insert("encoder".into(), json!(encoder));
    meta.insert("latent_dim".into(), json!(sets[0].latent_dim));
    let mut ck = Checkpoint::new("latents", fingerprint, seed, cfg.config_hash.clone());
    for (name, set) in SPLIT_NAMES.iter().zip(sets) {
        let rows: Vec<Vec<f64>> = set.trajectories.iter().flat_map(|t| t.states.iter().cloned()).collect();
        let states = if rows.is_empty() {
            Tensor::zeros(&[0, set.latent_dim])
        } else {
            Tensor::from_rows(&rows)?
        };
        ck.push(*name, states);
        let m: Vec<LatentMeta> = set
            .trajectories
            .iter()
            .map(|t| LatentMeta {
                id: t.id.clone(),
                actions: t.actions.clone(),
                rewards: t.rewards.clone(),
                dones: t.dones.clone(),
            })
            .collect();
        meta.insert((*name).into(), serde_json::to_value(m).expect("serialisable"));
    }
    ck.meta = Value::Object(meta);
    ck.save(path)
}

/// Loads train, val and test latents plus the encoder description.
pub fn load_latents(path: &Path) -> Result<([LatentDataset; 3], String)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("latents").map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let latent_dim: usize = meta_field(&ck, "latent_dim", path)?;
    let encoder: String = meta_field(&ck, "encoder", path)?;
    let mut out = Vec::with_capacity(3);
    for name in SPLIT_NAMES {
        let metas: Vec<LatentMeta> = meta_field(&ck, name, path)?;
        let states = ck.tensor(name).map_err(|source| CliError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })?;
        let mut row = 0;
        let mut trajectories = Vec::with_capacity(metas.len());
        for m in metas {
            let n = m.actions.len();
            if row + n > states.rows() || m.rewards.len() != n || m.dones.len() != n {
                return Err(CliError::Data(format!("{}: latent rows do not match metadata", path.display())));
            }
            trajectories.push(LatentTrajectory {
                id: m.id,
                states: (row..row + n).map(|i| states.row(i).to_vec()).collect(),
                actions: m.actions,
                rewards: m.rewards,
                dones: m.dones,
            });
            row += n;
        }
        if row != states.rows() {
            return Err(CliError::Data(format!("{}: latent rows do not match metadata", path.display())));
        }
        out.push(LatentDataset {
            latent_dim,
            trajectories,
        });
    }
    let arr: [LatentDataset; 3] = out.try_into().expect("three splits");
    Ok((arr, encoder))
}

pub fn latents_path(cfg: &Resolved, seed: u64) -> PathBuf {
    if cfg.run.untrained_encoder {
        at(cfg, LATENT_DIR).join(format!("random_{seed}.ckpt"))
    } else {
        at(cfg, LATENT_DIR).join("trained.ckpt")
    }
}

fn encode_view(view: &EncoderView, enc: &Encoder) -> Result<[LatentDataset; 3]> {
    let [a, b, c] = &view.splits;
    Ok([
        encode_dataset(a, &view.schema, enc)?,
        encode_dataset(b, &view.schema, enc)?,
        encode_dataset(c, &view.schema, enc)?,
    ])
}

pub fn random_init_note(seed: u64) -> String {
    format!("encoder: random-init, seed={seed}")
}

pub fn cmd_encode(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "encode");
    let data = Data::load(cfg, &mut rec)?;
    if cfg.run.untrained_encoder {
        let view = data.encoder_view(cfg.repr.encoder, None)?;
        for &seed in &cfg.run.seeds {
            let enc = Encoder::new(cfg.repr.arch(&view.schema), seed)?;
            let sets = encode_view(&view, &enc)?;
            let path = latents_path(cfg, seed);
            let note = random_init_note(seed);
            save_latents(cfg, &path, &sets, &note, seed, view.schema.fingerprint())?;
            rec.output(path);
            rec.note(note);
        }
    } else {
        let ck = at(cfg, ENCODER_DIR).join("best.ckpt");
        require(&ck, "train-encoder")?;
        rec.input(&ck);
        let (enc, st) = load_encoder(cfg, &ck)?;
        let view = data.encoder_view(cfg.repr.encoder, Some(&st))?;
        let sets = encode_view(&view, &enc)?;
        let path = latents_path(cfg, 0);
        let note = format!("encoder: trained {} ({})", cfg.repr.encoder, cfg.display_path(&ck));
        save_latents(cfg, &path, &sets, &note, cfg.repr.seed, view.schema.fingerprint())?;
        rec.output(path);
        rec.note(note);
    }
    rec.finish()
}

pub fn cmd_train_bc(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "train-bc");
    let data = Data::load(cfg, &mut rec)?;
    let (fit, test, st) = data.bc_view(None)?;
    let (x, acts) = observation_rows(&fit)?;
    let trained = train_behavior_cloning(&x, &acts, &cfg.run.bc)?;
    let train_acc = bc_accuracy(&trained.model, &x, &acts)?;
    let (xt, at_) = observation_rows(&test)?;
    let test_acc = bc_accuracy(&trained.model, &xt, &at_)?;
    let m = &trained.model;
    let mut ck = Checkpoint::new("bc", data.cohort.schema.to_mode(EncoderMode::Ae)?.fingerprint(), cfg.run.bc.seed, cfg.config_hash.clone())
        .with_meta(json!({
            "input_dim": m.input_dim(),
            "momentum": m.momentum,
            "eps": m.eps,
            "standardizer": st,
            "initial_loss": trained.initial_loss,
            "bc": cfg.run.bc,
        }));
    ck.push_params("bc", &m.params);
    for i in 0..2 {
        ck.push(format!("running_mean/{i}"), Tensor::vector(m.running_mean[i].clone()));
        ck.push(format!("running_var/{i}"), Tensor::vector(m.running_var[i].clone()));
    }
    let path = at(cfg, BC_CKPT);
    ck.save(&path)?;
    rec.output(&path);
    let loss: String = trained
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{}\n", json!({"epoch": i + 1, "loss": l})))
        .collect();
    let lp = at(cfg, BC_LOSS);
    write_file(&lp, loss.as_bytes())?;
    rec.output(lp);
    for w in &trained.warnings {
        rec.note(format!("warning: {w}"));
    }
    rec.note(format!(
        "behaviour cloning: initial loss {:.4}, train+val accuracy {train_acc:.4}, test accuracy {test_acc:.4}",
        trained.initial_loss
    ));
    rec.finish()
}

pub fn load_bc(cfg: &Resolved, path: &Path) -> Result<(BcParams, Standardizer)> {
    let ck = Checkpoint::load(path)?;
    let wrap = |source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    ck.expect_kind("bc").map_err(wrap)?;
    ck.expect_schema(&cfg.ae_schema().fingerprint()).map_err(wrap)?;
    let input_dim: usize = meta_field(&ck, "input_dim", path)?;
    let mut m = BcParams::new(input_dim, ck.seed);
    m.params.load_values(&ck.params("bc"))?;
    for i in 0..2 {
        m.running_mean[i] = ck.tensor(&format!("running_mean/{i}")).map_err(wrap)?.data().to_vec();
        m.running_var[i] = ck.tensor(&format!("running_var/{i}")).map_err(wrap)?.data().to_vec();
    }
    m.momentum = meta_field(&ck, "momentum", path)?;
    m.eps = meta_field(&ck, "eps", path)?;
    m.eval();
    Ok((m, meta_field(&ck, "standardizer", path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub encoder: String,
    pub untrained_encoder: bool,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub eval_points: usize,
    /// Last EMA-smoothed WIS of each seed.
    pub final_smoothed: Vec<f64>,
    pub final_smoothed_mean: f64,
    pub final_smoothed_std: f64,
    pub uniform_wis: f64,
    pub behavior_wis: f64,
    pub margin_over_uniform: f64,
}

struct SeedRun {
    seed: u64,
    run: DbcqRun,
    uniform: f64,
    behavior: f64,
}

fn seed_dir(cfg: &Resolved, seed: u64) -> PathBuf {
    at(cfg, POLICY_DIR).join(format!("seed_{seed}"))
}

fn dbcq_checkpoint(cfg: &Resolved, q: &QParams, seed: u64, iterations: usize) -> Checkpoint {
    let mut ck = Checkpoint::new("dbcq", cfg.encoder_schema().fingerprint(), seed, cfg.config_hash.clone())
        .with_meta(json!({"latent_dim": q.latent_dim(), "iterations": iterations, "threshold": cfg.run.dbcq.threshold}));
    ck.push_params("online", &q.q);
    ck.push_params("target", &q.target);
    ck.push_params("behavior", &q.behavior);
    ck
}

pub fn load_dbcq(cfg: &Resolved, path: &Path) -> Result<QParams> {
    let ck = Checkpoint::load(path)?;
    let wrap = |source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    };
    ck.expect_kind("dbcq").map_err(wrap)?;
    ck.expect_schema(&cfg.encoder_schema().fingerprint()).map_err(wrap)?;
    let latent_dim: usize = meta_field(&ck, "latent_dim", path)?;
    let mut q = QParams::new(latent_dim, ck.seed);
    q.load(&ck.params("online"), &ck.params("target"), &ck.params("behavior"))?;
    Ok(q)
}

fn policy_inputs(cfg: &Resolved, rec: &mut StageRecorder) -> Result<(BcParams, Vec<Trajectory>)> {
    let bc_path = at(cfg, BC_CKPT);
    require(&bc_path, "train-bc")?;
    rec.input(&bc_path);
    for &seed in &cfg.run.seeds {
        let p = latents_path(cfg, seed);
        require(&p, "encode")?;
        rec.input(p);
    }
    let data = Data::load(cfg, rec)?;
    let (bc, st) = load_bc(cfg, &bc_path)?;
    let (_, test, _) = data.bc_view(Some(&st))?;
    Ok((bc, test))
}

pub fn cmd_train_policy(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "train-policy");
    let (bc, raw_test) = policy_inputs(cfg, &mut rec)?;
    let tau = cfg.run.dbcq.threshold;
    let runs = par::map(&cfg.run.seeds, |&seed| -> Result<SeedRun> {
        let ([train, val, test], _) = load_latents(&latents_path(cfg, seed))?;
        let pool = LatentDataset::merged(&[&train, &val])?.transitions();
        let ev = WisEvaluator::new(&bc, &test, &raw_test, tau, cfg.wis.clone())?;
        let run = dbcq_train(&pool, &cfg.run.dbcq.for_seed(seed), |_, q| ev.evaluate(q))?;
        Ok(SeedRun {
            seed,
            uniform: ev.evaluate_uniform()?,
            behavior: ev.evaluate_behavior()?,
            run,
        })
    });
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_>>()?;
    for r in &runs {
        let dir = seed_dir(cfg, r.seed);
        let ck = dir.join("q.ckpt");
        dbcq_checkpoint(cfg, &r.run.params, r.seed, cfg.run.dbcq.iterations).save(&ck)?;
        let td = dir.join("td_loss.jsonl");
        write_file(&td, r.run.td_jsonl().as_bytes())?;
        let wis = dir.join("wis.jsonl");
        write_file(&wis, r.run.curve.to_jsonl().as_bytes())?;
        for p in [ck, td, wis] {
            rec.output(p);
        }
        if cfg.run.untrained_encoder {
            rec.note(random_init_note(r.seed));
        }
    }
    let named: Vec<(u64, EvalCurve)> = runs.iter().map(|r| (r.seed, r.run.curve.clone())).collect();
    let curves = SeedCurves::from_runs(&named)?;
    let csv = at(cfg, POLICY_DIR).join("wis.csv");
    write_file(&csv, curves.to_csv().as_bytes())?;
    rec.output(&csv);
    let svg = at(cfg, POLICY_DIR).join("wis.svg");
    write_file(&svg, render_svg(&curves, &plot_title(cfg)).as_bytes())?;
    rec.output(&svg);

    let final_smoothed: Vec<f64> = runs
        .iter()
        .map(|r| r.run.curve.smoothed.last().copied().unwrap_or(f64::NAN))
        .collect();
    let n = runs.len() as f64;
    let uniform = runs.iter().map(|r| r.uniform).sum::<f64>() / n;
    let summary = PolicySummary {
        encoder: cfg.repr.encoder.to_string(),
        untrained_encoder: cfg.run.untrained_encoder,
        seeds: cfg.run.seeds.clone(),
        iterations: cfg.run.dbcq.iterations,
        eval_points: curves.iterations.len(),
        final_smoothed_mean: curves.mean.last().copied().unwrap_or(f64::NAN),
        final_smoothed_std: curves.std.last().copied().unwrap_or(f64::NAN),
        final_smoothed,
        uniform_wis: uniform,
        behavior_wis: runs.iter().map(|r| r.behavior).sum::<f64>() / n,
        margin_over_uniform: curves.mean.last().copied().unwrap_or(f64::NAN) - uniform,
    };
    let sp = at(cfg, POLICY_DIR).join("summary.json");
    write_json(&sp, &summary)?;
    rec.output(sp);
    rec.note(format!(
        "final smoothed WIS {:.4} ± {:.4} over {} seed(s); uniform {:.4}; behaviour {:.4}",
        summary.final_smoothed_mean,
        summary.final_smoothed_std,
        runs.len(),
        summary.uniform_wis,
        summary.behavior_wis
    ));
    rec.finish()
}

fn plot_title(cfg: &Resolved) -> String {
    let enc = if cfg.run.untrained_encoder {
        format!("{} (random init)", cfg.repr.encoder)
    } else {
        cfg.repr.encoder.to_string()
    };
    format!("WIS of the dBCQ policy, {enc} encoder")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub seed: u64,
    pub wis: f64,
    pub clinician_agreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub encoder: String,
    pub per_seed: Vec<SeedEvaluation>,
    pub mean_wis: f64,
    pub uniform_wis: f64,
    pub behavior_wis: f64,
}

pub fn cmd_evaluate(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "evaluate");
    let (bc, raw_test) = policy_inputs(cfg, &mut rec)?;
    let tau = cfg.run.dbcq.threshold;
    let mut per_seed = Vec::new();
    let mut baselines = (0.0, 0.0);
    for &seed in &cfg.run.seeds {
        let ck = seed_dir(cfg, seed).join("q.ckpt");
        require(&ck, "train-policy")?;
        rec.input(&ck);
        let q = load_dbcq(cfg, &ck)?;
        let ([_, _, test], _) = load_latents(&latents_path(cfg, seed))?;
        let ev = WisEvaluator::new(&bc, &test, &raw_test, tau, cfg.wis.clone())?;
        let rows: Vec<Vec<f64>> = test.trajectories.iter().flat_map(|t| t.states.iter().cloned()).collect();
        let logged: Vec<usize> = test.trajectories.iter().flat_map(|t| t.actions.iter().copied()).collect();
        let chosen = q.select_actions(&Tensor::from_rows(&rows)?, tau)?;
        let agree = chosen.iter().zip(&logged).filter(|(a, b)| a == b).count() as f64 / logged.len() as f64;
        per_seed.push(SeedEvaluation {
            seed,
            wis: ev.evaluate(&q)?,
            clinician_agreement: agree,
        });
        baselines.0 += ev.evaluate_uniform()?;
        baselines.1 += ev.evaluate_behavior()?;
    }
    let n = per_seed.len() as f64;
    let report = EvaluationReport {
        encoder: cfg.repr.encoder.to_string(),
        mean_wis: per_seed.iter().map(|s| s.wis).sum::<f64>() / n,
        uniform_wis: baselines.0 / n,
        behavior_wis: baselines.1 / n,
        per_seed,
    };
    let path = at(cfg, EVAL_REPORT);
    write_json(&path, &report)?;
    rec.output(&path);
    rec.note(format!(
        "final-policy WIS {:.4} (uniform {:.4}, behaviour {:.4})",
        report.mean_wis, report.uniform_wis, report.behavior_wis
    ));
    rec.finish()
}

pub fn cmd_plot(cfg: &Resolved) -> Result<RunManifest> {
    let mut rec = StageRecorder::new(cfg, "plot");
    let csv = at(cfg, POLICY_DIR).join("wis.csv");
    require(&csv, "train-policy")?;
    rec.input(&csv);
    let text = std::fs::read_to_string(&csv).map_err(|e| CliError::io(&csv, e))?;
    let curves = SeedCurves::from_csv(&text)?;
    let svg = at(cfg, POLICY_DIR).join("wis.svg");
    write_file(&svg, render_svg(&curves, &plot_title(cfg)).as_bytes())?;
    rec.output(&svg);
    rec.finish()
}

/// Runs every stage in order.
pub fn cmd_reproduce(cfg: &Resolved) -> Result<Vec<RunManifest>> {
    let mut out = Vec::new();
    if cfg.run.paths.input_csv.is_none() {
        out.push(cmd_generate(cfg)?);
    }
    out.push(cmd_ingest(cfg)?);
    out.push(cmd_graph_check(cfg)?);
    if !cfg.run.untrained_encoder {
        out.push(cmd_train_encoder(cfg, false)?);
    }
    out.push(cmd_encode(cfg)?);
    out.push(cmd_train_bc(cfg)?);
    out.push(cmd_train_policy(cfg)?);
    out.push(cmd_evaluate(cfg)?);
    out.push(cmd_plot(cfg)?);
    Ok(out)
}
