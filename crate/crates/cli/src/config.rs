//! Run configuration: a TOML file, command-line overrides, and the
//! resolved settings each stage consumes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sepsis_rl::cohort::{EncoderMode, FeatureSchema, SyntheticConfig};
use sepsis_rl::encoders::EncoderKind;
use sepsis_rl::evaluation::WisConfig;
use sepsis_rl::policy::{BcConfig, DbcqConfig};
use sepsis_rl::training::ReprTrainConfig;

use crate::error::{CliError, Result};

pub const DEFAULT_SEEDS: [u64; 3] = [1234, 2020, 2025];

/// Epoch and iteration counts applied by `--desk-scale`.
pub const DESK_REPR_EPOCHS: usize = 50;
pub const DESK_BC_EPOCHS: usize = 50;
pub const DESK_DBCQ_ITERATIONS: usize = 50_000;

/// Iterations of a full-scale policy run.
pub const FULL_DBCQ_ITERATIONS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub encoder: EncoderKind,
    pub untrained_encoder: bool,
    pub desk_scale: bool,
    pub paths: PathsSection,
    pub cohort: CohortSection,
    pub schema: SchemaSection,
    pub repr: ReprSection,
    pub sweep: SweepSection,
    pub bc: BcConfig,
    pub dbcq: DbcqSection,
    pub wis: WisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            seeds: DEFAULT_SEEDS.to_vec(),
            encoder: EncoderKind::Sage,
            untrained_encoder: false,
            desk_scale: false,
            paths: PathsSection::default(),
            cohort: CohortSection::default(),
            schema: SchemaSection::default(),
            repr: ReprSection::default(),
            sweep: SweepSection::default(),
            bc: BcConfig::default(),
            dbcq: DbcqSection::default(),
            wis: WisSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// External cohort CSV for `ingest`; the generated cohort when unset.
    pub input_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    /// Sampling seed of the synthetic generator.
    pub seed: u64,
    pub split_seed: u64,
    pub split: [f64; 3],
    pub synthetic: SyntheticConfig,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            seed: 1234,
            split_seed: 1234,
            split: [0.70, 0.15, 0.15],
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Feature lists in graph layout (body weight time-variant). Unset lists
/// take the default schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaSection {
    pub invariant: Option<Vec<String>>,
    pub variant: Option<Vec<String>>,
}

/// Representation-training overrides on top of the per-encoder defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprSection {
    pub f_out: Option<usize>,
    pub n_conv: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub val_period: Option<usize>,
    pub action_injection: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// `(f_out, n_conv)` pairs for `train-encoder --sweep`.
    pub grid: Vec<[usize; 2]>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            grid: vec![[64, 2], [64, 3], [128, 2], [128, 3]],
        }
    }
}

/// dBCQ settings; each run takes its seed from `seeds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbcqSection {
    pub threshold: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub target_update_freq: usize,
    pub lr: f64,
    pub iterations: usize,
    pub eval_period: usize,
    pub batch_size: usize,
    pub huber_delta: f64,
}

impl Default for DbcqSection {
    fn default() -> Self {
        let d = DbcqConfig::default();
        Self {
            threshold: d.threshold,
            gamma: d.gamma,
            polyak: d.polyak,
            target_update_freq: d.target_update_freq,
            lr: d.lr,
            iterations: FULL_DBCQ_ITERATIONS,
            eval_period: d.eval_period,
            batch_size: d.batch_size,
            huber_delta: d.huber_delta,
        }
    }
}

impl DbcqSection {
    pub fn for_seed(&self, seed: u64) -> DbcqConfig {
        DbcqConfig {
            threshold: self.threshold,
            gamma: self.gamma,
            polyak: self.polyak,
            target_update_freq: self.target_update_freq,
            lr: self.lr,
            iterations: self.iterations,
            eval_period: self.eval_period,
            batch_size: self.batch_size,
            huber_delta: self.huber_delta,
            seed,
        }
    }
}

/// WIS settings; the discount comes from `[dbcq]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WisSection {
    pub discounted: bool,
    pub clip: bool,
    pub clip_bounds: [f64; 2],
    pub epsilon: f64,
}

impl Default for WisSection {
    fn default() -> Self {
        let d = WisConfig::default();
        Self {
            discounted: d.discounted,
            clip: d.clip.is_some(),
            clip_bounds: d.clip.unwrap_or([1e-4, 1e4]),
            epsilon: d.epsilon,
        }
    }
}

/// Command-line values that replace config keys one-for-one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub desk_scale: bool,
    pub untrained_encoder: bool,
    pub encoder: Option<EncoderKind>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises to TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(e) = o.encoder {
            self.encoder = e;
        }
        self.desk_scale |= o.desk_scale;
        self.untrained_encoder |= o.untrained_encoder;
    }

    /// Validates and expands into the per-stage settings.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut run = self.clone();
        if run.desk_scale {
            run.repr.epochs = Some(DESK_REPR_EPOCHS);
            run.bc.epochs = DESK_BC_EPOCHS;
            run.dbcq.iterations = DESK_DBCQ_ITERATIONS;
        }
        if run.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = run.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(CliError::Config(format!("seed {s} listed twice")));
        }
        let split = run.cohort.split;
        if split.iter().any(|f| f.is_nan() || *f <= 0.0) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::Config("cohort.split must be three positive fractions summing to 1".into()));
        }
        if let Some(p) = &run.paths.input_csv {
            if !p.is_file() {
                return Err(CliError::Config(format!("paths.input_csv {} does not exist", p.display())));
            }
        }
        if run.sweep.grid.iter().any(|[f, _]| *f == 0) {
            return Err(CliError::Config("sweep grid entries need f_out ≥ 1".into()));
        }
        if run.wis.clip && !(run.wis.clip_bounds[0] > 0.0 && run.wis.clip_bounds[0] < run.wis.clip_bounds[1]) {
            return Err(CliError::Config("wis.clip_bounds must satisfy 0 < low < high".into()));
        }
        run.cohort.synthetic.validate()?;
        run.bc.validate()?;
        run.dbcq.for_seed(0).validate()?;

        let defaults = FeatureSchema::default_for(EncoderMode::Gnn);
        let schema = FeatureSchema::new(
            run.schema.invariant.clone().unwrap_or_else(|| defaults.invariant_names().to_vec()),
            run.schema.variant.clone().unwrap_or_else(|| defaults.variant_names().to_vec()),
            EncoderMode::Gnn,
        )?;
        // Both layouts must exist because behaviour cloning always reads the
        // MLP layout.
        schema.to_mode(EncoderMode::Ae)?;

        let base = ReprTrainConfig::for_encoder(run.encoder);
        let r = &run.repr;
        let repr = ReprTrainConfig {
            encoder: run.encoder,
            f_out: r.f_out.unwrap_or(base.f_out),
            n_conv: r.n_conv.unwrap_or(base.n_conv),
            epochs: r.epochs.unwrap_or(base.epochs),
            lr: r.lr.unwrap_or(base.lr),
            batch_size: r.batch_size.unwrap_or(base.batch_size),
            val_period: r.val_period.unwrap_or(base.val_period),
            action_injection: r.action_injection.unwrap_or(base.action_injection),
            seed: r.seed.unwrap_or(base.seed),
        };
        repr.validate()?;
        let wis = WisConfig {
            gamma: run.dbcq.gamma,
            discounted: run.wis.discounted,
            clip: run.wis.clip.then_some(run.wis.clip_bounds),
            epsilon: run.wis.epsilon,
        };
        if !(0.0..1.0).contains(&wis.epsilon) {
            return Err(CliError::Config("wis.epsilon must lie in [0, 1)".into()));
        }
        let config_hash = config_hash(&run);
        Ok(Resolved {
            run,
            schema,
            repr,
            wis,
            config_hash,
        })
    }
}

/// SHA-256 of the effective config as TOML, with the output directory
/// blanked so that identical runs in different directories agree.
pub fn config_hash(run: &RunConfig) -> String {
    let mut c = run.clone();
    c.out_dir = PathBuf::new();
    hex(&Sha256::digest(c.to_toml().as_bytes()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fully validated settings shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub run: RunConfig,
    /// Graph-layout schema of the cohort files.
    pub schema: FeatureSchema,
    pub repr: ReprTrainConfig,
    pub wis: WisConfig,
    pub config_hash: String,
}

impl Resolved {
    pub fn out(&self) -> &Path {
        &self.run.out_dir
    }

    /// `p` relative to the run directory when inside it, else as given.
    pub fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(self.out()).unwrap_or(p).to_string_lossy().into_owned()
    }

    pub fn encoder_schema(&self) -> FeatureSchema {
        self.schema.to_mode(self.repr.encoder.mode()).expect("checked in resolve")
    }

    pub fn ae_schema(&self) -> FeatureSchema {
        self.schema.to_mode(EncoderMode::Ae).expect("checked in resolve")
    }
}
