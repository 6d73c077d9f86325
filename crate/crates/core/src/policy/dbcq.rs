use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::N_ACTIONS;
use crate::encoders::LATENT_DIM;
use crate::error::{Error, Result};
use crate::evaluation::EvalCurve;
use crate::numerics::{self, Adam, AdamConfig, ParamId, ParamSet, Tape, Tensor, Var};
use crate::training::LatentTransition;

pub const Q_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbcqConfig {
    /// Action-elimination threshold τ.
    pub threshold: f64,
    pub gamma: f64,
    pub polyak: f64,
    /// Steps between target-network updates.
    pub target_update_freq: usize,
    pub lr: f64,
    pub iterations: usize,
    pub eval_period: usize,
    pub batch_size: usize,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for DbcqConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            gamma: 0.99,
            polyak: 0.01,
            target_update_freq: 1,
            lr: 1e-3,
            iterations: 50_000,
            eval_period: 500,
            batch_size: 128,
            huber_delta: 1.0,
            seed: 1234,
        }
    }
}

impl DbcqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("discount {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.polyak) {
            return Err(Error::config(format!("polyak rate {} outside [0, 1]", self.polyak)));
        }
        if self.target_update_freq == 0 || self.eval_period == 0 || self.batch_size == 0 {
            return Err(Error::config("update frequency, eval period and batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.huber_delta > 0.0) {
            return Err(Error::config("invalid learning rate or Huber threshold"));
        }
        Ok(())
    }
}

/// Eligible set `{a : p(a) / max p ≥ τ}`.
pub fn eligible_actions(behavior_probs: &[f64], tau: f64) -> Vec<bool> {
    let max = behavior_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    behavior_probs.iter().map(|&p| p / max >= tau).collect()
}

/// Highest-Q eligible action, lowest index on ties. The behaviour argmax is
/// always eligible, so the result is defined for any τ ≤ 1.
pub fn dbcq_select_action(q_values: &[f64], behavior_probs: &[f64], tau: f64) -> usize {
    debug_assert_eq!(q_values.len(), behavior_probs.len());
    let ok = eligible_actions(behavior_probs, tau);
    let mut best: Option<usize> = None;
    for (a, &e) in ok.iter().enumerate() {
        if e && best.is_none_or(|b| q_values[a] > q_values[b]) {
            best = Some(a);
        }
    }
    best.unwrap_or_else(|| numerics::argmax(behavior_probs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Mlp([(ParamId, ParamId); 3]);

fn add_mlp(p: &mut ParamSet, prefix: &str, input: usize, rng: &mut ChaCha8Rng) -> Mlp {
    let dims = [(input, Q_HIDDEN), (Q_HIDDEN, Q_HIDDEN), (Q_HIDDEN, N_ACTIONS)];
    let mut ids = [(ParamId(0), ParamId(0)); 3];
    for (i, &(a, b)) in dims.iter().enumerate() {
        ids[i] = (
            p.add_weight(format!("{prefix}.l{}.w", i + 1), a, b, rng),
            p.add_zeros(format!("{prefix}.l{}.b", i + 1), &[b]),
        );
    }
    Mlp(ids)
}

fn mlp_forward(tape: &mut Tape, vars: &[Var], m: Mlp, x: Var) -> Result<Var> {
    let mut h = x;
    for (i, (w, b)) in m.0.iter().enumerate() {
        h = tape.linear(h, vars[w.0], vars[b.0])?;
        if i < 2 {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn mlp_eval(params: &ParamSet, m: Mlp, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, (w, b)) in m.0.iter().enumerate() {
        h = numerics::linear(&h, &params.get(*w).value, &params.get(*b).value)?;
        if i < 2 {
            h = numerics::relu(&h);
        }
    }
    Ok(h)
}

/// Online Q-network, its Polyak-averaged target, and the latent behaviour
/// classifier used for action elimination.
#[derive(Clone, Debug, PartialEq)]
pub struct QParams {
    pub q: ParamSet,
    pub target: ParamSet,
    pub behavior: ParamSet,
    latent_dim: usize,
    q_ids: Mlp,
    b_ids: Mlp,
}

impl QParams {
    pub fn new(latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let mut q = ParamSet::new();
        let q_ids = add_mlp(&mut q, "q", latent_dim, &mut rng);
        let mut behavior = ParamSet::new();
        let b_ids = add_mlp(&mut behavior, "pi", latent_dim, &mut rng);
        Self {
            target: q.clone(),
            q,
            behavior,
            latent_dim,
            q_ids,
            b_ids,
        }
    }

    pub fn with_default_latent(seed: u64) -> Self {
        Self::new(LATENT_DIM, seed)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn check(&self, s: &Tensor) -> Result<()> {
        if s.cols() != self.latent_dim {
            return Err(Error::dim(format!(
                "Q-network expects {}-dim states, got {}",
                self.latent_dim,
                s.cols()
            )));
        }
        Ok(())
    }

    pub fn q_values(&self, s: &Tensor) -> Result<Tensor> {
        self.check(s)?;
        mlp_eval(&self.q, self.q_ids, s)
    }

    pub fn target_q_values(&self, s: &Tensor) -> Result<Tensor> {
        self.check(s)?;
        mlp_eval(&self.target, self.q_ids, s)
    }

    /// Row-wise softmax of the latent behaviour head.
    pub fn behavior_probs(&self, s: &Tensor) -> Result<Tensor> {
        self.check(s)?;
        let mut logits = mlp_eval(&self.behavior, self.b_ids, s)?;
        let k = logits.cols();
        for row in logits.data_mut().chunks_mut(k) {
            let p = numerics::softmax(row)?;
            row.copy_from_slice(&p);
        }
        Ok(logits)
    }

    /// Constrained greedy action for every row of `s`.
    pub fn select_actions(&self, s: &Tensor, tau: f64) -> Result<Vec<usize>> {
        let q = self.q_values(s)?;
        let p = self.behavior_probs(s)?;
        Ok((0..s.rows())
            .map(|r| dbcq_select_action(q.row(r), p.row(r), tau))
            .collect())
    }

    /// Loads stored tensors into all three networks by name.
    pub fn load(&mut self, q: &[(String, Tensor)], target: &[(String, Tensor)], behavior: &[(String, Tensor)]) -> Result<()> {
        self.q.load_values(q)?;
        self.target.load_values(target)?;
        self.behavior.load_values(behavior)
    }
}

fn rows_of(batch: &[&LatentTransition], f: impl Fn(&LatentTransition) -> &[f64]) -> Result<Tensor> {
    let d = f(batch[0]).len();
    let mut data = Vec::with_capacity(batch.len() * d);
    for t in batch {
        let r = f(t);
        if r.len() != d {
            return Err(Error::dim("latent states of different widths in one batch"));
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(batch.len(), d, data)
}

/// Bellman targets `r + (1 − done)·γ·Q_target(s')[a']` with `a'` chosen by
/// the online network among the actions the behaviour head deems eligible.
pub fn dbcq_targets(params: &QParams, batch: &[&LatentTransition], cfg: &DbcqConfig) -> Result<Vec<f64>> {
    let s_next = rows_of(batch, |t| &t.s_next)?;
    let q_next = params.q_values(&s_next)?;
    let p_next = params.behavior_probs(&s_next)?;
    let q_targ = params.target_q_values(&s_next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done {
                t.r
            } else {
                let a = dbcq_select_action(q_next.row(i), p_next.row(i), cfg.threshold);
                t.r + cfg.gamma * q_targ.row(i)[a]
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub td_loss: f64,
    pub behavior_loss: f64,
}

/// Stateful dBCQ learner: parameters plus optimiser moments.
#[derive(Clone, Debug)]
pub struct DbcqTrainer {
    pub params: QParams,
    pub config: DbcqConfig,
    q_opt: Adam,
    b_opt: Adam,
    steps: usize,
}

impl DbcqTrainer {
    pub fn new(params: QParams, config: DbcqConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Self {
            q_opt: Adam::new(&params.q, adam),
            b_opt: Adam::new(&params.behavior, adam),
            params,
            config,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update on `batch`: Huber TD loss for the online network,
    /// cross-entropy for the behaviour head, then the Polyak target update.
    pub fn train_step(&mut self, batch: &[&LatentTransition]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::data("empty dBCQ batch"));
        }
        let cfg = &self.config;
        let y = Tensor::vector(dbcq_targets(&self.params, batch, cfg)?);
        let s = rows_of(batch, |t| &t.s)?;
        self.params.check(&s)?;
        let actions: Vec<usize> = batch.iter().map(|t| t.a).collect();
        if let Some(&a) = actions.iter().find(|&&a| a >= N_ACTIONS) {
            return Err(Error::data(format!("action {a} out of range")));
        }

        let mut tape = Tape::new();
        let qv = tape.bind(&self.params.q);
        let bv = tape.bind(&self.params.behavior);
        let sv = tape.leaf(s);
        let q = mlp_forward(&mut tape, &qv, self.params.q_ids, sv)?;
        let qa = tape.gather_cols(q, &actions)?;
        let td = tape.huber(qa, &y, cfg.huber_delta)?;
        let logits = mlp_forward(&mut tape, &bv, self.params.b_ids, sv)?;
        let ce = tape.cross_entropy(logits, &actions)?;
        let (td_loss, behavior_loss) = (tape.value(td).item(), tape.value(ce).item());
        if !(td_loss.is_finite() && behavior_loss.is_finite()) {
            return Err(Error::Numeric(format!(
                "dBCQ loss not finite at iteration {} (td {td_loss}, behaviour {behavior_loss})",
                self.steps
            )));
        }
        let gq = tape.backward(td)?;
        let gb = tape.backward(ce)?;
        self.params.q.accumulate(&gq.for_params(&qv, &self.params.q))?;
        self.params.behavior.accumulate(&gb.for_params(&bv, &self.params.behavior))?;
        self.q_opt.step(&mut self.params.q)?;
        self.b_opt.step(&mut self.params.behavior)?;
        self.steps += 1;
        if self.steps.is_multiple_of(cfg.target_update_freq) {
            self.params.target.blend_toward(&self.params.q, cfg.polyak);
        }
        Ok(StepStats {
            td_loss,
            behavior_loss,
        })
    }
}

/// Single update, for callers that manage the trainer themselves.
pub fn dbcq_train_step(trainer: &mut DbcqTrainer, batch: &[&LatentTransition]) -> Result<StepStats> {
    trainer.train_step(batch)
}

#[derive(Clone, Debug)]
pub struct DbcqRun {
    pub params: QParams,
    /// TD loss of every iteration, starting at iteration 1.
    pub td_loss: Vec<f64>,
    pub curve: EvalCurve,
}

#[derive(Serialize)]
struct TdRecord {
    iteration: usize,
    td_loss: f64,
}

impl DbcqRun {
    /// `{iteration, td_loss}` lines.
    pub fn td_jsonl(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.td_loss.iter().enumerate() {
            let rec = TdRecord {
                iteration: i + 1,
                td_loss: *l,
            };
            s.push_str(&serde_json::to_string(&rec).expect("plain record"));
            s.push('\n');
        }
        s
    }
}

/// Trains from fresh parameters for `config.iterations` steps on batches
/// drawn uniformly with replacement, calling `evaluator` after every
/// `eval_period` iterations.
pub fn dbcq_train<F>(transitions: &[LatentTransition], config: &DbcqConfig, evaluator: F) -> Result<DbcqRun>
where
    F: FnMut(usize, &QParams) -> Result<f64>,
{
    let dim = transitions
        .first()
        .ok_or_else(|| Error::data("no transitions to learn from"))?
        .s
        .len();
    dbcq_train_from(QParams::new(dim, config.seed), transitions, config, evaluator)
}

pub fn dbcq_train_from<F>(params: QParams, transitions: &[LatentTransition], config: &DbcqConfig, mut evaluator: F) -> Result<DbcqRun>
where
    F: FnMut(usize, &QParams) -> Result<f64>,
{
    if transitions.is_empty() {
        return Err(Error::data("no transitions to learn from"));
    }
    if let Some(t) = transitions.iter().find(|t| !t.done && t.r != 0.0) {
        return Err(Error::data(format!("non-terminal transition with reward {}", t.r)));
    }
    let mut trainer = DbcqTrainer::new(params, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(5);
    let mut td_loss = Vec::with_capacity(config.iterations);
    let mut iterations = Vec::new();
    let mut scores = Vec::new();
    let mut batch = Vec::with_capacity(config.batch_size);
    for it in 1..=config.iterations {
        batch.clear();
        batch.extend((0..config.batch_size).map(|_| &transitions[rng.random_range(0..transitions.len())]));
        td_loss.push(trainer.train_step(&batch)?.td_loss);
        if it % config.eval_period == 0 {
            iterations.push(it);
            scores.push(evaluator(it, &trainer.params)?);
        }
    }
    Ok(DbcqRun {
        params: trainer.params,
        td_loss,
        curve: EvalCurve::new(iterations, scores)?,
    })
}
