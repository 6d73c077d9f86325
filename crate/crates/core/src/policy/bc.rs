use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{make_batches, N_ACTIONS};
use crate::error::{Error, Result};
use crate::numerics::{self, Adam, AdamConfig, ParamId, ParamSet, Tape, Tensor, Var};

pub const BC_HIDDEN: usize = 128;
/// Floor applied to every behaviour probability before renormalising.
pub const PROB_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Shrink weights directly (AdamW) instead of adding an L2 gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    /// Running-statistics update rate.
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            lr: 1e-4,
            weight_decay: 0.1,
            decoupled_weight_decay: true,
            batch_size: 128,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 1234,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::config("behaviour cloning needs epochs ≥ 1 and batch_size ≥ 2"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return Err(Error::config("invalid behaviour-cloning optimiser settings"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
}

/// Per-hidden-layer batch mean and variance.
pub type BatchStats = [(Vec<f64>, Vec<f64>); 2];

/// Clinician policy network: two `linear → batch-norm → ReLU` blocks and a
/// linear output over the 25 actions.
#[derive(Clone, Debug, PartialEq)]
pub struct BcParams {
    pub params: ParamSet,
    pub running_mean: [Vec<f64>; 2],
    pub running_var: [Vec<f64>; 2],
    pub momentum: f64,
    pub eps: f64,
    /// Batch statistics when true, running statistics otherwise.
    pub training: bool,
    input_dim: usize,
    lin: [(ParamId, ParamId); 3],
    bn: [BnIds; 2],
}

impl BcParams {
    /// Glorot hidden layers; the output layer starts at zero so the initial
    /// prediction is uniform.
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut p = ParamSet::new();
        let dims = [(input_dim, BC_HIDDEN), (BC_HIDDEN, BC_HIDDEN), (BC_HIDDEN, N_ACTIONS)];
        let mut lin = [(ParamId(0), ParamId(0)); 3];
        let mut bn = [BnIds {
            gamma: ParamId(0),
            beta: ParamId(0),
        }; 2];
        for (i, &(a, b)) in dims.iter().enumerate() {
            let w = if i == 2 {
                p.add_zeros("bc.l3.w", &[a, b])
            } else {
                p.add_weight(format!("bc.l{}.w", i + 1), a, b, &mut rng)
            };
            lin[i] = (w, p.add_zeros(format!("bc.l{}.b", i + 1), &[b]));
            if i < 2 {
                bn[i] = BnIds {
                    gamma: p.add(format!("bc.bn{}.gamma", i + 1), Tensor::full(&[b], 1.0)),
                    beta: p.add_zeros(format!("bc.bn{}.beta", i + 1), &[b]),
                };
            }
        }
        Self {
            params: p,
            running_mean: [vec![0.0; BC_HIDDEN], vec![0.0; BC_HIDDEN]],
            running_var: [vec![1.0; BC_HIDDEN], vec![1.0; BC_HIDDEN]],
            momentum: 0.1,
            eps: 1e-5,
            training: true,
            input_dim,
            lin,
            bn,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn eval(&mut self) {
        self.training = false;
    }

    pub fn train(&mut self) {
        self.training = true;
    }

    /// Training-mode logits on the tape plus the per-layer batch mean and
    /// biased variance.
    pub fn forward_train(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, BatchStats)> {
        let mut h = x;
        let mut stats: [(Vec<f64>, Vec<f64>); 2] = Default::default();
        for i in 0..2 {
            let (w, b) = self.lin[i];
            let z = tape.linear(h, vars[w.0], vars[b.0])?;
            let (y, m, v) = tape.batch_norm(z, vars[self.bn[i].gamma.0], vars[self.bn[i].beta.0], self.eps)?;
            stats[i] = (m, v);
            h = tape.relu(y);
        }
        let (w, b) = self.lin[2];
        Ok((tape.linear(h, vars[w.0], vars[b.0])?, stats))
    }

    /// Logits without recording gradients. Uses running statistics unless
    /// the model is in training mode.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(Error::dim(format!(
                "behaviour model expects {} features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        if self.training {
            let mut tape = Tape::new();
            let vars = tape.bind(&self.params);
            let xv = tape.leaf(x.clone());
            let (y, _) = self.forward_train(&mut tape, &vars, xv)?;
            return Ok(tape.value(y).clone());
        }
        let value = |id: ParamId| &self.params.get(id).value;
        let mut h = x.clone();
        for i in 0..2 {
            let (w, b) = self.lin[i];
            let mut z = numerics::linear(&h, value(w), value(b))?;
            let (g, be) = (value(self.bn[i].gamma).data(), value(self.bn[i].beta).data());
            let (m, v) = (&self.running_mean[i], &self.running_var[i]);
            let d = z.cols();
            for row in z.data_mut().chunks_mut(d) {
                for j in 0..d {
                    let y = (row[j] - m[j]) / (v[j] + self.eps).sqrt() * g[j] + be[j];
                    row[j] = y.max(0.0);
                }
            }
            h = z;
        }
        let (w, b) = self.lin[2];
        numerics::linear(&h, value(w), value(b))
    }

    // Exponential running statistics; the stored variance is unbiased.
    fn update_running(&mut self, stats: &[(Vec<f64>, Vec<f64>); 2], n: usize) {
        let unbias = n as f64 / (n as f64 - 1.0);
        let m = self.momentum;
        for (i, (mean, var)) in stats.iter().enumerate() {
            for j in 0..mean.len() {
                self.running_mean[i][j] = (1.0 - m) * self.running_mean[i][j] + m * mean[j];
                self.running_var[i][j] = (1.0 - m) * self.running_var[i][j] + m * var[j] * unbias;
            }
        }
    }
}

/// Mean cross-entropy of the training-mode network on `(x, labels)`.
pub fn bc_loss(tape: &mut Tape, model: &BcParams, vars: &[Var], x: &Tensor, labels: &[usize]) -> Result<Var> {
    let xv = tape.leaf(x.clone());
    let (logits, _) = model.forward_train(tape, vars, xv)?;
    tape.cross_entropy(logits, labels)
}

#[derive(Clone, Debug)]
pub struct TrainedBc {
    /// Eval-mode model.
    pub model: BcParams,
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Loss of the untrained model on the first minibatch.
    pub initial_loss: f64,
    pub warnings: Vec<String>,
}

/// Fits the clinician policy on raw observation rows with Adam. A trailing
/// single-row minibatch is folded into the previous one so batch statistics
/// stay defined.
pub fn train_behavior_cloning(x: &Tensor, actions: &[usize], cfg: &BcConfig) -> Result<TrainedBc> {
    cfg.validate()?;
    let n = x.rows();
    if actions.len() != n {
        return Err(Error::dim(format!("{} actions for {n} observations", actions.len())));
    }
    if n < 2 {
        return Err(Error::data("behaviour cloning needs at least two observations"));
    }
    if let Some(&a) = actions.iter().find(|&&a| a >= N_ACTIONS) {
        return Err(Error::data(format!("action {a} out of range")));
    }
    let mut warnings = Vec::new();
    if actions.iter().all(|&a| a == actions[0]) {
        warnings.push(format!("all {n} observations share action {}; the model is degenerate", actions[0]));
    }
    let mut model = BcParams::new(x.cols(), cfg.seed);
    model.momentum = cfg.bn_momentum;
    model.eps = cfg.bn_eps;
    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            decoupled: cfg.decoupled_weight_decay,
            ..AdamConfig::default()
        },
    );
    let d = x.cols();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut batches: Vec<Vec<usize>> = make_batches(n, cfg.batch_size, cfg.seed, epoch as u64)?
            .into_iter()
            .map(|b| b.indices)
            .collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        let mut acc = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            let xb = Tensor::matrix(idx.len(), d, data)?;
            let labels: Vec<usize> = idx.iter().map(|&i| actions[i]).collect();
            let mut tape = Tape::new();
            let vars = tape.bind(&model.params);
            let xv = tape.leaf(xb);
            let (logits, stats) = model.forward_train(&mut tape, &vars, xv)?;
            let l = tape.cross_entropy(logits, &labels)?;
            let loss = tape.value(l).item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "behaviour cloning loss {loss} at epoch {epoch}, batch {bi}"
                )));
            }
            if epoch == 0 && bi == 0 {
                initial_loss = loss;
            }
            let g = tape.backward(l)?;
            model.params.accumulate(&g.for_params(&vars, &model.params))?;
            opt.step(&mut model.params)?;
            model.update_running(&stats, idx.len());
            acc += loss;
        }
        epoch_loss.push(acc / batches.len() as f64);
    }
    model.eval();
    Ok(TrainedBc {
        model,
        epoch_loss,
        initial_loss,
        warnings,
    })
}

/// Floors every entry at [`PROB_FLOOR`] and renormalises.
pub fn floor_probs(p: &mut [f64]) {
    p.iter_mut().for_each(|v| *v = v.max(PROB_FLOOR));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
}

/// Behaviour distribution for one observation (eval mode), strictly positive.
pub fn bc_probs(obs: &[f64], model: &BcParams) -> Result<Vec<f64>> {
    let x = Tensor::matrix(1, obs.len(), obs.to_vec())?;
    Ok(bc_probs_batch(&x, model)?.pop().expect("one row"))
}

/// Row-wise [`bc_probs`].
pub fn bc_probs_batch(x: &Tensor, model: &BcParams) -> Result<Vec<Vec<f64>>> {
    if model.training {
        return Err(Error::config("behaviour probabilities need an eval-mode model"));
    }
    let logits = model.logits(x)?;
    (0..logits.rows())
        .map(|r| {
            let mut p = numerics::softmax(logits.row(r))?;
            floor_probs(&mut p);
            Ok(p)
        })
        .collect()
}

/// Top-1 agreement of the eval-mode model with `actions`.
pub fn bc_accuracy(model: &BcParams, x: &Tensor, actions: &[usize]) -> Result<f64> {
    let logits = model.logits(x)?;
    if actions.len() != logits.rows() || actions.is_empty() {
        return Err(Error::dim("accuracy needs one action per observation"));
    }
    let hits = (0..logits.rows())
        .filter(|&r| numerics::argmax(logits.row(r)) == actions[r])
        .count();
    Ok(hits as f64 / actions.len() as f64)
}
