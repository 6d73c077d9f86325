//! Off-policy evaluation with weighted importance sampling, curve
//! smoothing and seed aggregation, and loss normalisation.

mod plot;

pub use plot::render_svg;

use serde::{Deserialize, Serialize};

use crate::cohort::{Trajectory, N_ACTIONS};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::policy::{bc_probs_batch, dbcq_select_action, eligible_actions, BcParams, QParams};
use crate::training::LatentDataset;

pub const EMA_ALPHA: f64 = 0.1;
pub const SOFTEN_EPSILON: f64 = 0.01;
/// Mean trajectory length used by the loss normalisation.
pub const MEAN_TRAJECTORY_LENGTH: f64 = 13.3;

/// Puts `1 − ε` on the highest-Q eligible action and spreads `ε` evenly
/// over the other 24.
pub fn soften_policy(q_values: &[f64], eligible: &[bool], epsilon: f64) -> Result<Vec<f64>> {
    if q_values.len() != N_ACTIONS || eligible.len() != N_ACTIONS {
        return Err(Error::dim("soften_policy works on 25 actions"));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config(format!("softening ε = {epsilon} outside [0, 1)")));
    }
    if !eligible.iter().any(|&e| e) {
        return Err(Error::data("soften_policy needs at least one eligible action"));
    }
    let mask: Vec<f64> = eligible.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    let chosen = dbcq_select_action(q_values, &mask, 1.0);
    let other = epsilon / (N_ACTIONS - 1) as f64;
    let mut p = vec![other; N_ACTIONS];
    p[chosen] = 1.0 - epsilon;
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStep {
    pub pi_e: f64,
    pub pi_b: f64,
    pub action: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTrajectory {
    pub steps: Vec<EvalStep>,
    /// Terminal reward.
    pub reward: f64,
}

impl EvalTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `γ^{T−1}·r`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        gamma.powi(self.len().saturating_sub(1) as i32) * self.reward
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WisConfig {
    pub gamma: f64,
    /// When false, returns are undiscounted.
    pub discounted: bool,
    /// Per-step ratio bounds; `None` disables clipping.
    pub clip: Option<[f64; 2]>,
    pub epsilon: f64,
}

impl Default for WisConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            discounted: true,
            clip: Some([1e-4, 1e4]),
            epsilon: SOFTEN_EPSILON,
        }
    }
}

impl WisConfig {
    fn effective_gamma(&self) -> f64 {
        if self.discounted {
            self.gamma
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WisReport {
    pub value: f64,
    /// Steps whose ratio hit a clip bound.
    pub clipped_steps: usize,
    pub total_weight: f64,
}

/// Weighted importance sampling with the default ratio clip.
pub fn wis(trajectories: &[EvalTrajectory], gamma: f64) -> Result<f64> {
    let cfg = WisConfig {
        gamma,
        ..WisConfig::default()
    };
    Ok(wis_report(trajectories, &cfg)?.value)
}

/// `Σ w_n G_n / Σ w_n` with `w_n = Π_t clip(π_e/π_b)`.
pub fn wis_report(trajectories: &[EvalTrajectory], cfg: &WisConfig) -> Result<WisReport> {
    if trajectories.is_empty() {
        return Err(Error::data("WIS needs at least one trajectory"));
    }
    let gamma = cfg.effective_gamma();
    let (mut num, mut den, mut clipped) = (0.0, 0.0, 0usize);
    for (n, tr) in trajectories.iter().enumerate() {
        let mut w = 1.0;
        for s in &tr.steps {
            if !(s.pi_b > 0.0 && s.pi_b <= 1.0 && s.pi_e >= 0.0 && s.pi_e <= 1.0) {
                return Err(Error::Data(format!(
                    "trajectory {n}: probabilities π_e = {}, π_b = {} outside range",
                    s.pi_e, s.pi_b
                )));
            }
            let mut r = s.pi_e / s.pi_b;
            if let Some([lo, hi]) = cfg.clip {
                if r < lo || r > hi {
                    clipped += 1;
                    r = r.clamp(lo, hi);
                }
            }
            w *= r;
        }
        num += w * tr.discounted_return(gamma);
        den += w;
    }
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::Numeric("degenerate weights".into()));
    }
    Ok(WisReport {
        value: num / den,
        clipped_steps: clipped,
        total_weight: den,
    })
}

/// `s_0 = x_0`, `s_t = α·x_t + (1 − α)·s_{t−1}`.
pub fn ema(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::data("cannot smooth an empty series"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!("EMA α = {alpha} outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut s = series[0];
    out.push(s);
    for &x in &series[1..] {
        s = alpha * x + (1.0 - alpha) * s;
        out.push(s);
    }
    Ok(out)
}

/// Pointwise mean and population standard deviation.
pub fn aggregate_seeds(curves: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = curves.first().ok_or_else(|| Error::data("no curves to aggregate"))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::dim("curves have different lengths"));
    }
    let k = curves.len() as f64;
    // offsets from the first curve keep identical inputs exact
    let mean: Vec<f64> = (0..first.len())
        .map(|i| first[i] + curves.iter().map(|c| c[i] - first[i]).sum::<f64>() / k)
        .collect();
    let std = (0..first.len())
        .map(|i| (curves.iter().map(|c| (c[i] - mean[i]).powi(2)).sum::<f64>() / k).sqrt())
        .collect();
    Ok((mean, std))
}

/// Average trajectory loss per feature and step: `loss / (13.3 · obs_dim)`.
pub fn normalize_loss(avg_trajectory_loss: f64, obs_dim: usize) -> Result<f64> {
    if obs_dim == 0 {
        return Err(Error::config("obs_dim must be positive"));
    }
    Ok(avg_trajectory_loss / (MEAN_TRAJECTORY_LENGTH * obs_dim as f64))
}

/// Evaluation scores of one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub iterations: Vec<usize>,
    pub raw: Vec<f64>,
    /// EMA with α = 0.1.
    pub smoothed: Vec<f64>,
}

#[derive(Serialize)]
struct WisRecord {
    iteration: usize,
    wis: f64,
}

impl EvalCurve {
    pub fn new(iterations: Vec<usize>, raw: Vec<f64>) -> Result<Self> {
        if iterations.len() != raw.len() {
            return Err(Error::dim("one score per evaluation iteration"));
        }
        let smoothed = if raw.is_empty() { Vec::new() } else { ema(&raw, EMA_ALPHA)? };
        Ok(Self {
            iterations,
            raw,
            smoothed,
        })
    }

    /// `{iteration, wis}` lines with the raw scores.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (&iteration, &wis) in self.iterations.iter().zip(&self.raw) {
            s.push_str(&serde_json::to_string(&WisRecord { iteration, wis }).expect("plain record"));
            s.push('\n');
        }
        s
    }
}

/// Smoothed per-seed curves with their pointwise mean and std.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedCurves {
    pub iterations: Vec<usize>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SeedCurves {
    pub fn from_runs(runs: &[(u64, EvalCurve)]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::data("no runs to aggregate"))?;
        if runs.iter().any(|(_, c)| c.iterations != first.1.iterations) {
            return Err(Error::dim("runs were evaluated at different iterations"));
        }
        let per_seed: Vec<Vec<f64>> = runs.iter().map(|(_, c)| c.smoothed.clone()).collect();
        let (mean, std) = aggregate_seeds(&per_seed)?;
        Ok(Self {
            iterations: first.1.iterations.clone(),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            per_seed,
            mean,
            std,
        })
    }

    /// `iteration,mean,std,seed_<k>...`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,mean,std");
        for k in &self.seeds {
            s.push_str(&format!(",seed_{k}"));
        }
        s.push('\n');
        for i in 0..self.iterations.len() {
            s.push_str(&format!("{},{},{}", self.iterations[i], self.mean[i], self.std[i]));
            for c in &self.per_seed {
                s.push_str(&format!(",{}", c[i]));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Data(format!("curve CSV header: {e}")))?.clone();
        if headers.len() < 3 || &headers[0] != "iteration" || &headers[1] != "mean" || &headers[2] != "std" {
            return Err(Error::data("curve CSV must start with iteration,mean,std"));
        }
        let seeds = headers
            .iter()
            .skip(3)
            .map(|h| {
                h.strip_prefix("seed_")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad seed column {h:?}")))
            })
            .collect::<Result<Vec<u64>>>()?;
        let mut out = Self {
            iterations: Vec::new(),
            seeds,
            per_seed: vec![Vec::new(); headers.len() - 3],
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("curve CSV line {}: {e}", line + 2)))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("curve CSV line {}, column {}", line + 2, i + 1)))
            };
            out.iterations.push(
                rec[0]
                    .parse()
                    .map_err(|_| Error::Data(format!("curve CSV line {}: bad iteration", line + 2)))?,
            );
            out.mean.push(num(1)?);
            out.std.push(num(2)?);
            for k in 0..out.per_seed.len() {
                let v = num(3 + k)?;
                out.per_seed[k].push(v);
            }
        }
        Ok(out)
    }
}

/// Per-trajectory inputs for WIS with the behaviour probability of every
/// logged action computed once.
#[derive(Clone, Debug)]
pub struct WisEvaluator {
    pub config: WisConfig,
    pub tau: f64,
    states: Vec<Tensor>,
    actions: Vec<Vec<usize>>,
    pi_b: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

impl WisEvaluator {
    /// `raw` holds the behaviour model's observations for the same
    /// trajectories as `latent`, in the same order.
    pub fn new(bc: &BcParams, latent: &LatentDataset, raw: &[Trajectory], tau: f64, config: WisConfig) -> Result<Self> {
        if latent.trajectories.len() != raw.len() || raw.is_empty() {
            return Err(Error::Data(format!(
                "{} latent trajectories but {} raw trajectories",
                latent.trajectories.len(),
                raw.len()
            )));
        }
        let mut out = Self {
            config,
            tau,
            states: Vec::with_capacity(raw.len()),
            actions: Vec::with_capacity(raw.len()),
            pi_b: Vec::with_capacity(raw.len()),
            rewards: Vec::with_capacity(raw.len()),
        };
        for (lt, rt) in latent.trajectories.iter().zip(raw) {
            if lt.id != rt.id || lt.len() != rt.len() || lt.actions != rt.actions {
                return Err(Error::Data(format!(
                    "latent trajectory {} is not aligned with raw trajectory {}",
                    lt.id, rt.id
                )));
            }
            let obs: Vec<Vec<f64>> = (0..rt.len()).map(|t| rt.observation(t)).collect();
            let probs = bc_probs_batch(&Tensor::from_rows(&obs)?, bc)?;
            out.pi_b.push(probs.iter().zip(&rt.actions).map(|(p, &a)| p[a]).collect());
            out.states.push(Tensor::from_rows(&lt.states)?);
            out.actions.push(rt.actions.clone());
            out.rewards.push(rt.reward);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Trajectories scored with `pi_e(states, actions)`, which returns the
    /// evaluated probability of each logged action.
    pub fn trajectories_with<F>(&self, pi_e: F) -> Result<Vec<EvalTrajectory>>
    where
        F: Fn(&Tensor, &[usize]) -> Result<Vec<f64>> + Sync,
    {
        let idx: Vec<usize> = (0..self.len()).collect();
        crate::par::map(&idx, |&i| -> Result<EvalTrajectory> {
            let pe = pi_e(&self.states[i], &self.actions[i])?;
            Ok(EvalTrajectory {
                steps: (0..pe.len())
                    .map(|t| EvalStep {
                        pi_e: pe[t],
                        pi_b: self.pi_b[i][t],
                        action: self.actions[i][t],
                    })
                    .collect(),
                reward: self.rewards[i],
            })
        })
        .into_iter()
        .collect()
    }

    /// Softened dBCQ policy probabilities of the logged actions.
    pub fn policy_trajectories(&self, q: &QParams) -> Result<Vec<EvalTrajectory>> {
        let (tau, eps) = (self.tau, self.config.epsilon);
        self.trajectories_with(|s, actions| {
            let qv = q.q_values(s)?;
            let bp = q.behavior_probs(s)?;
            (0..s.rows())
                .map(|t| Ok(soften_policy(qv.row(t), &eligible_actions(bp.row(t), tau), eps)?[actions[t]]))
                .collect()
        })
    }

    pub fn evaluate(&self, q: &QParams) -> Result<f64> {
        Ok(wis_report(&self.policy_trajectories(q)?, &self.config)?.value)
    }

    /// Score of the uniform-random policy.
    pub fn evaluate_uniform(&self) -> Result<f64> {
        let t = self.trajectories_with(|s, _| Ok(vec![1.0 / N_ACTIONS as f64; s.rows()]))?;
        Ok(wis_report(&t, &self.config)?.value)
    }

    /// Score of the behaviour model itself (every ratio is one).
    pub fn evaluate_behavior(&self) -> Result<f64> {
        let t = self.trajectories_with(|s, _| Ok(vec![1.0; s.rows()]))?;
        let same: Vec<EvalTrajectory> = t
            .into_iter()
            .map(|mut tr| {
                tr.steps.iter_mut().for_each(|st| st.pi_e = st.pi_b);
                tr
            })
            .collect();
        Ok(wis_report(&same, &self.config)?.value)
    }
}

/// WIS of the softened dBCQ policy on a held-out set.
pub fn wis_evaluator(
    q: &QParams,
    bc: &BcParams,
    test: &LatentDataset,
    raw: &[Trajectory],
    tau: f64,
    config: &WisConfig,
) -> Result<f64> {
    WisEvaluator::new(bc, test, raw, tau, config.clone())?.evaluate(q)
}

#[cfg(test)]
mod tests;
