//! Synthetic sepsis-style cohorts.
//!
//! Each patient carries three hidden quantities: health `h` and two
//! treatment needs (vasopressor `nv`, fluid `nf`). The needs determine a
//! best dose bin per drug; every step the treatment deviates from it, health
//! drops. Clinicians (the behaviour policy) prefer doses close to the best
//! bins but explore around them. Survival is drawn from the health left
//! after the final treatment, with the threshold calibrated so that the
//! expected mortality equals the configured rate.
//!
//! Observed features are noisy affine views of the hidden state, with an
//! action-dependent drift so that next-step prediction benefits from
//! knowing the action taken.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::actions::{split_action, QuartileEdges};
use super::schema::{EncoderMode, FeatureSchema, WEIGHT_FEATURE};
use super::trajectory::{Trajectory, MAX_STEPS, N_ACTIONS};
use super::Cohort;
use crate::error::{Error, Result};

const HEALTH_FEATURE: &str = "o:SOFA";
const VASO_NEED_FEATURE: &str = "o:MeanBP";
const FLUID_NEED_FEATURE: &str = "o:Arterial_lactate";
const VASO_DOSE_FEATURE: &str = "o:max_dose_vaso";

const VASO_EDGES: [f64; 3] = [0.08, 0.2, 0.45];
const FLUID_EDGES: [f64; 3] = [50.0, 180.0, 530.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_traj: usize,
    pub mortality_rate: f64,
    /// Mean trajectory length; lengths are `2 + Binomial(18, p)`.
    pub length_mean: f64,
    /// Seeds the fixed feature loadings, separate from the sampling seed.
    pub dynamics_seed: u64,
    /// Health lost per unit of dose-bin distance from the best action.
    pub treatment_effect: f64,
    /// Inverse temperature of the clinicians' preference for the best bins.
    pub behavior_sharpness: f64,
    /// Slope of the death probability in final health.
    pub outcome_sharpness: f64,
    /// Scale of the action-dependent drift on observed features.
    pub action_drift: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_traj: 2000,
            mortality_rate: 0.06,
            length_mean: 13.3,
            dynamics_seed: 7,
            treatment_effect: 0.35,
            behavior_sharpness: 1.5,
            outcome_sharpness: 3.0,
            action_drift: 0.5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_traj == 0 {
            return Err(Error::config("n_traj must be at least 1"));
        }
        if !(self.mortality_rate > 0.0 && self.mortality_rate < 1.0) {
            return Err(Error::config("mortality_rate must lie in (0, 1)"));
        }
        if !(self.length_mean >= 2.0 && self.length_mean <= MAX_STEPS as f64) {
            return Err(Error::config("length_mean must lie in [2, 20]"));
        }
        for (name, v) in [
            ("treatment_effect", self.treatment_effect),
            ("behavior_sharpness", self.behavior_sharpness),
            ("outcome_sharpness", self.outcome_sharpness),
            ("action_drift", self.action_drift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Best dose bin for a need value.
fn best_bin(need: f64) -> usize {
    (2.0 + 1.5 * need).round().clamp(0.0, 4.0) as usize
}

fn action_distance(action: usize, best: (usize, usize)) -> f64 {
    let (v, f) = split_action(action);
    (v.abs_diff(best.0) + f.abs_diff(best.1)) as f64
}

/// Clinicians' action distribution given the hidden needs.
fn behavior_probs(nv: f64, nf: f64, sharpness: f64) -> [f64; N_ACTIONS] {
    let best = (best_bin(nv), best_bin(nf));
    let mut p = [0.0; N_ACTIONS];
    for (a, slot) in p.iter_mut().enumerate() {
        *slot = (-sharpness * action_distance(a, best)).exp();
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn sample_categorical(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

fn dose_for_bin(bin: usize, edges: &[f64; 3], rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = match bin {
        0 => return 0.0,
        1 => (0.0, edges[0]),
        2 => (edges[0], edges[1]),
        3 => (edges[1], edges[2]),
        _ => (edges[2], 2.0 * edges[2]),
    };
    // (lo, hi]: mirrors the lower-bin rule for doses on an edge
    hi - (hi - lo) * rng.random::<f64>()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// Loadings of one generic observed feature on (h, nv, nf) and the actions.
struct Loading {
    baseline: f64,
    scale: f64,
    mix: [f64; 3],
    persistence: f64,
    vaso_drift: f64,
    fluid_drift: f64,
    noise: f64,
}

enum Role {
    Health,
    VasoNeed,
    FluidNeed,
    VasoDose,
    Weight,
    Generic(Loading),
}

fn roles(schema: &FeatureSchema, cfg: &SyntheticConfig) -> Vec<Role> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dynamics_seed);
    schema
        .variant_names()
        .iter()
        .map(|name| {
            // draw for every feature so named roles do not shift the others
            let l = Loading {
                baseline: rng.random_range(-5.0..5.0),
                scale: rng.random_range(0.5..5.0),
                mix: [
                    0.5 * normal(&mut rng),
                    0.5 * normal(&mut rng),
                    0.5 * normal(&mut rng),
                ],
                persistence: rng.random_range(0.3..0.9),
                vaso_drift: cfg.action_drift * normal(&mut rng),
                fluid_drift: cfg.action_drift * normal(&mut rng),
                noise: rng.random_range(0.1..0.3),
            };
            match name.as_str() {
                HEALTH_FEATURE => Role::Health,
                VASO_NEED_FEATURE => Role::VasoNeed,
                FLUID_NEED_FEATURE => Role::FluidNeed,
                VASO_DOSE_FEATURE => Role::VasoDose,
                WEIGHT_FEATURE => Role::Weight,
                _ => Role::Generic(l),
            }
        })
        .collect()
}

/// Generates a cohort under the default graph-encoder schema. The result is
/// a pure function of `(config, seed)`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let schema = FeatureSchema::default_for(EncoderMode::Gnn);
    let roles = roles(&schema, config);
    let n_var = schema.n_variant();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let length_dist = Binomial::new(18, (config.length_mean - 2.0) / 18.0)
        .map_err(|e| Error::config(e.to_string()))?;

    let mut trajectories = Vec::with_capacity(config.n_traj);
    let mut final_health = Vec::with_capacity(config.n_traj);
    let mut outcome_draws = Vec::with_capacity(config.n_traj);
    for i in 0..config.n_traj {
        let len = 2 + length_dist.sample(&mut rng) as usize;
        let gender = f64::from(rng.random_bool(0.5) as u8);
        let age = (64.0 + 16.0 * normal(&mut rng)).clamp(18.0, 95.0);
        let readmission = f64::from(rng.random_bool(0.1) as u8);
        let mechvent = f64::from(rng.random_bool(0.3) as u8);
        let mut weight = (80.0 + 15.0 * normal(&mut rng)).clamp(40.0, 160.0);

        let mut h = normal(&mut rng) - 0.01 * (age - 64.0);
        let mut nv = normal(&mut rng);
        let mut nf = normal(&mut rng);
        let mut generic: Vec<f64> = roles
            .iter()
            .map(|r| match r {
                Role::Generic(l) => {
                    l.mix[0] * h + l.mix[1] * nv + l.mix[2] * nf + l.noise * normal(&mut rng)
                }
                _ => 0.0,
            })
            .collect();
        let mut vaso_dose = 0.0;

        let mut steps = Vec::with_capacity(len);
        let mut actions = Vec::with_capacity(len);
        for _ in 0..len {
            let mut obs = vec![0.0; n_var];
            for (j, role) in roles.iter().enumerate() {
                obs[j] = match role {
                    Role::Health => -h + 0.1 * normal(&mut rng),
                    Role::VasoNeed => -nv + 0.1 * normal(&mut rng),
                    Role::FluidNeed => nf + 0.1 * normal(&mut rng),
                    Role::VasoDose => vaso_dose,
                    Role::Weight => weight,
                    Role::Generic(l) => l.baseline + l.scale * generic[j],
                };
            }
            steps.push(obs);

            let probs = behavior_probs(nv, nf, config.behavior_sharpness);
            let a = sample_categorical(&probs, &mut rng);
            actions.push(a);
            let (vb, fb) = split_action(a);
            let dist = action_distance(a, (best_bin(nv), best_bin(nf)));

            h = 0.85 * h - config.treatment_effect * dist + 0.3 * normal(&mut rng);
            nv = 0.8 * nv + 0.6 * normal(&mut rng);
            nf = 0.8 * nf + 0.6 * normal(&mut rng);
            vaso_dose = dose_for_bin(vb, &VASO_EDGES, &mut rng);
            let fluid = dose_for_bin(fb, &FLUID_EDGES, &mut rng);
            weight += 0.002 * (fluid - 200.0) + 0.2 * normal(&mut rng);
            let vd = (vb as f64 - 2.0) / 2.0;
            let fd = (fb as f64 - 2.0) / 2.0;
            for (j, role) in roles.iter().enumerate() {
                if let Role::Generic(l) = role {
                    let target = l.mix[0] * h + l.mix[1] * nv + l.mix[2] * nf;
                    generic[j] = l.persistence * generic[j]
                        + (1.0 - l.persistence) * target
                        + l.vaso_drift * vd
                        + l.fluid_drift * fd
                        + l.noise * normal(&mut rng);
                }
            }
        }
        final_health.push(h);
        outcome_draws.push(rng.random::<f64>());
        trajectories.push(Trajectory {
            id: format!("p{i:05}"),
            invariant: vec![gender, age, readmission, mechvent],
            steps,
            actions,
            reward: 1.0,
        });
    }

    let k = config.outcome_sharpness;
    let death_prob = |theta: f64, h: f64| 1.0 / (1.0 + (-k * (theta - h)).exp());
    let mean_mortality =
        |theta: f64| final_health.iter().map(|h| death_prob(theta, *h)).sum::<f64>() / final_health.len() as f64;
    let (mut lo, mut hi) = (-100.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_mortality(mid) < config.mortality_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta = 0.5 * (lo + hi);
    for ((t, h), u) in trajectories.iter_mut().zip(&final_health).zip(&outcome_draws) {
        if *u < death_prob(theta, *h) {
            t.reward = -1.0;
        }
    }

    let mut cohort = Cohort::new(schema, trajectories)?;
    cohort.quartile_edges = Some(QuartileEdges {
        vaso: VASO_EDGES,
        fluid: FLUID_EDGES,
    });
    Ok(cohort)
}
