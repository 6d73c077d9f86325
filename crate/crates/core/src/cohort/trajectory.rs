use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 25;
pub const MAX_STEPS: usize = 20;

/// One patient's logged treatment episode.
///
/// `actions[t]` is administered after observing `steps[t]`; the terminal
/// reward is +1 for survival and −1 otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub invariant: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn survived(&self) -> bool {
        self.reward > 0.0
    }

    /// Full observation at step `t`: time-variant then time-invariant values.
    pub fn observation(&self, t: usize) -> Vec<f64> {
        let mut o = self.steps[t].clone();
        o.extend_from_slice(&self.invariant);
        o
    }

    /// Checks shape and value constraints. Single-step trajectories pass
    /// here; `filter_short` removes them before modelling.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let fail = |msg: String| Err(Error::data(format!("trajectory {}: {msg}", self.id)));
        if self.steps.is_empty() || self.steps.len() > MAX_STEPS {
            return fail(format!("length {} outside [1, {MAX_STEPS}]", self.steps.len()));
        }
        if self.actions.len() != self.steps.len() {
            return fail(format!(
                "{} actions for {} steps",
                self.actions.len(),
                self.steps.len()
            ));
        }
        if self.invariant.len() != schema.n_invariant() {
            return fail(format!(
                "{} invariant values, schema has {}",
                self.invariant.len(),
                schema.n_invariant()
            ));
        }
        if let Some(s) = self.steps.iter().find(|s| s.len() != schema.n_variant()) {
            return fail(format!(
                "{} variant values, schema has {}",
                s.len(),
                schema.n_variant()
            ));
        }
        if let Some(a) = self.actions.iter().find(|&&a| a >= N_ACTIONS) {
            return fail(format!("action {a} outside [0, 24]"));
        }
        if self.reward != 1.0 && self.reward != -1.0 {
            return fail(format!("reward {} is not ±1", self.reward));
        }
        let finite = self.invariant.iter().chain(self.steps.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return fail("non-finite feature value".into());
        }
        Ok(())
    }
}
