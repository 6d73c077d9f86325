use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use crate::error::{Error, Result};

/// Per-feature z-scoring fitted on a training population.
///
/// Invariant features are weighted per trajectory, variant features per
/// step. Constant features keep unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub invariant_mean: Vec<f64>,
    pub invariant_std: Vec<f64>,
    pub variant_mean: Vec<f64>,
    pub variant_std: Vec<f64>,
}

fn mean_std<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = rows.collect();
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; width];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in &rows {
        for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Standardizer {
    pub fn fit(trajectories: &[Trajectory]) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::data("cannot fit a standardizer on no trajectories"))?;
        let (invariant_mean, invariant_std) = mean_std(
            trajectories.iter().map(|t| t.invariant.as_slice()),
            first.invariant.len(),
        );
        let (variant_mean, variant_std) = mean_std(
            trajectories.iter().flat_map(|t| t.steps.iter().map(Vec::as_slice)),
            first.steps[0].len(),
        );
        Ok(Self {
            invariant_mean,
            invariant_std,
            variant_mean,
            variant_std,
        })
    }

    pub fn apply(&self, t: &Trajectory) -> Trajectory {
        let z = |v: &[f64], m: &[f64], s: &[f64]| -> Vec<f64> {
            v.iter().zip(m).zip(s).map(|((v, m), s)| (v - m) / s).collect()
        };
        Trajectory {
            id: t.id.clone(),
            invariant: z(&t.invariant, &self.invariant_mean, &self.invariant_std),
            steps: t
                .steps
                .iter()
                .map(|s| z(s, &self.variant_mean, &self.variant_std))
                .collect(),
            actions: t.actions.clone(),
            reward: t.reward,
        }
    }

    pub fn apply_all(&self, ts: &[Trajectory]) -> Vec<Trajectory> {
        ts.iter().map(|t| self.apply(t)).collect()
    }
}
