//! Patient trajectories: schema, ingestion, synthetic generation,
//! stratified splitting, batching, and dose discretisation.

mod actions;
mod csvio;
mod schema;
mod split;
mod standardize;
mod synthetic;
mod trajectory;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use actions::{discretize_actions, dose_bin, quartile_edges, QuartileEdges};
pub use csvio::{load_csv, read_csv, save_csv, write_csv};
pub use schema::{EncoderMode, FeatureSchema, WEIGHT_FEATURE};
pub use split::{make_batches, stratified_split, Batch, Split};
pub use standardize::Standardizer;
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use trajectory::{Trajectory, MAX_STEPS, N_ACTIONS};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema: FeatureSchema,
    pub trajectories: Vec<Trajectory>,
    /// Dose bin boundaries, when the source provides them.
    pub quartile_edges: Option<QuartileEdges>,
}

impl Cohort {
    pub fn new(schema: FeatureSchema, trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut ids = HashSet::new();
        for t in &trajectories {
            t.validate(&schema)?;
            if !ids.insert(t.id.as_str()) {
                return Err(Error::data(format!("duplicate trajectory id {}", t.id)));
            }
        }
        Ok(Self {
            schema,
            trajectories,
            quartile_edges: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Re-expresses every trajectory under the schema for `mode`. Moving body
    /// weight to the invariant side keeps its first-step value.
    pub fn to_mode(&self, mode: EncoderMode) -> Result<Cohort> {
        if mode == self.schema.mode() {
            return Ok(self.clone());
        }
        let target = self.schema.to_mode(mode)?;
        let trajectories = match mode {
            EncoderMode::Ae => {
                let pos = self.schema.variant_index(WEIGHT_FEATURE).expect("checked by to_mode");
                self.trajectories
                    .iter()
                    .map(|t| {
                        let mut t = t.clone();
                        let w = t.steps[0][pos];
                        t.steps.iter_mut().for_each(|s| {
                            s.remove(pos);
                        });
                        t.invariant.push(w);
                        t
                    })
                    .collect()
            }
            EncoderMode::Gnn => {
                let pos = self
                    .schema
                    .invariant_names()
                    .iter()
                    .position(|n| n == WEIGHT_FEATURE)
                    .expect("checked by to_mode");
                let at = 1.min(self.schema.n_variant());
                self.trajectories
                    .iter()
                    .map(|t| {
                        let mut t = t.clone();
                        let w = t.invariant.remove(pos);
                        t.steps.iter_mut().for_each(|s| s.insert(at, w));
                        t
                    })
                    .collect()
            }
        };
        Ok(Cohort {
            schema: target,
            trajectories,
            quartile_edges: self.quartile_edges.clone(),
        })
    }

    /// Sub-cohort with the trajectories at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Cohort {
        Cohort {
            schema: self.schema.clone(),
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            quartile_edges: self.quartile_edges.clone(),
        }
    }
}

/// Drops single-step trajectories, returning the kept cohort and the count
/// removed.
pub fn filter_short(cohort: &Cohort) -> (Cohort, usize) {
    let kept: Vec<Trajectory> = cohort
        .trajectories
        .iter()
        .filter(|t| t.len() >= 2)
        .cloned()
        .collect();
    let removed = cohort.len() - kept.len();
    (
        Cohort {
            schema: cohort.schema.clone(),
            trajectories: kept,
            quartile_edges: cohort.quartile_edges.clone(),
        },
        removed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n: usize,
    pub mortality: f64,
    pub mean_length: f64,
    pub median_length: f64,
}

pub fn cohort_stats(cohort: &Cohort) -> Result<CohortStats> {
    if cohort.is_empty() {
        return Err(Error::data("statistics of an empty cohort"));
    }
    let n = cohort.len();
    let deaths = cohort.trajectories.iter().filter(|t| !t.survived()).count();
    let mut lengths: Vec<usize> = cohort.trajectories.iter().map(Trajectory::len).collect();
    lengths.sort_unstable();
    let mean_length = lengths.iter().sum::<usize>() as f64 / n as f64;
    let median_length = if n % 2 == 1 {
        lengths[n / 2] as f64
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
    };
    Ok(CohortStats {
        n,
        mortality: deaths as f64 / n as f64,
        mean_length,
        median_length,
    })
}

#[cfg(test)]
mod tests;
