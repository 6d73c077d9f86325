use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three increasing boundaries per drug splitting nonzero doses into bins 1–4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileEdges {
    pub vaso: [f64; 3],
    pub fluid: [f64; 3],
}

impl QuartileEdges {
    /// Edges from the nonzero doses of a (training) population.
    pub fn from_doses(vaso: &[f64], fluid: &[f64]) -> Result<Self> {
        Ok(Self {
            vaso: quartile_edges(vaso)?,
            fluid: quartile_edges(fluid)?,
        })
    }
}

/// 25th/50th/75th percentiles of the nonzero entries of `doses`, with linear
/// interpolation between order statistics.
pub fn quartile_edges(doses: &[f64]) -> Result<[f64; 3]> {
    if let Some(d) = doses.iter().find(|d| **d < 0.0 || !d.is_finite()) {
        return Err(Error::data(format!("invalid dose {d}")));
    }
    let mut nz: Vec<f64> = doses.iter().copied().filter(|d| *d > 0.0).collect();
    if nz.is_empty() {
        return Err(Error::data("no nonzero doses to bin"));
    }
    nz.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (nz.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        nz[lo] + (nz[hi] - nz[lo]) * (pos - lo as f64)
    };
    let edges = [q(0.25), q(0.5), q(0.75)];
    check_edges(&edges)?;
    Ok(edges)
}

fn check_edges(edges: &[f64; 3]) -> Result<()> {
    if !(edges[0] < edges[1] && edges[1] < edges[2]) || edges[0] <= 0.0 {
        return Err(Error::data(format!(
            "quartile edges {edges:?} are not strictly increasing and positive"
        )));
    }
    Ok(())
}

/// Bin 0 for a zero dose, otherwise 1 + the number of edges strictly below
/// the dose (a dose on an edge falls in the lower bin).
pub fn dose_bin(dose: f64, edges: &[f64; 3]) -> Result<usize> {
    if dose < 0.0 || !dose.is_finite() {
        return Err(Error::data(format!("invalid dose {dose}")));
    }
    check_edges(edges)?;
    if dose == 0.0 {
        return Ok(0);
    }
    Ok(1 + edges.iter().filter(|e| **e < dose).count())
}

/// Joint action index `5 · vaso_bin + fluid_bin`.
pub fn discretize_actions(vaso_dose: f64, fluid_dose: f64, edges: &QuartileEdges) -> Result<usize> {
    Ok(5 * dose_bin(vaso_dose, &edges.vaso)? + dose_bin(fluid_dose, &edges.fluid)?)
}

/// Splits a joint action index into `(vaso_bin, fluid_bin)`.
pub fn split_action(action: usize) -> (usize, usize) {
    (action / 5, action % 5)
}
