use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WEIGHT_FEATURE: &str = "o:Weight_kg";

const DEFAULT_INVARIANT: [&str; 4] = ["o:gender", "o:age", "o:re_admission", "o:mechvent"];

// The first 34 time-variant variables of the reference feature table. The
// table lists 43, the decoder width is 34; override via a custom schema.
const DEFAULT_VARIANT: [&str; 34] = [
    "o:max_dose_vaso",
    "o:Weight_kg",
    "o:GCS",
    "o:HR",
    "o:SysBP",
    "o:MeanBP",
    "o:DiaBP",
    "o:RR",
    "o:Temp_C",
    "o:FiO2_1",
    "o:Potassium",
    "o:Sodium",
    "o:Chloride",
    "o:Glucose",
    "o:Magnesium",
    "o:Calcium",
    "o:Hb",
    "o:WBC_count",
    "o:Platelets_count",
    "o:PTT",
    "o:PT",
    "o:Arterial_pH",
    "o:paO2",
    "o:paCO2",
    "o:Arterial_BE",
    "o:HCO3",
    "o:Arterial_lactate",
    "o:SOFA",
    "o:SIRS",
    "o:Shock_Index",
    "o:PaO2_FiO2",
    "o:cumulated_balance",
    "o:SpO2",
    "o:BUN",
];

/// Which encoder family the schema feeds. The MLP baseline treats body
/// weight as time-invariant, the graph encoders as time-variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Ae,
    Gnn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    invariant_names: Vec<String>,
    variant_names: Vec<String>,
    mode: EncoderMode,
}

impl FeatureSchema {
    pub fn new(
        invariant_names: Vec<String>,
        variant_names: Vec<String>,
        mode: EncoderMode,
    ) -> Result<Self> {
        if variant_names.is_empty() {
            return Err(Error::config("schema needs at least one time-variant feature"));
        }
        let mut seen = std::collections::HashSet::new();
        for n in invariant_names.iter().chain(&variant_names) {
            if !seen.insert(n.as_str()) {
                return Err(Error::config(format!("feature {n} listed twice")));
            }
            if matches!(n.as_str(), "traj_id" | "step" | "action" | "reward") {
                return Err(Error::config(format!("feature name {n} is reserved")));
            }
        }
        Ok(Self {
            invariant_names,
            variant_names,
            mode,
        })
    }

    /// 4 invariant + 34 variant features (GNN) or 5 + 33 (AE).
    pub fn default_for(mode: EncoderMode) -> Self {
        let s = Self {
            invariant_names: DEFAULT_INVARIANT.iter().map(|s| s.to_string()).collect(),
            variant_names: DEFAULT_VARIANT.iter().map(|s| s.to_string()).collect(),
            mode: EncoderMode::Gnn,
        };
        s.to_mode(mode).expect("default schema contains body weight")
    }

    /// Moves body weight to the side `mode` expects. Invariant features keep
    /// their order; weight is appended when it becomes invariant and
    /// re-inserted at index 1 of the variant list when it becomes variant.
    pub fn to_mode(&self, mode: EncoderMode) -> Result<Self> {
        if mode == self.mode {
            return Ok(self.clone());
        }
        let mut inv = self.invariant_names.clone();
        let mut var = self.variant_names.clone();
        match mode {
            EncoderMode::Ae => {
                let pos = var
                    .iter()
                    .position(|n| n == WEIGHT_FEATURE)
                    .ok_or_else(|| Error::config("schema has no time-variant body weight"))?;
                inv.push(var.remove(pos));
            }
            EncoderMode::Gnn => {
                let pos = inv
                    .iter()
                    .position(|n| n == WEIGHT_FEATURE)
                    .ok_or_else(|| Error::config("schema has no time-invariant body weight"))?;
                var.insert(1.min(var.len()), inv.remove(pos));
            }
        }
        Self::new(inv, var, mode)
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    pub fn invariant_names(&self) -> &[String] {
        &self.invariant_names
    }

    pub fn variant_names(&self) -> &[String] {
        &self.variant_names
    }

    pub fn n_invariant(&self) -> usize {
        self.invariant_names.len()
    }

    pub fn n_variant(&self) -> usize {
        self.variant_names.len()
    }

    /// Width of the decoder output: the time-variant features.
    pub fn obs_dim(&self) -> usize {
        self.n_variant()
    }

    /// Width of a full observation (variant ⊕ invariant).
    pub fn n_features(&self) -> usize {
        self.n_invariant() + self.n_variant()
    }

    pub fn variant_index(&self, name: &str) -> Option<usize> {
        self.variant_names.iter().position(|n| n == name)
    }

    /// Stable 64-bit FNV-1a digest of mode and feature names, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(match self.mode {
            EncoderMode::Ae => b"ae",
            EncoderMode::Gnn => b"gnn",
        });
        for n in &self.invariant_names {
            feed(b"|i:");
            feed(n.as_bytes());
        }
        for n in &self.variant_names {
            feed(b"|v:");
            feed(n.as_bytes());
        }
        format!("{h:016x}")
    }
}
