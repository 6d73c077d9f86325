use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::schema::FeatureSchema;
use super::trajectory::{Trajectory, N_ACTIONS};
use super::Cohort;
use crate::error::{Error, Result};

fn expected_header(schema: &FeatureSchema) -> Vec<String> {
    let mut h = vec!["traj_id".to_string(), "step".to_string()];
    h.extend(schema.invariant_names().iter().cloned());
    h.extend(schema.variant_names().iter().cloned());
    h.push("action".into());
    h.push("reward".into());
    h
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::data(format!("{other:?}")),
    }
}

struct Row {
    line: u64,
    step: usize,
    invariant: Vec<f64>,
    variant: Vec<f64>,
    action: usize,
    reward: Option<f64>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Cohort> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

/// Parses a cohort file. Rows are grouped by `traj_id` (first-appearance
/// order) and sorted by `step`; every violation names its line.
pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let expected = expected_header(schema);
    if header != expected {
        if let Some(unknown) = header.iter().find(|h| !expected.contains(h)) {
            return Err(Error::data(format!("line 1: unknown column {unknown}")));
        }
        if let Some(missing) = expected.iter().find(|h| !header.contains(h)) {
            return Err(Error::data(format!("line 1: missing column {missing}")));
        }
        return Err(Error::data("line 1: columns out of order"));
    }
    let n_inv = schema.n_invariant();
    let n_var = schema.n_variant();

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::data(format!("line {line}: malformed row ({})", csv_err(e)))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::data(format!("line {line}: {msg}"));
        let num = |i: usize| -> Result<f64> {
            let s = &rec[i];
            if s.is_empty() {
                return Err(bad(format!("missing value for {}", expected[i])));
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("invalid number {s:?} for {}", expected[i])))
        };
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(bad("missing traj_id".into()));
        }
        let step: usize = rec[1]
            .parse()
            .map_err(|_| bad(format!("invalid step {:?}", &rec[1])))?;
        let invariant = (0..n_inv).map(|i| num(2 + i)).collect::<Result<Vec<_>>>()?;
        let variant = (0..n_var)
            .map(|i| num(2 + n_inv + i))
            .collect::<Result<Vec<_>>>()?;
        let a_col = 2 + n_inv + n_var;
        let action: usize = rec[a_col]
            .parse()
            .map_err(|_| bad(format!("invalid action {:?}", &rec[a_col])))?;
        if action >= N_ACTIONS {
            return Err(bad(format!("action {action} outside [0, 24]")));
        }
        let reward = match &rec[a_col + 1] {
            "" => None,
            s => {
                let r: f64 = s.parse().map_err(|_| bad(format!("invalid reward {s:?}")))?;
                if r != 1.0 && r != -1.0 {
                    return Err(bad(format!("reward {s} is not ±1")));
                }
                Some(r)
            }
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row {
            line,
            step,
            invariant,
            variant,
            action,
            reward,
        });
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).expect("grouped above");
        rows.sort_by_key(|r| r.step);
        for (i, r) in rows.iter().enumerate() {
            if r.step != i {
                return Err(Error::data(format!(
                    "line {}: trajectory {id} has non-contiguous steps (expected {i}, found {})",
                    r.line, r.step
                )));
            }
            if r.invariant != rows[0].invariant {
                return Err(Error::data(format!(
                    "line {}: time-invariant values change within trajectory {id}",
                    r.line
                )));
            }
        }
        let last = rows.last().expect("non-empty group");
        if let Some(r) = rows[..rows.len() - 1].iter().find(|r| r.reward.is_some()) {
            return Err(Error::data(format!(
                "line {}: reward given before the final step of {id}",
                r.line
            )));
        }
        let reward = last.reward.ok_or_else(|| {
            Error::data(format!("line {}: final step of {id} has no reward", last.line))
        })?;
        let traj = Trajectory {
            id: id.clone(),
            invariant: rows[0].invariant.clone(),
            steps: rows.iter().map(|r| r.variant.clone()).collect(),
            actions: rows.iter().map(|r| r.action).collect(),
            reward,
        };
        traj.validate(schema)
            .map_err(|e| Error::data(format!("line {}: {e}", last.line)))?;
        trajectories.push(traj);
    }
    Cohort::new(schema.clone(), trajectories)
}

pub fn save_csv(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(cohort, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes one row per step; floats use the shortest exact representation.
pub fn write_csv<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(expected_header(&cohort.schema)).map_err(csv_err)?;
    for t in &cohort.trajectories {
        for (s, step) in t.steps.iter().enumerate() {
            let mut rec: Vec<String> = Vec::with_capacity(4 + t.invariant.len() + step.len());
            rec.push(t.id.clone());
            rec.push(s.to_string());
            rec.extend(t.invariant.iter().map(|v| v.to_string()));
            rec.extend(step.iter().map(|v| v.to_string()));
            rec.push(t.actions[s].to_string());
            rec.push(if s + 1 == t.len() {
                format!("{}", t.reward as i64)
            } else {
                String::new()
            });
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
