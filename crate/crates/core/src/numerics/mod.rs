//! Dense numerics: tensors, reverse-mode gradients, Adam, and
//! finite-difference gradient verification.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, REL_ERROR_FLOOR};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{glorot_uniform, Param, ParamId, ParamSet};
pub use tape::{Grads, Segments, Tape, Var};
pub use tensor::{matmul, Tensor};

use crate::error::{Error, Result};

/// `x W + b` without recording gradients.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let y = tape.linear(xv, wv, bv)?;
    Ok(tape.value(y).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut t = x.clone();
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    t
}

/// Numerically stable softmax of a non-empty slice.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::dim("softmax of empty input"));
    }
    let mut out = v.to_vec();
    tape::softmax_in_place(&mut out);
    Ok(out)
}

/// `0.5 · Σ (pred − target)²`.
pub fn gaussian_nll_unit_var(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(0.5
        * pred
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
