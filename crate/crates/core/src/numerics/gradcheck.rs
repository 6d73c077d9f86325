//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    Ok(tape.value(y).item())
}

/// Largest relative error between the tape gradient of `f` at `x` and the
/// central difference `(f(x+h) − f(x−h)) / 2h`, over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval_scalar(&f, &plus)? - eval_scalar(&f, &minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over model parameters.
///
/// `f` receives the bound variables of every set in `sets` (same order) and
/// returns a scalar loss. When `per_tensor` is set, that many coordinates of
/// each tensor are sampled with `seed`; otherwise every coordinate is checked.
pub fn grad_check_params<F>(
    sets: &[&ParamSet],
    f: F,
    h: f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Vec<Var>]) -> Result<Var>,
{
    let run = |sets: &[ParamSet], want_grads: bool| -> Result<(f64, Vec<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let bound: Vec<Vec<Var>> = sets.iter().map(|s| tape.bind(s)).collect();
        let y = f(&mut tape, &bound)?;
        let value = tape.value(y).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(y)?;
        let grads = bound
            .iter()
            .zip(sets)
            .map(|(vars, s)| g.for_params(vars, s))
            .collect();
        Ok((value, grads))
    };

    let base: Vec<ParamSet> = sets.iter().map(|s| (*s).clone()).collect();
    let (_, analytic) = run(&base, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work = base.clone();
    for s in 0..base.len() {
        for p in 0..base[s].len() {
            let id = super::params::ParamId(p);
            let n = base[s].get(id).value.len();
            let coords: Vec<usize> = match per_tensor {
                Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            for c in coords {
                let orig = base[s].get(id).value.data()[c];
                work[s].get_mut(id).value.data_mut()[c] = orig + h;
                let (fp, _) = run(&work, false)?;
                work[s].get_mut(id).value.data_mut()[c] = orig - h;
                let (fm, _) = run(&work, false)?;
                work[s].get_mut(id).value.data_mut()[c] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                worst = worst.max(relative_error(analytic[s][p].data()[c], numeric));
            }
        }
    }
    Ok(worst)
}
