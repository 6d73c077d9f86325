use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Cohort;
use crate::error::{Error, Result};

/// Indices into the parent cohort for each partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

// Largest-remainder allocation of `n` items over `fractions`; ties go to the
// earlier partition.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, i) in counts.iter_mut().zip(&ideal) {
        *c = i.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for k in order {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Outcome-stratified partition into train/validation/test.
///
/// Survivors and non-survivors are shuffled separately with `seed` and
/// allocated by largest remainder, so each split's class counts are within
/// one of the ideal. Each split lists indices in cohort order.
pub fn stratified_split(cohort: &Cohort, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for survived in [true, false] {
        let mut idx: Vec<usize> = cohort
            .trajectories
            .iter()
            .enumerate()
            .filter(|(_, t)| t.survived() == survived)
            .map(|(i, _)| i)
            .collect();
        let counts = allocate(idx.len(), &fractions);
        for (k, c) in counts.iter().enumerate() {
            if *c == 0 && fractions[k] > 0.0 {
                return Err(Error::data(format!(
                    "cohort too small to stratify: {} {} trajectories cannot cover every split",
                    idx.len(),
                    if survived { "surviving" } else { "non-surviving" }
                )));
            }
        }
        idx.shuffle(&mut rng);
        let mut start = 0;
        for (k, c) in counts.iter().enumerate() {
            parts[k].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

/// One batch of trajectory positions (indices into the split's list).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Shuffles `0..n` for `(seed, epoch)` and cuts it into batches of `b`; the
/// last batch may be smaller.
pub fn make_batches(n: usize, b: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if b == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if n == 0 {
        return Err(Error::data("cannot batch an empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(b)
        .map(|c| Batch {
            indices: c.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_by_largest_remainder() {
        assert_eq!(allocate(6, &[0.7, 0.15, 0.15]), [4, 1, 1]);
        assert_eq!(allocate(94, &[0.7, 0.15, 0.15]), [66, 14, 14]);
        assert_eq!(allocate(0, &[0.7, 0.15, 0.15]), [0, 0, 0]);
    }

    #[test]
    fn batch_sizes() {
        let sizes: Vec<usize> = make_batches(300, 128, 1, 0).unwrap().iter().map(Batch::len).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        assert_eq!(make_batches(10, 128, 1, 0).unwrap().len(), 1);
        assert!(make_batches(0, 128, 1, 0).is_err());
        assert!(make_batches(5, 0, 1, 0).is_err());
    }
}
