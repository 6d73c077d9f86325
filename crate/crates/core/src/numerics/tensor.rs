use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Vectors have a one-element shape, matrices two. Higher ranks are never
/// needed by the pipeline and are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::dim(format!("unsupported rank {}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    /// Rows when viewed as a matrix; a vector is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on raw row-major slices.
/// Transposition is expressed through strides, no copies are made.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // a is m×k (or k×m when transposed), b is k×n (or n×k).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized by the callers for the given m, k, n and the
    // strides above address only elements inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.shape.len() != 2 || a.cols() != b.rows() {
        return Err(Error::dim(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, 0.0);
    let shape = if a.is_vector() { vec![n] } else { vec![m, n] };
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!((v.rows(), v.cols()), (1, 2));
    }

    #[test]
    fn transposed_gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, &mut c, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 4 + j];
                }
                assert!((c[i * 4 + j] - s).abs() < 1e-12);
            }
        }
        // aᵀ (3x2) · c (2x4) through strides
        let mut d = vec![0.0; 12];
        gemm(3, 2, 4, &a, true, &c, false, &mut d, 0.0);
        for i in 0..3 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..2 {
                    s += a[p * 3 + i] * c[p * 4 + j];
                }
                assert!((d[i * 4 + j] - s).abs() < 1e-12);
            }
        }
    }
}
