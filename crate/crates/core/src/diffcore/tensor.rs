use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Shapes have at most two axes. A shape of `[]` is a scalar and `[n]` is
/// treated as a single row wherever an operation needs a matrix view.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 || shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "tensor shape {shape:?} must have at most two positive axes"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    /// `rows × cols` matrix from row-major data. Panics on length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self::matrix(1, data.len(), data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::matrix(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// `(rows, cols)` view of the shape.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("tensor rank is at most 2"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let (r, c) = self.dims();
        (0..r).map(|i| self.data[i * c..(i + 1) * c].to_vec()).collect()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row_slice(i));
        }
        Tensor::matrix(idx.len(), c, out)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Tensor {
        let (r, c) = self.dims();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::matrix(r, idx.len(), out)
    }

    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::dim("vstack", &[c], p.shape()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::matrix(rows, c, data))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Per-column means.
    pub fn col_means(&self) -> Vec<f64> {
        let (r, c) = self.dims();
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in m.iter_mut().zip(self.row_slice(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= r as f64);
        m
    }
}

/// Row-major `C = A · B` through a blocked GEMM kernel.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, 0.0);
}

/// General strided GEMM accumulating into `c` with factor `beta` on the old value.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides and dimensions describe in-bounds views of the
    // slices; callers pass contiguous row-major (or transposed) buffers
    // whose extents were shape-checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
