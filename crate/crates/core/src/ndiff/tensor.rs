use crate::error::{ensure, Result};

/// Dense row-major matrix of `f64`. Vectors are `1 x n` or `n x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Shape,
            "buffer of length {} cannot be viewed as {}x{}",
            data.len(),
            rows,
            cols
        );
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            ensure!(r.len() == cols, Shape, "ragged rows: {} vs {}", r.len(), cols);
            data.extend_from_slice(r);
        }
        Ok(Tensor { rows: rows.len(), cols, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self (m x k) @ other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        ensure!(
            self.cols == other.rows,
            Shape,
            "matmul {}x{} @ {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { rows: m, cols: n, data: out })
    }

    /// `self^T (k x m)^T @ other (m x n)` without materializing the transpose.
    pub(crate) fn t_matmul(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.rows, other.rows);
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; k * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &other.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor { rows: k, cols: n, data: out }
    }

    /// `self (m x n) @ other^T` where `other` is `k x n`.
    pub(crate) fn matmul_t(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.cols, other.cols);
        let (m, n, k) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let a_row = &self.data[i * n..(i + 1) * n];
            for j in 0..k {
                let b_row = &other.data[j * n..(j + 1) * n];
                out[i * k + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor { rows: m, cols: k, data: out }
    }

    /// Add a `1 x cols` row to every row in place.
    pub fn add_row_inplace(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        for r in self.data.chunks_mut(self.cols) {
            for (x, b) in r.iter_mut().zip(row) {
                *x += b;
            }
        }
    }

    /// Concatenate two matrices with the same number of rows side by side.
    pub fn hcat(&self, other: &Tensor) -> Result<Tensor> {
        ensure!(self.rows == other.rows, Shape, "hcat rows {} vs {}", self.rows, other.rows);
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Tensor { rows: self.rows, cols, data })
    }

    /// Gather a subset of rows.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { rows: idx.len(), cols: self.cols, data }
    }
}
