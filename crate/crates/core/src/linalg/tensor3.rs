use super::{probe, LinalgError, Result, Scalar, Tensor2};

/// Batched row-major matrices, `batch x rows x cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3<T: Scalar = f64> {
    batch: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(batch: usize, rows: usize, cols: usize) -> Self {
        probe::record::<T>(batch * rows, cols);
        Self {
            batch,
            rows,
            cols,
            data: vec![T::zero(); batch * rows * cols],
        }
    }

    pub fn from_vec(batch: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * rows * cols {
            return Err(LinalgError::BadLength {
                op: "tensor3",
                len: data.len(),
                rows: batch * rows,
                cols,
            });
        }
        Ok(Self {
            batch,
            rows,
            cols,
            data,
        })
    }

    /// Splits a `(batch·rows) x cols` matrix into `batch` slices.
    pub fn from_stacked(batch: usize, t: Tensor2<T>) -> Result<Self> {
        if batch == 0 || t.rows() % batch != 0 {
            return Err(LinalgError::ShapeMismatch {
                op: "from_stacked",
                left: t.shape(),
                right: (batch, 0),
            });
        }
        let rows = t.rows() / batch;
        let cols = t.cols();
        Self::from_vec(batch, rows, cols, t.into_vec())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, b: usize, i: usize, j: usize) -> T {
        self.data[(b * self.rows + i) * self.cols + j]
    }

    /// Views the batch as one `(batch·rows) x cols` matrix (copies).
    pub fn to_stacked(&self) -> Tensor2<T> {
        Tensor2::from_vec(self.batch * self.rows, self.cols, self.data.clone()).expect("same length")
    }

    pub fn into_stacked(self) -> Tensor2<T> {
        Tensor2::from_vec(self.batch * self.rows, self.cols, self.data).expect("same length")
    }

    pub fn slice(&self, b: usize) -> Tensor2<T> {
        let n = self.rows * self.cols;
        Tensor2::from_vec(self.rows, self.cols, self.data[b * n..(b + 1) * n].to_vec()).expect("same length")
    }
}
