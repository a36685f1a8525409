use crate::compute::{ComputeError, Tensor};
use crate::Real;

/// Compressed sparse row matrix.
///
/// Column indices are strictly increasing within each row and offsets are
/// monotone, which every constructor checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseMatrix<T> {
    pub fn new(
        n_cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self, ComputeError> {
        let bad = |m: &str| Err(ComputeError::InvalidSparse(m.to_string()));
        if offsets.is_empty() || offsets[0] != 0 {
            return bad("offsets must start at 0");
        }
        if *offsets.last().unwrap() != indices.len() || indices.len() != values.len() {
            return bad("offsets, indices and values disagree on nnz");
        }
        for (r, w) in offsets.windows(2).enumerate() {
            if w[0] > w[1] {
                return bad(&format!("offsets decrease at row {r}"));
            }
            let cols = &indices[w[0]..w[1]];
            if cols.iter().any(|&c| c >= n_cols) {
                return bad(&format!("column index out of range in row {r}"));
            }
            if cols.windows(2).any(|p| p[0] >= p[1]) {
                return bad(&format!("column indices not strictly sorted in row {r}"));
            }
        }
        Ok(Self {
            n_rows: offsets.len() - 1,
            n_cols,
            offsets,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, T)],
    ) -> Result<Self, ComputeError> {
        let mut sorted: Vec<_> = triplets.to_vec();
        if let Some(&(r, c, _)) = sorted.iter().find(|&&(r, c, _)| r >= n_rows || c >= n_cols) {
            return Err(ComputeError::InvalidSparse(format!(
                "triplet ({r}, {c}) outside {n_rows}x{n_cols}"
            )));
        }
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0usize; n_rows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                let end = values.len() - 1;
                values[end] = values[end] + v;
                continue;
            }
            indices.push(c);
            values.push(v);
            offsets[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            offsets[r + 1] += offsets[r];
        }
        Self::new(n_cols, offsets, indices, values)
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    /// Entry `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> T {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(T::zero(), |k| vals[k])
    }

    pub fn cast<U: Real>(&self) -> SparseMatrix<U> {
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            offsets: self.offsets.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.n_rows == self.n_cols
            && (0..self.n_rows).all(|r| {
                let (cols, vals) = self.row(r);
                cols.iter()
                    .zip(vals)
                    .all(|(&c, &v)| (self.get(c, r) - v).abs() <= tol && self.row(c).0.binary_search(&r).is_ok())
            })
    }
}
