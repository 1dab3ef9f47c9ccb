use crate::error::{Error, Result};

/// Compressed sparse row matrix with nonnegative structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets. Duplicate coordinates are
    /// rejected; columns within a row end up sorted.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Contract(format!(
                    "entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::Contract(format!("duplicate entry ({r}, {c})")));
            }
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite entry at ({r}, {c})")));
            }
            prev = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row(r).1.iter().sum())
            .collect()
    }

    /// Scales each row to sum to one. Fails on an empty or zero-sum row.
    pub fn row_normalized(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for r in 0..self.n_rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            let total: f64 = values[span.clone()].iter().sum();
            if total <= 0.0 {
                return Err(Error::Contract(format!(
                    "row {r} has zero sum and cannot be normalized"
                )));
            }
            for v in &mut values[span] {
                *v /= total;
            }
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] = v;
            }
        }
        out
    }

    /// `out = self * x` for a dense row-major `x` with `width` columns.
    pub(crate) fn spmm(&self, x: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols * width);
        debug_assert_eq!(out.len(), self.n_rows * width);
        for r in 0..self.n_rows {
            let dst = &mut out[r * width..(r + 1) * width];
            dst.fill(0.0);
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let src = &x[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    /// `out += self^T * y`.
    pub(crate) fn spmm_transpose_acc(&self, y: &[f64], width: usize, out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.n_rows * width);
        debug_assert_eq!(out.len(), self.n_cols * width);
        for r in 0..self.n_rows {
            let src = &y[r * width..(r + 1) * width];
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_rows() {
        let m = CsrMatrix::from_triplets(1, 3, vec![(0, 0, 1.0), (0, 1, 1.0), (0, 2, 2.0)])
            .unwrap()
            .row_normalized()
            .unwrap();
        assert_eq!(m.row(0).1, &[0.25, 0.25, 0.5]);
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0)]).unwrap();
        assert!(matches!(m.row_normalized(), Err(Error::Contract(_))));
    }

    #[test]
    fn duplicates_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]).is_err());
    }
}
