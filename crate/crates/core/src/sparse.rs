//! Compressed sparse row matrices used for contact layers and for
//! neighbor aggregation on the tape.

use rayon::prelude::*;

/// Row-major compressed sparse matrix with `f64` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

// Rows shorter than this are not worth a rayon split.
const PAR_MIN_ROWS: usize = 4096;

impl Csr {
    /// Builds a matrix from `(row, col, weight)` triplets. Duplicate entries
    /// are summed; within a row, columns end up sorted.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(u32, u32, f64)]) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, _, _) in triplets {
            counts[r as usize + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut cols = vec![0u32; triplets.len()];
        let mut w = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = &mut fill[r as usize];
            cols[*slot] = c;
            w[*slot] = v;
            *slot += 1;
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut weights = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(u32, f64)> = Vec::new();
        for r in 0..n_rows {
            row.clear();
            row.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], w[k])));
            row.sort_by_key(|&(c, _)| c);
            for &(c, v) in &row {
                if indices.len() > indptr[r] && *indices.last().unwrap() == c {
                    *weights.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    weights.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            weights,
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.weights[a..b])
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let (cols, w) = self.row(r);
        cols.binary_search(&(c as u32)).ok().map(|k| w[k])
    }

    /// Sum of weights per row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row(r).1.iter().sum())
            .collect()
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_cols);
        let row_dot = |r: usize| {
            let (cols, w) = self.row(r);
            cols.iter()
                .zip(w)
                .map(|(&c, &v)| v * x[c as usize])
                .sum::<f64>()
        };
        if self.n_rows >= PAR_MIN_ROWS {
            (0..self.n_rows)
                .into_par_iter()
                .with_min_len(1024)
                .map(row_dot)
                .collect()
        } else {
            (0..self.n_rows).map(row_dot).collect()
        }
    }

    /// `out += Aᵀ y`.
    pub fn transpose_matvec_add(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.n_rows);
        debug_assert_eq!(out.len(), self.n_cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let (cols, w) = self.row(r);
            for (&c, &v) in cols.iter().zip(w) {
                out[c as usize] += v * yr;
            }
        }
    }

    /// Structural and numerical symmetry check.
    pub fn is_symmetric(&self) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        (0..self.n_rows).all(|r| {
            let (cols, w) = self.row(r);
            cols.iter()
                .zip(w)
                .all(|(&c, &v)| self.get(c as usize, r) == Some(v))
        })
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.n_rows).any(|r| self.row(r).0.contains(&(r as u32)))
    }

    /// Iterator over stored entries as `(row, col, weight)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, u32, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, w) = self.row(r);
            cols.iter().zip(w).map(move |(&c, &v)| (r, c, v))
        })
    }
}
