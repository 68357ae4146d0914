//! Dense row-major matrices and a rank-revealing full-pivot LU decomposition.
//!
//! The matrices here are small (estimating-equation stacks are a few dozen
//! rows at most), so clarity wins over blocking or SIMD.

use crate::Scalar;
use core::ops::{Index, IndexMut};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = F::one();
        }
        m
    }

    pub fn from_rows(rows_in: &[Vec<F>]) -> Self {
        let rows = rows_in.len();
        let cols = rows_in.first().map_or(0, Vec::len);
        assert!(rows_in.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows,
            cols,
            data: rows_in.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mat_vec(&self, v: &[F]) -> Vec<F> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    pub fn mat_mul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows);
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == F::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] = out[(i, j)] + a * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self += scale * v vᵀ`.
    pub fn add_scaled_outer(&mut self, v: &[F], scale: F) {
        assert_eq!(self.rows, v.len());
        assert_eq!(self.cols, v.len());
        for i in 0..v.len() {
            let si = scale * v[i];
            for j in 0..v.len() {
                self[(i, j)] = self[(i, j)] + si * v[j];
            }
        }
    }

    pub fn scale_in_place(&mut self, s: F) {
        for x in &mut self.data {
            *x = *x * s;
        }
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, x| acc.max(x.abs()))
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> F {
        (0..self.cols)
            .map(|j| {
                (0..self.rows).fold(F::zero(), |acc, i| acc + self[(i, j)].abs())
            })
            .fold(F::zero(), F::max)
    }

    /// Returns `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        assert!(self.is_square());
        let mut out = Self::zeros(self.rows, self.cols);
        let half = crate::math::c::<F>(0.5);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = (self[(i, j)] + self[(j, i)]) * half;
            }
        }
        out
    }
}

impl<F: Scalar> Index<(usize, usize)> for Matrix<F> {
    type Output = F;

    fn index(&self, (i, j): (usize, usize)) -> &F {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<F: Scalar> IndexMut<(usize, usize)> for Matrix<F> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// LU decomposition with full pivoting: `P A Q = L U`.
///
/// Full pivoting is rank-revealing, which lets callers report which column of
/// a singular system failed instead of silently inverting noise.
pub struct FullPivLu<F> {
    lu: Matrix<F>,
    /// `row_perm[i]` is the original row now stored at position `i`.
    row_perm: Vec<usize>,
    /// `col_perm[j]` is the original column now stored at position `j`.
    col_perm: Vec<usize>,
    rank: usize,
    n: usize,
}

impl<F: Scalar> FullPivLu<F> {
    pub fn new(a: &Matrix<F>) -> Self {
        assert!(a.is_square(), "LU requires a square matrix");
        let n = a.rows();
        let mut lu = a.clone();
        let mut row_perm: Vec<usize> = (0..n).collect();
        let mut col_perm: Vec<usize> = (0..n).collect();
        let tol = crate::math::c::<F>(n as f64) * F::epsilon() * a.max_abs();
        let mut rank = n;

        for step in 0..n {
            // Locate the largest remaining entry.
            let (mut pi, mut pj, mut pmax) = (step, step, F::zero());
            for i in step..n {
                for j in step..n {
                    let v = lu[(i, j)].abs();
                    if v > pmax {
                        pmax = v;
                        pi = i;
                        pj = j;
                    }
                }
            }
            if pmax <= tol {
                rank = step;
                break;
            }
            if pi != step {
                for j in 0..n {
                    let tmp = lu[(step, j)];
                    lu[(step, j)] = lu[(pi, j)];
                    lu[(pi, j)] = tmp;
                }
                row_perm.swap(step, pi);
            }
            if pj != step {
                for i in 0..n {
                    let tmp = lu[(i, step)];
                    lu[(i, step)] = lu[(i, pj)];
                    lu[(i, pj)] = tmp;
                }
                col_perm.swap(step, pj);
            }
            let pivot = lu[(step, step)];
            for i in step + 1..n {
                let factor = lu[(i, step)] / pivot;
                lu[(i, step)] = factor;
                for j in step + 1..n {
                    let upd = lu[(step, j)];
                    lu[(i, j)] = lu[(i, j)] - factor * upd;
                }
            }
        }

        Self {
            lu,
            row_perm,
            col_perm,
            rank,
            n,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_invertible(&self) -> bool {
        self.rank == self.n
    }

    /// Smallest original column index left unresolved in a rank-deficient
    /// decomposition.
    pub fn first_deficient_column(&self) -> Option<usize> {
        if self.is_invertible() {
            None
        } else {
            self.col_perm[self.rank..].iter().copied().min()
        }
    }

    pub fn solve(&self, b: &[F]) -> Option<Vec<F>> {
        if !self.is_invertible() {
            return None;
        }
        assert_eq!(b.len(), self.n);
        let n = self.n;
        // Forward substitution on L (unit diagonal) applied to the permuted RHS.
        let mut y: Vec<F> = (0..n).map(|i| b[self.row_perm[i]]).collect();
        for i in 1..n {
            let mut acc = y[i];
            for j in 0..i {
                acc = acc - self.lu[(i, j)] * y[j];
            }
            y[i] = acc;
        }
        // Back substitution on U.
        for i in (0..n).rev() {
            let mut acc = y[i];
            for j in i + 1..n {
                acc = acc - self.lu[(i, j)] * y[j];
            }
            y[i] = acc / self.lu[(i, i)];
        }
        // Undo the column permutation.
        let mut x = vec![F::zero(); n];
        for i in 0..n {
            x[self.col_perm[i]] = y[i];
        }
        Some(x)
    }

    pub fn inverse(&self) -> Option<Matrix<F>> {
        if !self.is_invertible() {
            return None;
        }
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![F::zero(); n];
        for j in 0..n {
            e[j] = F::one();
            let col = self.solve(&e)?;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
            e[j] = F::zero();
        }
        Some(inv)
    }
}

/// One-norm condition number computed from the explicit inverse. `None` when
/// the matrix is numerically singular.
pub fn condition_number_one<F: Scalar>(a: &Matrix<F>) -> Option<F> {
    let lu = FullPivLu::new(a);
    let inv = lu.inverse()?;
    Some(a.norm_one() * inv.norm_one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_random_system() {
        // Fixed 5x5 system with a known solution.
        let a = Matrix::from_rows(&[
            vec![4.0, 1.0, 0.3, -0.2, 0.0],
            vec![1.0, 3.0, -0.4, 0.5, 0.1],
            vec![0.3, -0.4, 5.0, 0.7, -0.3],
            vec![-0.2, 0.5, 0.7, 2.5, 0.9],
            vec![0.0, 0.1, -0.3, 0.9, 1.8],
        ]);
        let x_true: Vec<f64> = vec![1.0, -2.0, 0.5, 3.0, -1.25];
        let b = a.mat_vec(&x_true);
        let x = FullPivLu::new(&a).solve(&b).unwrap();
        for (xi, ti) in x.iter().zip(&x_true) {
            assert!((xi - ti).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let a: Matrix<f64> = Matrix::from_rows(&[
            vec![2.0, 0.5, 0.0],
            vec![0.5, 1.5, -0.2],
            vec![0.0, -0.2, 0.8],
        ]);
        let inv = FullPivLu::new(&a).inverse().unwrap();
        let prod = a.mat_mul(&inv);
        let eye: Matrix<f64> = Matrix::identity(3);
        for i in 0..3 {
            for j in 0..3 {
                assert!((prod[(i, j)] - eye[(i, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn detects_rank_deficiency() {
        // Third column is the sum of the first two.
        let a: Matrix<f64> = Matrix::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 2.0],
        ]);
        let lu = FullPivLu::new(&a);
        assert_eq!(lu.rank(), 2);
        assert!(lu.solve(&[1.0, 1.0, 1.0]).is_none());
        assert!(lu.first_deficient_column().is_some());
    }

    #[test]
    fn condition_number_scales() {
        let well: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((condition_number_one(&well).unwrap() - 1.0).abs() < 1e-15);
        let ill: Matrix<f64> = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-9]]);
        assert!(condition_number_one(&ill).unwrap() > 1e8);
    }
}
