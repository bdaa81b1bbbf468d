//! Banded matrix storage, pivot-free LU, banded Cholesky, and a dense
//! Lyapunov solver.
//!
//! The transport operators are column diagonally dominant with positive
//! diagonals, so LU without pivoting is stable and the band structure is
//! preserved exactly. The dense Lyapunov path exists only for desk-scale
//! cross-checks of the covariance model and is gated by its callers.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Square banded matrix with `kl` subdiagonals and `ku` superdiagonals,
/// stored row-major: row `i` occupies a slice of width `kl + ku + 1` and
/// column `j` sits at offset `j - i + kl`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        assert!(n > 0, "banded matrix must have positive dimension");
        assert!(kl < n && ku < n, "bandwidths must be < n");
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn stride(&self) -> usize {
        self.kl + self.ku + 1
    }

    #[inline]
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j + self.kl >= i && i + self.ku >= j
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(self.in_band(i, j));
        i * self.stride() + (j + self.kl - i)
    }

    /// Value at (i, j); zero outside the band.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.offset(i, j)]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let off = self.offset(i, j);
        self.data[off] = value;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let off = self.offset(i, j);
        self.data[off] += value;
    }

    /// Column range of stored entries in row `i`.
    #[inline]
    fn row_range(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        i.saturating_sub(self.kl)..=(i + self.ku).min(self.n - 1)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut acc = 0.0;
            for j in self.row_range(i) {
                acc += self.data[self.offset(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for j in self.row_range(i) {
                y[j] += self.data[self.offset(i, j)] * xi;
            }
        }
        y
    }

    /// Gram matrix `AᵀA`, symmetric with bandwidth `kl + ku` each side.
    pub fn normal_matrix(&self) -> BandedMatrix {
        let kb = (self.kl + self.ku).min(self.n - 1);
        let mut m = BandedMatrix::zeros(self.n, kb, kb);
        for k in 0..self.n {
            let range = self.row_range(k);
            let (lo, hi) = (*range.start(), *range.end());
            for i in lo..=hi {
                let aki = self.data[self.offset(k, i)];
                if aki == 0.0 {
                    continue;
                }
                for j in lo..=hi {
                    m.add(i, j, aki * self.data[self.offset(k, j)]);
                }
            }
        }
        m
    }

    /// Principal submatrix on `keep` (strictly increasing indices). The band
    /// never widens because kept indices can only move closer together.
    pub fn select(&self, keep: &[usize]) -> BandedMatrix {
        assert!(!keep.is_empty(), "cannot select an empty submatrix");
        assert!(
            keep.windows(2).all(|w| w[0] < w[1]) && *keep.last().unwrap() < self.n,
            "selection indices must be strictly increasing and in range"
        );
        let m = keep.len();
        let mut out = BandedMatrix::zeros(m, self.kl.min(m - 1), self.ku.min(m - 1));
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                if self.in_band(i, j) && out.in_band(a, b) {
                    let v = self.data[self.offset(i, j)];
                    if v != 0.0 {
                        out.set(a, b, v);
                    }
                }
            }
        }
        out
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for i in 0..self.n {
            for j in self.row_range(i) {
                sums[j] += self.data[self.offset(i, j)];
            }
        }
        sums
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in self.row_range(i) {
                dense[(i, j)] = self.data[self.offset(i, j)];
            }
        }
        dense
    }
}

/// LU factorization without pivoting. Stability relies on the caller
/// supplying a diagonally dominant matrix; a vanishing pivot is reported as
/// a numerical error rather than repaired.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &BandedMatrix) -> Result<Self> {
        let mut f = BandedLu {
            n: a.n,
            kl: a.kl,
            ku: a.ku,
            data: a.data.clone(),
        };
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        let stride = a.stride();
        let off = |i: usize, j: usize| i * stride + (j + a.kl - i);
        for k in 0..f.n {
            let pivot = f.data[off(k, k)];
            if !pivot.is_finite() || pivot.abs() < 1e-13 * scale {
                return Err(Error::Numerical(format!(
                    "banded LU pivot {pivot:.3e} at row {k} of {} (matrix effectively singular)",
                    f.n
                )));
            }
            let i_max = (k + f.kl).min(f.n - 1);
            let j_max = (k + f.ku).min(f.n - 1);
            for i in (k + 1)..=i_max {
                let m = f.data[off(i, k)] / pivot;
                f.data[off(i, k)] = m;
                if m == 0.0 {
                    continue;
                }
                for j in (k + 1)..=j_max {
                    let ukj = f.data[off(k, j)];
                    if ukj != 0.0 {
                        f.data[off(i, j)] -= m * ukj;
                    }
                }
            }
        }
        Ok(f)
    }

    #[inline]
    fn off(&self, i: usize, j: usize) -> usize {
        i * (self.kl + self.ku + 1) + (j + self.kl - i)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = b.to_vec();
        // forward substitution with unit-diagonal L
        for i in 0..self.n {
            let j_lo = i.saturating_sub(self.kl);
            let mut acc = x[i];
            for j in j_lo..i {
                acc -= self.data[self.off(i, j)] * x[j];
            }
            x[i] = acc;
        }
        // back substitution with U
        for i in (0..self.n).rev() {
            let j_hi = (i + self.ku).min(self.n - 1);
            let mut acc = x[i];
            for j in (i + 1)..=j_hi {
                acc -= self.data[self.off(i, j)] * x[j];
            }
            x[i] = acc / self.data[self.off(i, i)];
        }
        x
    }

    /// log|det| from the U diagonal.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|k| self.data[self.off(k, k)].abs().ln())
            .sum()
    }
}

/// Cholesky factorization of a symmetric positive definite banded matrix;
/// only the lower triangle of the input is read.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    kb: usize,
    /// lower band, row-major with stride kb + 1; row i holds columns
    /// i-kb ..= i at offsets j - i + kb
    data: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &BandedMatrix) -> Result<Self> {
        assert_eq!(a.kl, a.ku, "banded Cholesky expects symmetric bandwidths");
        let n = a.n;
        let kb = a.kl;
        let stride = kb + 1;
        let mut l = vec![0.0; n * stride];
        let off = |i: usize, j: usize| i * stride + (j + kb - i);
        for j in 0..n {
            let k_lo = j.saturating_sub(kb);
            let mut d = a.get(j, j);
            for k in k_lo..j {
                d -= l[off(j, k)] * l[off(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical(format!(
                    "banded Cholesky failed at row {j} of {n}: pivot {d:.3e} not positive"
                )));
            }
            let dj = d.sqrt();
            l[off(j, j)] = dj;
            let i_max = (j + kb).min(n - 1);
            for i in (j + 1)..=i_max {
                let mut acc = a.get(i, j);
                let k_lo = i.saturating_sub(kb).max(k_lo);
                for k in k_lo..j {
                    acc -= l[off(i, k)] * l[off(j, k)];
                }
                l[off(i, j)] = acc / dj;
            }
        }
        Ok(Self { n, kb, data: l })
    }

    #[inline]
    fn off(&self, i: usize, j: usize) -> usize {
        i * (self.kb + 1) + (j + self.kb - i)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n)
            .map(|k| self.data[self.off(k, k)].ln())
            .sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x = b.to_vec();
        for i in 0..self.n {
            let j_lo = i.saturating_sub(self.kb);
            let mut acc = x[i];
            for j in j_lo..i {
                acc -= self.data[self.off(i, j)] * x[j];
            }
            x[i] = acc / self.data[self.off(i, i)];
        }
        for i in (0..self.n).rev() {
            let i_hi = (i + self.kb).min(self.n - 1);
            let mut acc = x[i];
            for k in (i + 1)..=i_hi {
                acc -= self.data[self.off(k, i)] * x[k];
            }
            x[i] = acc / self.data[self.off(i, i)];
        }
        x
    }

    /// `Lᵀ x`, so that `xᵀ M x = ‖Lᵀ x‖²` for `M = L Lᵀ`.
    pub fn lower_transpose_apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let j_lo = i.saturating_sub(self.kb);
            for j in j_lo..=i {
                y[j] += self.data[self.off(i, j)] * x[i];
            }
        }
        y
    }
}

/// Solves the continuous Lyapunov equation `A X + X Aᵀ = c · I` for positive
/// stable `A` by the squared Smith iteration. Dense and intended for small
/// systems only; callers enforce their own size limits.
pub fn lyapunov_covariance(a: &DMatrix<f64>, c: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "Lyapunov solve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let q = a.trace() / n as f64;
    if !(q > 0.0) {
        return Err(Error::Numerical(format!(
            "Lyapunov shift {q:.3e} not positive; matrix does not look positive stable"
        )));
    }
    let shifted = a + DMatrix::identity(n, n) * q;
    let lu = shifted.clone().lu();
    let b0 = lu
        .solve(&(a - DMatrix::identity(n, n) * q))
        .ok_or_else(|| Error::Numerical("Lyapunov shift matrix is singular".into()))?;
    // W = 2q (A+qI)^{-1} C (A+qI)^{-T} with C = c·I
    let y = lu
        .solve(&(DMatrix::identity(n, n) * c))
        .ok_or_else(|| Error::Numerical("Lyapunov shift matrix is singular".into()))?;
    let w = lu
        .solve(&y.transpose())
        .ok_or_else(|| Error::Numerical("Lyapunov shift matrix is singular".into()))?
        .transpose()
        * (2.0 * q);

    let mut x = w;
    let mut b = b0;
    for _ in 0..100 {
        let t = &b * &x * b.transpose();
        x += &t;
        if t.norm() <= 1e-14 * x.norm().max(f64::MIN_POSITIVE) {
            let sym = (&x + x.transpose()) * 0.5;
            return Ok(sym);
        }
        b = &b * &b;
    }
    Err(Error::Numerical(
        "Lyapunov iteration did not converge in 100 doublings".into(),
    ))
}
