//! Small dense matrices and the Lie-algebra machinery behind the learnable
//! resampling operators.
//!
//! Matrices here are tiny (σ ≤ 27 for 3-strides in 3D, σ = 4 or 8 in
//! practice), so everything is plain row-major `Vec<f64>` with naive loops.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{shape_err, Result};
use crate::math;
use crate::tensor::StrideSpec;

/// Relative size of a series term below which the exponential series stops.
pub const SERIES_REL_TOL: f64 = 1e-16;
/// Maximum number of series terms (beyond the identity) ever summed.
pub const SERIES_MAX_TERMS: usize = 40;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix extents must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(shape_err!("{} entries do not form a {rows}x{cols} matrix", data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix { rows: rows.len(), cols, data }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(shape_err!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    fn same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err!(
                "{}x{} vs {}x{} matrix",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * k).collect() }
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// Frobenius inner product `tr(selfᵀ other)`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖selfᵀ self − I‖_F`, the distance from the orthogonal group.
    pub fn orthogonality_defect(&self) -> f64 {
        let g = self.transpose().matmul(self).expect("square by construction");
        g.sub(&Matrix::identity(self.cols)).expect("same shape").frobenius_norm()
    }

    /// Sign and log of the absolute determinant via LU with partial pivoting.
    /// Returns `(0.0, -inf)` for a singular matrix.
    pub fn slogdet(&self) -> Result<(f64, f64)> {
        if !self.is_square() {
            return Err(shape_err!("slogdet of a {}x{} matrix", self.rows, self.cols));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut sign = 1.0;
        let mut logabs = 0.0;
        for col in 0..n {
            let (piv, pmax) = (col..n)
                .map(|r| (r, a[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 {
                return Ok((0.0, f64::NEG_INFINITY));
            }
            if piv != col {
                for j in 0..n {
                    a.swap(piv * n + j, col * n + j);
                }
                sign = -sign;
            }
            let p = a[col * n + col];
            if p < 0.0 {
                sign = -sign;
            }
            logabs += math::ln(p.abs());
            for r in col + 1..n {
                let f = a[r * n + col] / p;
                if f != 0.0 {
                    for j in col..n {
                        a[r * n + j] -= f * a[col * n + j];
                    }
                }
            }
        }
        Ok((sign, logabs))
    }

    pub fn det(&self) -> Result<f64> {
        let (s, l) = self.slogdet()?;
        Ok(if s == 0.0 { 0.0 } else { s * math::exp(l) })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Filter bank for a stride-equals-kernel convolution with one input
/// channel: `out_channels` filters, each with spatial extents `spatial`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    out_channels: usize,
    spatial: Vec<usize>,
    data: Vec<f64>,
}

impl Kernel {
    pub fn zeros(out_channels: usize, spatial: &[usize]) -> Self {
        let n: usize = spatial.iter().product();
        Kernel { out_channels, spatial: spatial.to_vec(), data: vec![0.0; out_channels * n] }
    }

    pub fn from_vec(out_channels: usize, spatial: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = spatial.iter().product();
        if data.len() != out_channels * n {
            return Err(shape_err!("kernel data has {} entries, expected {}", data.len(), out_channels * n));
        }
        Ok(Kernel { out_channels, spatial: spatial.to_vec(), data })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn in_channels(&self) -> usize {
        1
    }
    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }
    pub fn filter_len(&self) -> usize {
        self.spatial.iter().product()
    }
    /// Filter `i` flattened row-major.
    pub fn filter(&self, i: usize) -> &[f64] {
        let n = self.filter_len();
        &self.data[i * n..(i + 1) * n]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn inner(&self, other: &Kernel) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// `θ ↦ θ − θᵀ`. The result is exactly skew-symmetric: entry `(j, i)` is
/// computed as `θ_ji − θ_ij`, the exact negation of entry `(i, j)`.
pub fn skew(theta: &Matrix) -> Result<Matrix> {
    if !theta.is_square() {
        return Err(shape_err!("skew of a non-square {}x{} matrix", theta.rows, theta.cols));
    }
    let n = theta.rows;
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            s[(i, j)] = theta[(i, j)] - theta[(j, i)];
        }
    }
    Ok(s)
}

/// Adjoint of [`skew`] under the Frobenius inner product. `Γ` is
/// self-adjoint, so this is again `M − Mᵀ`.
pub fn skew_adjoint(m: &Matrix) -> Result<Matrix> {
    skew(m)
}

/// Matrix exponential by the truncated Taylor series `Σ Sᵏ/k!`.
///
/// Summation stops once a term's Frobenius norm drops below
/// [`SERIES_REL_TOL`] times the partial sum, or after [`SERIES_MAX_TERMS`]
/// terms. No scaling and squaring is done, so accuracy degrades for large
/// arguments: for skew-symmetric `S` the result is orthogonal to ~1e-12 up to
/// `‖S‖_F ≈ 10`, beyond that cancellation in the alternating series and the
/// term cap both start to show.
pub fn matrix_exp(s: &Matrix) -> Result<Matrix> {
    if !s.is_square() {
        return Err(shape_err!("exp of a non-square {}x{} matrix", s.rows, s.cols));
    }
    let n = s.rows;
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=SERIES_MAX_TERMS {
        term = term.matmul(s)?.scale(1.0 / k as f64);
        sum.axpy(1.0, &term)?;
        if term.frobenius_norm() <= SERIES_REL_TOL * sum.frobenius_norm() {
            break;
        }
    }
    Ok(sum)
}

/// Fréchet derivative of the matrix exponential at `S` in direction `H`.
///
/// Sums `Σ_{k≥1} M_k / k!` with `M_1 = H`, `M_k = M_{k−1} S + S^{k−1} M_1`.
/// To keep magnitudes bounded the recursion is run on the scaled quantities
/// `T_k = M_k / k!` and `E_k = S^k / k!`:
/// `T_k = (T_{k−1} S + E_{k−1} H) / k`.
pub fn matrix_exp_frechet(s: &Matrix, h: &Matrix) -> Result<Matrix> {
    if !s.is_square() {
        return Err(shape_err!("Fréchet derivative at a non-square {}x{} matrix", s.rows, s.cols));
    }
    s.same_shape(h)?;
    let n = s.rows;
    let mut pow = Matrix::identity(n); // E_{k-1}
    let mut term = h.clone(); // T_1
    let mut sum = h.clone();
    for k in 2..=SERIES_MAX_TERMS + 1 {
        pow = pow.matmul(s)?.scale(1.0 / (k - 1) as f64);
        let mut next = term.matmul(s)?;
        next.axpy(1.0, &pow.matmul(h)?)?;
        term = next.scale(1.0 / k as f64);
        sum.axpy(1.0, &term)?;
        let tol = SERIES_REL_TOL * sum.frobenius_norm();
        if term.frobenius_norm() <= tol && pow.frobenius_norm() * h.frobenius_norm() <= tol {
            break;
        }
    }
    Ok(sum)
}

/// The reordering `R`: filter `i` is row `i` of `a`, reshaped row-major to
/// the stride extents.
pub fn reorder_to_kernel(a: &Matrix, stride: &StrideSpec) -> Result<Kernel> {
    let sigma = stride.multiplier();
    if a.rows != sigma || a.cols != sigma {
        return Err(shape_err!(
            "a {}x{} matrix cannot be reordered for channel multiplier {sigma}",
            a.rows,
            a.cols
        ));
    }
    Kernel::from_vec(sigma, stride.extents(), a.data.clone())
}

/// Inverse of [`reorder_to_kernel`] (also its adjoint, `R* = R⁻¹`).
pub fn reorder_to_matrix(k: &Kernel) -> Result<Matrix> {
    let n = k.filter_len();
    if n != k.out_channels {
        return Err(shape_err!(
            "kernel with {} filters of size {n} is not square",
            k.out_channels
        ));
    }
    Matrix::from_vec(n, n, k.data.clone())
}
