//! Dense kernels shared by every fit: truncated-SVD least squares,
//! pseudoinverse, general eigenvalues and PCA.
//!
//! Singular values are truncated relative to the largest one: a value
//! `s_i` is kept iff `s_i > max(rcond, eps * max(m, n)) * s_max`.

use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{Complex, DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const SVD_MAX_SWEEPS: usize = 10_000;
const SCHUR_MAX_SWEEPS: usize = 10_000;

/// Tolerance semantics of the least-squares solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstsqOptions {
    /// Relative singular-value cutoff. Zero keeps everything above the
    /// machine-precision floor.
    pub rcond: f64,
}

impl LstsqOptions {
    pub const EXACT: LstsqOptions = LstsqOptions { rcond: 0.0 };

    pub fn new(rcond: f64) -> Result<Self> {
        if !(rcond >= 0.0) || !rcond.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "rcond must be finite and non-negative, got {rcond}"
            )));
        }
        Ok(Self { rcond })
    }
}

impl Default for LstsqOptions {
    fn default() -> Self {
        Self::EXACT
    }
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Truncated thin SVD of `A`, stored as `A ≈ Q · U · diag(s) · Vᵀ`.
///
/// Tall matrices (`m ≥ 2n`) are first reduced by a Householder QR so the
/// SVD only ever runs on the `n × n` triangular factor; `Q` is then kept
/// explicitly. For the other shapes `Q` is the identity and omitted.
#[derive(Debug, Clone)]
pub struct Factorization {
    rows: usize,
    cols: usize,
    q: Option<DMatrix<f64>>,
    u: DMatrix<f64>,
    singular_values: Vec<f64>,
    v_t: DMatrix<f64>,
    rank: usize,
}

impl Factorization {
    pub fn new(a: &DMatrix<f64>, opts: LstsqOptions) -> Result<Self> {
        LstsqOptions::new(opts.rcond)?;
        ensure_finite(a, "least-squares matrix")?;
        let (m, n) = a.shape();
        if m == 0 || n == 0 {
            return Ok(Self {
                rows: m,
                cols: n,
                q: None,
                u: DMatrix::zeros(m, 0),
                singular_values: Vec::new(),
                v_t: DMatrix::zeros(0, n),
                rank: 0,
            });
        }

        let (q, core) = if m >= 2 * n {
            let qr = a.clone().qr();
            (Some(qr.q()), qr.r())
        } else {
            (None, a.clone())
        };
        let svd = core
            .try_svd(true, true, f64::EPSILON, SVD_MAX_SWEEPS)
            .ok_or(Error::NoConvergence {
                what: "singular value decomposition",
                iterations: SVD_MAX_SWEEPS,
            })?;
        let u = svd.u.expect("requested left singular vectors");
        let v_t = svd.v_t.expect("requested right singular vectors");

        // Order by descending singular value and drop the truncated tail.
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| {
            svd.singular_values[j]
                .partial_cmp(&svd.singular_values[i])
                .unwrap_or(Ordering::Equal)
        });
        let s_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
        let floor = f64::EPSILON * m.max(n) as f64;
        let cutoff = opts.rcond.max(floor) * s_max;

        let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let rank = singular_values.iter().take_while(|&&s| s > cutoff).count();
        let u = DMatrix::from_fn(u.nrows(), rank, |r, c| u[(r, order[c])]);
        let v_t = DMatrix::from_fn(rank, n, |r, c| v_t[(order[r], c)]);

        Ok(Self {
            rows: m,
            cols: n,
            q,
            u,
            singular_values,
            v_t,
            rank,
        })
    }

    /// Number of singular values kept after truncation.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// All singular values in descending order, including truncated ones.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Right singular vectors of the retained subspace, one per row.
    pub fn right_singular_vectors(&self) -> &DMatrix<f64> {
        &self.v_t
    }

    /// Minimum-norm least-squares solution `X` of `A X ≈ B` over the
    /// retained singular subspace.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("least-squares right-hand side rows", self.rows, b.nrows())?;
        ensure_finite(b, "least-squares right-hand side")?;
        if self.rank == 0 {
            return Ok(DMatrix::zeros(self.cols, b.ncols()));
        }
        let qtb = match &self.q {
            Some(q) => q.tr_mul(b),
            None => b.clone(),
        };
        let mut coeffs = self.u.tr_mul(&qtb);
        for (r, mut row) in coeffs.row_iter_mut().enumerate() {
            row /= self.singular_values[r];
        }
        Ok(self.v_t.tr_mul(&coeffs))
    }

    /// Truncated Moore–Penrose pseudoinverse of `A`.
    pub fn pseudoinverse(&self) -> DMatrix<f64> {
        if self.rank == 0 {
            return DMatrix::zeros(self.cols, self.rows);
        }
        let mut scaled_v = self.v_t.transpose();
        for (c, mut col) in scaled_v.column_iter_mut().enumerate() {
            col /= self.singular_values[c];
        }
        let left = match &self.q {
            Some(q) => q * &self.u,
            None => self.u.clone(),
        };
        scaled_v * left.transpose()
    }
}

/// Solve `min ‖A X − B‖_F` by truncated SVD.
pub fn lstsq_svd(a: &DMatrix<f64>, b: &DMatrix<f64>, opts: LstsqOptions) -> Result<DMatrix<f64>> {
    check_dim("least-squares rows", a.nrows(), b.nrows())?;
    Factorization::new(a, opts)?.solve(b)
}

/// Moore–Penrose pseudoinverse with singular values below the cutoff zeroed.
pub fn pinv(a: &DMatrix<f64>, opts: LstsqOptions) -> Result<DMatrix<f64>> {
    Ok(Factorization::new(a, opts)?.pseudoinverse())
}

pub(crate) fn modulus(z: Complex<f64>) -> f64 {
    libm::hypot(z.re, z.im)
}

fn eigen_order(a: &Complex<f64>, b: &Complex<f64>) -> Ordering {
    modulus(*b)
        .partial_cmp(&modulus(*a))
        .unwrap_or(Ordering::Equal)
        .then(b.im.partial_cmp(&a.im).unwrap_or(Ordering::Equal))
        .then(b.re.partial_cmp(&a.re).unwrap_or(Ordering::Equal))
}

/// Eigenvalues of a general real square matrix via the real Schur form.
///
/// Sorted by descending modulus, then descending imaginary part, so a
/// conjugate pair always lists `+i` first.
pub fn eig_general(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    check_dim("eigenvalue matrix columns", a.nrows(), a.ncols())?;
    ensure_finite(a, "eigenvalue matrix")?;
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, SCHUR_MAX_SWEEPS).ok_or(
        Error::NoConvergence {
            what: "Schur decomposition",
            iterations: SCHUR_MAX_SWEEPS,
        },
    )?;
    let mut values: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    values.sort_by(eigen_order);
    Ok(values)
}

/// Eigenvalues together with unit left eigenvectors `w` (`wᴴ A = λ wᴴ`).
///
/// Vectors come from inverse iteration on `Aᴴ − conj(λ) I`. Phase
/// convention: the largest-magnitude component is real and positive.
pub fn eig_left(a: &DMatrix<f64>) -> Result<Vec<(Complex<f64>, DVector<Complex<f64>>)>> {
    let values = eig_general(a)?;
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let adjoint: DMatrix<Complex<f64>> = a.transpose().map(|v| Complex::new(v, 0.0));

    let mut out = Vec::with_capacity(n);
    for &lambda in &values {
        let shift = lambda.conj() + Complex::new(scale * 1e-10, scale * 1e-10);
        let mut shifted = adjoint.clone();
        for i in 0..n {
            shifted[(i, i)] -= shift;
        }
        let lu = shifted.lu();
        let mut w = DVector::from_fn(n, |i, _| Complex::new(1.0 / (1.0 + i as f64), 0.5));
        for _ in 0..8 {
            let next = lu.solve(&w).ok_or(Error::NoConvergence {
                what: "inverse iteration",
                iterations: 0,
            })?;
            w = normalize_phase(next);
        }
        out.push((lambda, w));
    }
    Ok(out)
}

fn normalize_phase(v: DVector<Complex<f64>>) -> DVector<Complex<f64>> {
    let norm = libm::sqrt(v.iter().map(|z| z.re * z.re + z.im * z.im).sum::<f64>());
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| modulus(*a).partial_cmp(&modulus(*b)).unwrap_or(Ordering::Equal))
        .unwrap_or(Complex::new(1.0, 0.0));
    let m = modulus(pivot);
    if m == 0.0 || norm == 0.0 {
        return v;
    }
    // Multiply by conj(pivot)/|pivot| to rotate the pivot onto the positive real axis.
    let rot = Complex::new(pivot.re / m, -pivot.im / m) / Complex::new(norm, 0.0);
    v.map(|z| z * rot)
}

/// Principal component projection fitted on a set of row samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, one per row (`k × d`).
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component, descending.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    /// Fit `k` components to `data` (`N × d`, one sample per row).
    ///
    /// Sign convention: the largest-magnitude entry of every component is
    /// positive. Rank-deficient data is accepted; directions without
    /// variance then get zero explained variance.
    pub fn fit(data: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, d) = data.shape();
        if n < 2 {
            return Err(Error::InvalidArgument(alloc::format!(
                "PCA needs at least two samples, got {n}"
            )));
        }
        if k == 0 || k > n.min(d) {
            return Err(Error::InvalidArgument(alloc::format!(
                "PCA component count {k} outside 1..={}",
                n.min(d)
            )));
        }
        ensure_finite(data, "PCA data")?;

        let mean = data.row_mean();
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        // Right singular vectors of the centered data equal those of its R factor.
        let core = if n >= 2 * d { centered.qr().r() } else { centered };
        let svd = core
            .try_svd(false, true, f64::EPSILON, SVD_MAX_SWEEPS)
            .ok_or(Error::NoConvergence {
                what: "singular value decomposition",
                iterations: SVD_MAX_SWEEPS,
            })?;
        let v_t = svd.v_t.expect("requested right singular vectors");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| {
            svd.singular_values[j]
                .partial_cmp(&svd.singular_values[i])
                .unwrap_or(Ordering::Equal)
                .then(i.cmp(&j))
        });

        let mut components = Vec::with_capacity(k);
        let mut explained_variance = Vec::with_capacity(k);
        for &idx in order.iter().take(k) {
            let mut row: Vec<f64> = v_t.row(idx).iter().copied().collect();
            let pivot = row
                .iter()
                .copied()
                .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
            if pivot < 0.0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(row);
            let s = svd.singular_values[idx];
            explained_variance.push(s * s / (n - 1) as f64);
        }

        Ok(Self {
            mean: mean.iter().copied().collect(),
            components,
            explained_variance,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    fn component_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_components(), self.input_dim(), |r, c| {
            self.components[r][c]
        })
    }

    /// Project rows of `points` (`* × d`) onto the components (`* × k`).
    pub fn transform(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("PCA input columns", self.input_dim(), points.ncols())?;
        let mut centered = points.clone();
        for mut row in centered.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        Ok(centered * self.component_matrix().transpose())
    }

    /// Map scores (`* × k`) back to the original coordinates.
    pub fn inverse_transform(&self, scores: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("PCA score columns", self.n_components(), scores.ncols())?;
        let mut out = scores * self.component_matrix();
        for mut row in out.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn identity_system() {
        let x = lstsq_svd(&DMatrix::identity(2, 2), &dmatrix![1.0; 2.0], LstsqOptions::EXACT)
            .unwrap();
        assert_relative_eq!(x, dmatrix![1.0; 2.0], epsilon = 1e-14);
    }

    #[test]
    fn overdetermined_column_averages() {
        // (AᵀA)⁻¹AᵀB = (1 + 3) / 2.
        let x = lstsq_svd(&dmatrix![1.0; 1.0], &dmatrix![1.0; 3.0], LstsqOptions::EXACT).unwrap();
        assert_relative_eq!(x[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn small_singular_value_is_truncated() {
        let a = dmatrix![1.0, 0.0; 0.0, 1e-12];
        let x = lstsq_svd(&a, &dmatrix![1.0; 1.0], LstsqOptions::new(1e-8).unwrap()).unwrap();
        assert_relative_eq!(x, dmatrix![1.0; 0.0], epsilon = 1e-14);
        let exact = lstsq_svd(&a, &dmatrix![1.0; 1.0], LstsqOptions::EXACT).unwrap();
        assert_relative_eq!(exact[(1, 0)], 1e12, max_relative = 1e-10);
    }

    #[test]
    fn tall_path_matches_normal_equations() {
        let a = DMatrix::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + j as f64 * 0.1);
        let b = DMatrix::from_fn(40, 2, |i, j| (i as f64 * 0.3).sin() + j as f64);
        let x = lstsq_svd(&a, &b, LstsqOptions::EXACT).unwrap();
        let normal = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &b;
        assert_relative_eq!(x, normal, epsilon = 1e-10);
    }

    #[test]
    fn rejects_bad_input() {
        let a = DMatrix::<f64>::identity(2, 2);
        assert!(matches!(
            lstsq_svd(&a, &DMatrix::zeros(3, 1), LstsqOptions::EXACT),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut bad = a.clone();
        bad[(0, 1)] = f64::NAN;
        assert_eq!(
            pinv(&bad, LstsqOptions::EXACT).unwrap_err(),
            Error::NonFinite("least-squares matrix")
        );
        assert!(LstsqOptions::new(-1.0).is_err());
    }

    #[test]
    fn pinv_examples() {
        assert_relative_eq!(
            pinv(&DMatrix::identity(3, 3), LstsqOptions::EXACT).unwrap(),
            DMatrix::identity(3, 3),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            pinv(&dmatrix![2.0, 0.0; 0.0, 4.0], LstsqOptions::EXACT).unwrap(),
            dmatrix![0.5, 0.0; 0.0, 0.25],
            epsilon = 1e-14
        );
        assert_relative_eq!(
            pinv(&dmatrix![1.0, 0.0; 0.0, 0.0], LstsqOptions::EXACT).unwrap(),
            dmatrix![1.0, 0.0; 0.0, 0.0],
            epsilon = 1e-14
        );
        assert_eq!(
            pinv(&DMatrix::zeros(2, 3), LstsqOptions::EXACT).unwrap(),
            DMatrix::zeros(3, 2)
        );
    }

    fn sorted(mut v: Vec<Complex<f64>>) -> Vec<(f64, f64)> {
        v.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap().then(a.im.partial_cmp(&b.im).unwrap()));
        v.into_iter().map(|z| (z.re, z.im)).collect()
    }

    #[test]
    fn eigenvalue_examples() {
        let d = sorted(eig_general(&dmatrix![0.5, 0.0; 0.0, -0.3]).unwrap());
        assert_relative_eq!(d[0].0, -0.3, epsilon = 1e-14);
        assert_relative_eq!(d[1].0, 0.5, epsilon = 1e-14);

        let rot = eig_general(&dmatrix![0.0, -1.0; 1.0, 0.0]).unwrap();
        assert_relative_eq!(rot[0].re, 0.0, epsilon = 1e-14);
        assert_relative_eq!(rot[0].im, 1.0, epsilon = 1e-14);
        assert_relative_eq!(rot[1].im, -1.0, epsilon = 1e-14);

        let jordan = eig_general(&dmatrix![2.0, 1.0; 0.0, 2.0]).unwrap();
        for z in jordan {
            assert_relative_eq!(z.re, 2.0, epsilon = 1e-12);
            assert_relative_eq!(z.im, 0.0, epsilon = 1e-12);
        }
        assert!(eig_general(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn left_eigenvectors_satisfy_definition() {
        let a = dmatrix![0.9, 0.2, 0.0; -0.3, 0.7, 0.1; 0.0, 0.4, 0.5];
        for (lambda, w) in eig_left(&a).unwrap() {
            let ac = a.map(|v| Complex::new(v, 0.0));
            let lhs = w.adjoint() * &ac;
            let rhs = w.adjoint() * lambda;
            assert!((lhs - rhs).norm() < 1e-8);
            let pivot = w.iter().max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap()).unwrap();
            assert!(pivot.im.abs() < 1e-12 && pivot.re > 0.0);
            assert_relative_eq!(w.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pca_on_diagonal_line() {
        let data = dmatrix![-2.0, -2.0; -1.0, -1.0; 1.0, 1.0; 2.0, 2.0];
        let pca = Pca::fit(&data, 1).unwrap();
        assert_relative_eq!(pca.explained_variance[0], 20.0 / 3.0, epsilon = 1e-12);
        let t = pca.transform(&dmatrix![1.0, 1.0]).unwrap();
        assert_relative_eq!(t[(0, 0)], 2f64.sqrt(), epsilon = 1e-12);

        let full = Pca::fit(&data, 2).unwrap();
        assert!(full.explained_variance[1].abs() < 1e-20);
    }

    #[test]
    fn pca_of_constant_rows_is_zero() {
        let data = DMatrix::from_fn(5, 3, |_, j| j as f64 + 1.0);
        let pca = Pca::fit(&data, 1).unwrap();
        let t = pca.transform(&data).unwrap();
        assert!(t.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pca_full_rank_round_trip() {
        let data = dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0];
        let pca = Pca::fit(&data, 2).unwrap();
        let back = pca.inverse_transform(&pca.transform(&data).unwrap()).unwrap();
        assert_relative_eq!(back, data, epsilon = 1e-8);
    }

    #[test]
    fn pca_argument_errors() {
        let data = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        assert!(Pca::fit(&data, 0).is_err());
        assert!(Pca::fit(&data, 3).is_err());
        assert!(Pca::fit(&DMatrix::zeros(1, 2), 1).is_err());
    }
}
