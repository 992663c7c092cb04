//! Dense symmetric positive-semidefinite linear algebra primitives.
//!
//! Everything here operates on small dense blocks. Factorizations tolerate
//! singular matrices: the positive-definite fast path is a plain (gaxpy)
//! Cholesky, and matrices that fail the pivot test fall back to a symmetric
//! eigendecomposition with truncated eigenvalues, which yields minimum-norm
//! pseudo-solves and a numeric rank.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default absolute/relative tolerance used by factorizations and solves.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Sign of a low-rank symmetric modification `X ± U·C†·Uᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModSign {
    Update,
    Downdate,
}

impl ModSign {
    pub fn as_f64(self) -> f64 {
        match self {
            ModSign::Update => 1.0,
            ModSign::Downdate => -1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive semidefinite (eigenvalue {eigenvalue:.3e})")]
    NotPsd { eigenvalue: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("operation requires a Cholesky-kind factorization")]
    KindMismatch,
    #[error("rank-1 downdate destroys positive definiteness at column {col}")]
    DowndateBreaksPd { col: usize },
    #[error("capacitance system of the Woodbury solve is singular or indefinite")]
    InnerSystemSingular,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Symmetric matrix with exactly symmetric storage.
///
/// Construction mirrors the averaged triangles into both halves, so
/// `X[i,j] == X[j,i]` holds bitwise for every instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    m: DMatrix<f64>,
}

impl SymMat {
    /// Builds from a square matrix, rejecting non-finite entries and
    /// asymmetry beyond `1e-8 * (1 + ‖m‖)`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-8 * (1.0 + m.norm()) {
            return Err(LinalgError::NotSymmetric { asymmetry: asym });
        }
        Ok(Self::symmetrize(m))
    }

    /// Averages the two triangles without a symmetry check.
    pub fn symmetrize(mut m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "symmetrize requires a square matrix");
        for i in 0..m.nrows() {
            for j in 0..i {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMat { m }
    }

    pub fn zeros(n: usize) -> Self {
        SymMat {
            m: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        SymMat {
            m: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    /// Smallest eigenvalue (0 for the empty matrix).
    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        let eig = self.m.clone().symmetric_eigenvalues();
        eig.min()
    }

    /// Checks `λ_min ≥ −tol·(1 + ‖X‖)`.
    pub fn validate_psd(&self, tol: f64) -> Result<()> {
        let min = self.min_eigenvalue();
        if min < -tol * (1.0 + self.m.norm()) {
            return Err(LinalgError::NotPsd { eigenvalue: min });
        }
        Ok(())
    }
}

impl std::ops::Deref for SymMat {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.m
    }
}

/// Factorization of a symmetric PSD matrix.
///
/// Positive-definite matrices get a Cholesky factor; numerically singular
/// ones an eigendecomposition with eigenvalues below the truncation cutoff
/// zeroed out. The eigen kind realizes the Moore–Penrose pseudo-inverse.
#[derive(Debug, Clone)]
pub enum PsdFactorization {
    Cholesky {
        /// Lower-triangular factor with positive diagonal, `X = L·Lᵀ`.
        l: DMatrix<f64>,
    },
    Eigen {
        /// Orthonormal eigenvectors, sorted by descending eigenvalue.
        vectors: DMatrix<f64>,
        /// Eigenvalues sorted descending; entries past `rank` are zero.
        values: DVector<f64>,
        rank: usize,
    },
}

impl PsdFactorization {
    pub fn dim(&self) -> usize {
        match self {
            PsdFactorization::Cholesky { l } => l.nrows(),
            PsdFactorization::Eigen { vectors, .. } => vectors.nrows(),
        }
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self, PsdFactorization::Cholesky { .. })
    }

    pub fn numeric_rank(&self) -> usize {
        match self {
            PsdFactorization::Cholesky { l } => l.nrows(),
            PsdFactorization::Eigen { rank, .. } => *rank,
        }
    }

    /// Rebuilds the factored matrix.
    pub fn reassemble(&self) -> SymMat {
        match self {
            PsdFactorization::Cholesky { l } => SymMat::symmetrize(l * l.transpose()),
            PsdFactorization::Eigen {
                vectors,
                values,
                rank,
            } => {
                let vr = vectors.columns(0, *rank);
                let mut scaled = vr.into_owned();
                for j in 0..*rank {
                    scaled.column_mut(j).scale_mut(values[j]);
                }
                SymMat::symmetrize(scaled * vr.transpose())
            }
        }
    }

    /// Minimum-norm solve `X·out = b` (exact when `b ∈ range(X)`,
    /// least-squares projection otherwise).
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.dim() != b.nrows() {
            return Err(LinalgError::DimensionMismatch {
                expected: self.dim(),
                got: b.nrows(),
            });
        }
        match self {
            PsdFactorization::Cholesky { l } => {
                let mut x = b.clone();
                forward_substitute(l, &mut x);
                back_substitute_transposed(l, &mut x);
                Ok(x)
            }
            PsdFactorization::Eigen {
                vectors,
                values,
                rank,
            } => {
                let vr = vectors.columns(0, *rank);
                let mut y = vr.transpose() * b;
                for i in 0..*rank {
                    let inv = 1.0 / values[i];
                    y.row_mut(i).scale_mut(inv);
                }
                Ok(vr * y)
            }
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()))?;
        Ok(DVector::from_column_slice(x.as_slice()))
    }

    /// A matrix `Z` (dim × rank) with `Z·Zᵀ = X†`.
    pub fn pseudo_inverse_sqrt(&self) -> DMatrix<f64> {
        match self {
            PsdFactorization::Cholesky { l } => {
                // L⁻ᵀ: solve Lᵀ Z = I.
                let n = l.nrows();
                let mut z = DMatrix::identity(n, n);
                back_substitute_transposed(l, &mut z);
                z
            }
            PsdFactorization::Eigen {
                vectors,
                values,
                rank,
            } => {
                let mut z = vectors.columns(0, *rank).into_owned();
                for j in 0..*rank {
                    z.column_mut(j).scale_mut(1.0 / values[j].sqrt());
                }
                z
            }
        }
    }
}

/// Solves `L·x = b` in place for lower-triangular `L`.
fn forward_substitute(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for col in 0..b.ncols() {
        for i in 0..n {
            let mut s = b[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * b[(k, col)];
            }
            b[(i, col)] = s / l[(i, i)];
        }
    }
}

/// Solves `Lᵀ·x = b` in place for lower-triangular `L`.
fn back_substitute_transposed(l: &DMatrix<f64>, b: &mut DMatrix<f64>) {
    let n = l.nrows();
    for col in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut s = b[(i, col)];
            for k in i + 1..n {
                s -= l[(k, i)] * b[(k, col)];
            }
            b[(i, col)] = s / l[(i, i)];
        }
    }
}

/// Gaxpy-style Cholesky that bails out when a pivot drops to `pivot_tol`
/// or below. Returns the lower factor on success.
fn gaxpy_cholesky(a: &DMatrix<f64>, pivot_tol: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut v: Vec<f64> = (j..n).map(|i| a[(i, j)]).collect();
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                for (off, item) in v.iter_mut().enumerate() {
                    *item -= l[(j + off, k)] * ljk;
                }
            }
        }
        let pivot = v[0];
        if !pivot.is_finite() || pivot <= pivot_tol || pivot <= 0.0 {
            return None;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for (off, item) in v.iter().enumerate().skip(1) {
            l[(j + off, j)] = item / d;
        }
    }
    Some(l)
}

/// Factors a symmetric PSD matrix.
///
/// Returns the Cholesky kind when every pivot exceeds `tol·trace(X)`, else
/// the eigen kind with eigenvalues below `tol·λ_max` truncated to zero.
/// Fails with [`LinalgError::NotPsd`] when an eigenvalue is more negative
/// than `−tol·(1 + ‖X‖)`.
pub fn factor_psd(x: &SymMat, tol: f64) -> Result<PsdFactorization> {
    let n = x.dim();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if n == 0 {
        return Ok(PsdFactorization::Cholesky {
            l: DMatrix::zeros(0, 0),
        });
    }
    let trace: f64 = x.diagonal().sum();
    let pivot_tol = tol * trace.max(0.0);
    if let Some(l) = gaxpy_cholesky(x.matrix(), pivot_tol) {
        return Ok(PsdFactorization::Cholesky { l });
    }
    let eig = x.matrix().clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let min_eig = eig.eigenvalues[*order.last().unwrap()];
    if min_eig < -tol * (1.0 + x.norm()) {
        return Err(LinalgError::NotPsd { eigenvalue: min_eig });
    }
    let max_eig = eig.eigenvalues[order[0]].max(0.0);
    let cutoff = tol * max_eig;
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (slot, &idx) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[idx];
        vectors.column_mut(slot).copy_from(&eig.eigenvectors.column(idx));
        if lambda > cutoff && lambda > 0.0 {
            values[slot] = lambda;
            rank += 1;
        }
    }
    Ok(PsdFactorization::Eigen {
        vectors,
        values,
        rank,
    })
}

/// Minimum-norm pseudo-solve `reassemble(f)·X = B`.
pub fn pseudo_solve(f: &PsdFactorization, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    f.solve(b)
}

/// Returns a new Cholesky factorization of `X + v·vᵀ`.
pub fn chol_rank1_update(f: &PsdFactorization, v: &DVector<f64>) -> Result<PsdFactorization> {
    let PsdFactorization::Cholesky { l } = f else {
        return Err(LinalgError::KindMismatch);
    };
    if l.nrows() != v.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: l.nrows(),
            got: v.len(),
        });
    }
    let mut l = l.clone();
    let mut w = v.clone();
    rank1_update_in_place(&mut l, &mut w);
    Ok(PsdFactorization::Cholesky { l })
}

/// Returns a new Cholesky factorization of `X − v·vᵀ`, or
/// [`LinalgError::DowndateBreaksPd`] when the result is no longer
/// numerically positive definite.
pub fn chol_rank1_downdate(f: &PsdFactorization, v: &DVector<f64>) -> Result<PsdFactorization> {
    let PsdFactorization::Cholesky { l } = f else {
        return Err(LinalgError::KindMismatch);
    };
    if l.nrows() != v.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: l.nrows(),
            got: v.len(),
        });
    }
    let mut l = l.clone();
    let mut w = v.clone();
    rank1_downdate_in_place(&mut l, &mut w)?;
    Ok(PsdFactorization::Cholesky { l })
}

/// Givens-based rank-1 update; `w` is workspace and is destroyed.
fn rank1_update_in_place(l: &mut DMatrix<f64>, w: &mut DVector<f64>) {
    let n = l.nrows();
    for j in 0..n {
        let ljj = l[(j, j)];
        let wj = w[j];
        let r = ljj.hypot(wj);
        let c = r / ljj;
        let s = wj / ljj;
        l[(j, j)] = r;
        for i in j + 1..n {
            l[(i, j)] = (l[(i, j)] + s * w[i]) / c;
            w[i] = c * w[i] - s * l[(i, j)];
        }
    }
}

/// Hyperbolic-rotation rank-1 downdate; fails when a pivot collapses.
fn rank1_downdate_in_place(l: &mut DMatrix<f64>, w: &mut DVector<f64>) -> Result<()> {
    let n = l.nrows();
    for j in 0..n {
        let ljj = l[(j, j)];
        let wj = w[j];
        let arg = (ljj - wj) * (ljj + wj);
        if arg <= 1e-14 * ljj * ljj {
            return Err(LinalgError::DowndateBreaksPd { col: j });
        }
        let r = arg.sqrt();
        let c = r / ljj;
        let s = wj / ljj;
        l[(j, j)] = r;
        for i in j + 1..n {
            l[(i, j)] = (l[(i, j)] - s * w[i]) / c;
            w[i] = c * w[i] - s * l[(i, j)];
        }
    }
    Ok(())
}

/// Extends a Cholesky factorization of `G` to one of `[[G, g], [gᵀ, g0]]`.
///
/// Fails with [`LinalgError::NotPsd`] when the bordered matrix is not
/// numerically positive definite.
pub fn chol_append_columns(
    f: &PsdFactorization,
    g: &DMatrix<f64>,
    g0: &SymMat,
    tol: f64,
) -> Result<PsdFactorization> {
    let PsdFactorization::Cholesky { l } = f else {
        return Err(LinalgError::KindMismatch);
    };
    let n = l.nrows();
    let k = g0.dim();
    if g.nrows() != n || g.ncols() != k {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: g.nrows(),
        });
    }
    let mut l1 = g.clone();
    forward_substitute(l, &mut l1); // L·l1 = g
    let corner = SymMat::symmetrize(g0.matrix() - l1.transpose() * &l1);
    let trace: f64 = corner.diagonal().sum();
    let l2 = gaxpy_cholesky(corner.matrix(), tol * trace.max(0.0))
        .ok_or(LinalgError::NotPsd { eigenvalue: 0.0 })?;
    let mut out = DMatrix::zeros(n + k, n + k);
    out.view_mut((0, 0), (n, n)).copy_from(l);
    out.view_mut((n, 0), (k, n)).copy_from(&l1.transpose());
    out.view_mut((n, n), (k, k)).copy_from(&l2);
    Ok(PsdFactorization::Cholesky { l: out })
}

/// Cholesky factorization of the principal submatrix left after deleting
/// the given (sorted) rows/columns, via Givens re-triangularization.
pub fn chol_delete_columns(f: &PsdFactorization, delete: &[usize]) -> Result<PsdFactorization> {
    let PsdFactorization::Cholesky { l } = f else {
        return Err(LinalgError::KindMismatch);
    };
    let n = l.nrows();
    debug_assert!(delete.windows(2).all(|w| w[0] < w[1]));
    if delete.iter().any(|&d| d >= n) {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: *delete.iter().max().unwrap(),
        });
    }
    let keep: Vec<usize> = (0..n).filter(|i| !delete.contains(i)).collect();
    let m = keep.len();
    let mut lw = DMatrix::zeros(m, n);
    for (r, &src) in keep.iter().enumerate() {
        lw.row_mut(r).copy_from(&l.row(src));
    }
    // Re-triangularize with right-Givens rotations: zero entry (r, c) for
    // c > r against the diagonal (r, r). Earlier rows already have zeros in
    // both columns involved, so they are unaffected.
    for r in 0..m {
        for c in r + 1..n {
            let b = lw[(r, c)];
            if b == 0.0 {
                continue;
            }
            let a = lw[(r, r)];
            let rho = a.hypot(b);
            let cth = a / rho;
            let sth = b / rho;
            for i in r..m {
                let vr = lw[(i, r)];
                let vc = lw[(i, c)];
                lw[(i, r)] = cth * vr + sth * vc;
                lw[(i, c)] = -sth * vr + cth * vc;
            }
        }
    }
    Ok(PsdFactorization::Cholesky {
        l: lw.view((0, 0), (m, m)).into_owned(),
    })
}

/// Solves `(G ± U·C†·Uᵀ)·X = B` through the Sherman–Morrison–Woodbury
/// identity, touching only the base factorization `f` of `G` and a small
/// capacitance system of the modification's rank.
pub fn smw_solve(
    f: &PsdFactorization,
    u: &DMatrix<f64>,
    c: &PsdFactorization,
    sign: ModSign,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if u.nrows() != f.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: f.dim(),
            got: u.nrows(),
        });
    }
    if u.ncols() != c.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: c.dim(),
            got: u.ncols(),
        });
    }
    if u.ncols() == 0 || c.numeric_rank() == 0 {
        return f.solve(b);
    }
    if !f.is_cholesky() {
        return Err(LinalgError::KindMismatch);
    }
    let s = sign.as_f64();
    let ut = u * c.pseudo_inverse_sqrt(); // Ũ with Ũ·Ũᵀ = U·C†·Uᵀ
    let r = ut.ncols();
    let gi_ut = f.solve(&ut)?;
    let gi_b = f.solve(b)?;
    let capacitance =
        SymMat::symmetrize(DMatrix::identity(r, r) + s * (ut.transpose() * &gi_ut));
    let cap_l = gaxpy_cholesky(capacitance.matrix(), 1e-12 * r as f64)
        .ok_or(LinalgError::InnerSystemSingular)?;
    let mut y = ut.transpose() * &gi_b;
    forward_substitute(&cap_l, &mut y);
    back_substitute_transposed(&cap_l, &mut y);
    Ok(gi_b - s * (gi_ut * y))
}

/// Generalized Schur complement of the trailing block: for
/// `M = [[A, B], [Bᵀ, D]]` with `A` of size `head`, returns `A − B·D†·Bᵀ`.
pub fn gsc(m: &SymMat, head: usize, tol: f64) -> Result<SymMat> {
    let n = m.dim();
    if head > n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: head,
        });
    }
    let tail = n - head;
    let a = m.view((0, 0), (head, head)).into_owned();
    let b = m.view((0, head), (head, tail)).into_owned();
    let d = SymMat::symmetrize(m.view((head, head), (tail, tail)).into_owned());
    let df = factor_psd(&d, tol)?;
    let x = df.solve(&b.transpose())?; // D†·Bᵀ
    Ok(SymMat::symmetrize(a - b * x))
}
