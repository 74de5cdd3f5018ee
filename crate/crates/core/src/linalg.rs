//! Dense symmetric positive-definite factorization with a jitter ladder.
//!
//! All `Σ⁻¹ B` products in the crate go through [`Cholesky`]. The factor is
//! computed sequentially so results do not depend on thread scheduling.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::{cholesky_in_place, cholesky_in_place_scratch};
use faer::{MatMut, Par};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter levels tried in order when a plain factorization fails.
/// Each level is multiplied by the mean of the diagonal.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Lower Cholesky factor `L` with `L Lᵀ = Σ + jitter·I`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
    jitter: f64,
}

/// Factor `m + shift·I` in place. faer only touches the lower triangle, so
/// the strict upper triangle still holds the input when this returns `false`.
fn factor_in_place(m: &mut DMatrix<f64>, shift: f64) -> bool {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)] += shift;
    }
    let mut mem = MemBuffer::new(cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default()));
    let stack = MemStack::new(&mut mem);
    let view = MatMut::from_column_major_slice_mut(m.as_mut_slice(), n, n);
    if cholesky_in_place(view, Default::default(), Par::Seq, stack, Default::default()).is_err() {
        return false;
    }
    m.diagonal().iter().all(|d| d.is_finite() && *d > 0.0)
}

/// Copy the strict upper triangle onto the lower one and reset the diagonal.
fn restore_lower(m: &mut DMatrix<f64>, diag: &[f64]) {
    let n = m.nrows();
    for j in 0..n {
        m[(j, j)] = diag[j];
        for i in j + 1..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("covariance is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    Ok(())
}

impl Cholesky {
    /// Factor a symmetric matrix, escalating jitter along [`JITTER_LADDER`].
    /// Only the lower triangle of `sigma` is read.
    pub fn factor(sigma: &DMatrix<f64>) -> Result<Self> {
        check_square(sigma)?;
        let mut m = sigma.clone();
        let n = m.nrows();
        for j in 0..n {
            for i in 0..j {
                m[(i, j)] = m[(j, i)];
            }
        }
        Self::factor_symmetric(m)
    }

    /// Same as [`Cholesky::factor`] but consumes a matrix whose upper and lower
    /// triangles are both filled, avoiding a copy.
    pub fn factor_symmetric(mut m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        let n = m.nrows();
        let diag: Vec<f64> = m.diagonal().iter().copied().collect();
        if diag.iter().any(|d| !d.is_finite()) {
            return Err(Error::NotPositiveDefinite { attempted: vec![] });
        }
        let mut jitter = 0.0;
        let mut ok = factor_in_place(&mut m, 0.0);
        if !ok {
            let mean_diag = (diag.iter().sum::<f64>() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
            let mut attempted = Vec::with_capacity(JITTER_LADDER.len());
            for eps in JITTER_LADDER {
                jitter = eps * mean_diag;
                attempted.push(jitter);
                restore_lower(&mut m, &diag);
                if factor_in_place(&mut m, jitter) {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(Error::NotPositiveDefinite { attempted });
            }
        }
        for j in 1..n {
            for i in 0..j {
                m[(i, j)] = 0.0;
            }
        }
        Ok(Cholesky { l: m, jitter })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Diagonal shift that was needed to factor the matrix (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `L⁻¹ B`
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `Σ⁻¹ b`
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_lower(b);
        self.l.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `Σ⁻¹ B`
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = self.solve_lower_mat(b);
        self.l.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// `bᵀ Σ⁻¹ b`
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.solve_lower(b).norm_squared()
    }
}

/// Returns `Σ⁻¹ B` using triangular solves on the Cholesky factor of `Σ`.
pub fn chol_solve(sigma: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != sigma.nrows() {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, covariance has {}",
            b.nrows(),
            sigma.nrows()
        )));
    }
    Ok(Cholesky::factor(sigma)?.solve_mat(b))
}

/// Ordinary least squares solution together with `(XᵀX)⁻¹`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coef: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub fitted: DVector<f64>,
    pub rss: f64,
    pub n: usize,
}

impl LeastSquares {
    pub fn df(&self) -> usize {
        self.n.saturating_sub(self.coef.len())
    }

    /// `RSS / (n − p)`; NaN when there are no residual degrees of freedom.
    pub fn sigma2(&self) -> f64 {
        match self.df() {
            0 => f64::NAN,
            df => self.rss / df as f64,
        }
    }
}

/// Columns that are (numerically) linear combinations of earlier columns,
/// found by modified Gram-Schmidt in column order.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    const TOL: f64 = 1e-10;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for c in 0..x.ncols() {
        let col = x.column(c).into_owned();
        let norm = col.norm();
        let mut v = col;
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
        }
        let r = v.norm();
        if norm == 0.0 || r <= TOL * norm {
            dependent.push(c);
        } else {
            basis.push(v / r);
        }
    }
    dependent
}

/// OLS through a thin QR factorization. Fails with the indices of dependent
/// columns when the design is rank deficient.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LeastSquares> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!("design has {} rows, response has {}", x.nrows(), y.len())));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::RankDeficient { columns: (x.nrows()..x.ncols()).collect() });
    }
    let dep = dependent_columns(x);
    if !dep.is_empty() {
        return Err(Error::RankDeficient { columns: dep });
    }
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let qty = q.transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient { columns: vec![] })?;
    let p = x.ncols();
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::RankDeficient { columns: vec![] })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let fitted = x * &coef;
    let rss = (y - &fitted).norm_squared();
    Ok(LeastSquares { coef, xtx_inv, fitted, rss, n: x.nrows() })
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with `n - 1` denominator.
pub(crate) fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Linear-interpolation quantile (R type 7) of an already sorted slice.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve_returns_rhs() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 3.5, 0.0, 4.0, 7.0]);
        let x = chol_solve(&DMatrix::identity(3, 3), &b).unwrap();
        assert!((x - b).abs().max() < 1e-15);
    }

    #[test]
    fn diagonal_solve() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]));
        let x = chol_solve(&s, &DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert!((x[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((x[(1, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
        let b = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let x = chol_solve(&s, &b).unwrap();
        assert!((&s * x - b).abs().max() < 1e-8);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let s = DMatrix::from_element(2, 2, 1.0);
        let c = Cholesky::factor(&s).unwrap();
        assert!(c.jitter() > 0.0);
        assert!(c.jitter() <= 1e-6);
    }

    #[test]
    fn indefinite_matrix_reports_ladder() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match Cholesky::factor(&s) {
            Err(Error::NotPositiveDefinite { attempted }) => assert_eq!(attempted.len(), 5),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = Cholesky::factor(&s).unwrap();
        assert!((c.log_det() - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn least_squares_exact_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 5.0]);
        let y = DVector::from_vec(vec![3.0, 5.0, 7.0, 13.0]);
        let f = least_squares(&x, &y).unwrap();
        assert!((f.coef[0] - 3.0).abs() < 1e-12 && (f.coef[1] - 2.0).abs() < 1e-12);
        assert!(f.rss < 1e-20);
    }

    #[test]
    fn dependent_column_detected() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 4.0, 4.0]);
        assert_eq!(dependent_columns(&x), vec![2]);
        assert!(matches!(
            least_squares(&x, &DVector::zeros(3)),
            Err(Error::RankDeficient { columns }) if columns == vec![2]
        ));
    }

    #[test]
    fn type7_quantiles() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&s, 0.025) - 3.475).abs() < 1e-12);
        assert!((quantile_sorted(&s, 0.975) - 97.525).abs() < 1e-12);
    }
}
