//! Comparator estimators: OLS, logistic propensity scores, quintile
//! subclassification, AIPTW, PS-adjusted regression and Mahalanobis caliper
//! matching.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dependent_columns, least_squares, quantile_sorted, sorted, Cholesky};

/// Two-sided 95% normal quantile.
pub const Z975: f64 = 1.959_963_984_540_054;

/// Probabilities are clipped to `[PS_CLIP, 1 − PS_CLIP]` before weighting.
pub const PS_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorResult {
    pub ate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_dropped: usize,
    pub extras: BTreeMap<String, f64>,
}

impl EstimatorResult {
    /// Normal-approximation interval `ate ± 1.96·se`.
    pub fn normal(ate: f64, se: f64) -> Self {
        EstimatorResult {
            ate,
            se,
            ci_low: ate - Z975 * se,
            ci_high: ate + Z975 * se,
            n_dropped: 0,
            extras: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    /// `σ̂² (XᵀX)⁻¹`
    pub cov: DMatrix<f64>,
    pub sigma2: f64,
    pub fitted: DVector<f64>,
    pub rss: f64,
}

impl OlsFit {
    pub fn se(&self, j: usize) -> f64 {
        self.cov[(j, j)].sqrt()
    }
}

pub fn ols(y: &DVector<f64>, design: &DMatrix<f64>) -> Result<OlsFit> {
    let ls = least_squares(design, y)?;
    let sigma2 = ls.sigma2();
    Ok(OlsFit { cov: &ls.xtx_inv * sigma2, coef: ls.coef, sigma2, fitted: ls.fitted, rss: ls.rss })
}

/// `[1, X]`
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    d.columns_mut(1, x.ncols()).copy_from(x);
    d
}

/// OLS treatment effect from `y ~ 1 + a + X`, reporting the coefficient on `a`.
pub fn regression_adjusted(y: &DVector<f64>, a: &DVector<f64>, x: &DMatrix<f64>) -> Result<EstimatorResult> {
    let n = y.len();
    let mut d = DMatrix::from_element(n, x.ncols() + 2, 1.0);
    d.set_column(1, a);
    d.columns_mut(2, x.ncols()).copy_from(x);
    let fit = ols(y, &d)?;
    Ok(EstimatorResult::normal(fit.coef[1], fit.se(1)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityFit {
    /// Intercept followed by one slope per covariate, on the original scale.
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub ps: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn log_lik(a: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    // a·η − log(1 + e^η), written to avoid overflow
    a.iter()
        .zip(eta.iter())
        .map(|(ai, e)| ai * e - (e.max(0.0) + (-e.abs()).exp().ln_1p()))
        .sum()
}

/// Logistic regression of `a` on `[1, covariates]` by Newton–Raphson.
///
/// Covariates are standardized internally; coefficients and standard errors
/// are mapped back to the original scale. Iteration stops when the score's
/// largest entry falls below 1e-8 or after 50 steps. Steps are halved until
/// the log-likelihood does not decrease and no linear predictor exceeds 30
/// in magnitude, so separated data end with finite coefficients and
/// `converged == false`.
pub fn logistic_ps(a: &DVector<f64>, covariates: &DMatrix<f64>) -> Result<PropensityFit> {
    const MAX_ITER: usize = 50;
    const GRAD_TOL: f64 = 1e-8;
    const ETA_CAP: f64 = 30.0;
    let n = a.len();
    if covariates.nrows() != n {
        return Err(Error::Dimension(format!("covariates have {} rows, treatment has {n}", covariates.nrows())));
    }
    let n1 = a.iter().filter(|v| **v == 1.0).count();
    if n1 + a.iter().filter(|v| **v == 0.0).count() != n {
        return Err(Error::Data("treatment must be coded 0/1".into()));
    }
    if n1 == 0 || n1 == n {
        return Err(Error::Data("propensity model needs both treated and control units".into()));
    }
    let k = covariates.ncols();
    let mut means = vec![0.0; k];
    let mut sds = vec![1.0; k];
    for c in 0..k {
        let col: Vec<f64> = covariates.column(c).iter().copied().collect();
        means[c] = crate::linalg::mean(&col);
        let sd = crate::linalg::sample_var(&col).sqrt();
        if sd > 0.0 && sd.is_finite() {
            sds[c] = sd;
        }
    }
    let xs = DMatrix::from_fn(n, k, |i, c| (covariates[(i, c)] - means[c]) / sds[c]);
    let x = with_intercept(&xs);
    let dep = dependent_columns(&x);
    let active: Vec<usize> = (0..=k).filter(|c| !dep.contains(c)).collect();
    if !dep.is_empty() {
        log::warn!("propensity covariates {:?} are collinear and fixed at zero", dep.iter().map(|c| c - 1).collect::<Vec<_>>());
    }
    let xa = x.select_columns(&active);
    let p = active.len();

    let mut beta = DVector::<f64>::zeros(p);
    let mean_a = n1 as f64 / n as f64;
    beta[0] = (mean_a / (1.0 - mean_a)).ln();
    let mut eta = &xa * &beta;
    let mut ll = log_lik(a, &eta);
    let mut converged = false;
    let mut iterations = 0;
    let mut hess_chol = None;
    for it in 0..=MAX_ITER {
        let probs = eta.map(logistic);
        let grad = xa.transpose() * (a - &probs);
        let w = probs.map(|pi| pi * (1.0 - pi));
        let mut h = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let row = xa.row(i);
            h.ger(w[i], &row.transpose(), &row.transpose(), 1.0);
        }
        let chol = Cholesky::factor(&h)?;
        hess_chol = Some(chol);
        if grad.amax() < GRAD_TOL {
            converged = true;
            iterations = it;
            break;
        }
        if it == MAX_ITER {
            iterations = it;
            break;
        }
        let step = hess_chol.as_ref().expect("set above").solve(&grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let cand_eta = &xa * &cand;
            if cand_eta.amax() <= ETA_CAP {
                let cand_ll = log_lik(a, &cand_eta);
                // allow for rounding in the log-likelihood near the optimum
                if cand_ll >= ll - 1e-12 * (1.0 + ll.abs()) {
                    beta = cand;
                    eta = cand_eta;
                    ll = cand_ll;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            iterations = it;
            break;
        }
    }
    if !converged {
        log::warn!("logistic propensity fit did not converge (possible separation)");
    }

    // map (intercept, standardized slopes) back to the original scale
    let mut t = DMatrix::<f64>::zeros(k + 1, p);
    for (j, &c) in active.iter().enumerate() {
        if c == 0 {
            t[(0, j)] = 1.0;
        } else {
            t[(c, j)] = 1.0 / sds[c - 1];
            t[(0, j)] = -means[c - 1] / sds[c - 1];
        }
    }
    let coef = &t * &beta;
    let inv_h = hess_chol.expect("at least one iteration").solve_mat(&DMatrix::identity(p, p));
    let cov = &t * inv_h * t.transpose();
    let se = (0..=k)
        .map(|c| if c == 0 || active.contains(&c) { cov[(c, c)].max(0.0).sqrt() } else { f64::NAN })
        .collect();
    Ok(PropensityFit {
        coef: coef.iter().copied().collect(),
        se,
        ps: eta.iter().map(|e| logistic(*e)).collect(),
        converged,
        iterations,
    })
}

fn check_inputs(y: &DVector<f64>, a: &DVector<f64>, ps: &[f64]) -> Result<()> {
    if a.len() != y.len() || ps.len() != y.len() {
        return Err(Error::Dimension(format!("y has {} rows, a has {}, ps has {}", y.len(), a.len(), ps.len())));
    }
    if a.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Data("treatment must be coded 0/1".into()));
    }
    if let Some((i, p)) = ps.iter().enumerate().find(|(_, p)| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(Error::Data(format!("propensity score of unit {i} is {p}, outside [0, 1]")));
    }
    Ok(())
}

/// Subclassification on propensity quintiles (R type-7 cut points; a unit
/// goes to stratum `#{cut < ps}`). Strata missing an arm are dropped and
/// counted in `extras["strata_dropped"]`; the remaining strata are weighted by
/// their share of the retained units. The SE pools within-arm, within-stratum
/// residual variance across retained strata.
pub fn qnt_ps(y: &DVector<f64>, a: &DVector<f64>, ps: &[f64]) -> Result<EstimatorResult> {
    check_inputs(y, a, ps)?;
    let s = sorted(ps);
    let cuts: Vec<f64> = [0.2, 0.4, 0.6, 0.8].iter().map(|p| quantile_sorted(&s, *p)).collect();
    let mut groups: Vec<[Vec<f64>; 2]> = vec![[Vec::new(), Vec::new()]; 5];
    for i in 0..y.len() {
        let k = cuts.iter().filter(|c| **c < ps[i]).count();
        groups[k][a[i] as usize].push(y[i]);
    }
    let mut dropped_strata = 0;
    let mut n_dropped = 0;
    let mut kept = Vec::new();
    for g in &groups {
        match (g[0].len(), g[1].len()) {
            (0, 0) => {}
            (0, m) | (m, 0) => {
                dropped_strata += 1;
                n_dropped += m;
            }
            _ => kept.push(g),
        }
    }
    if dropped_strata > 0 {
        log::warn!("{dropped_strata} propensity strata lack one arm and are dropped");
    }
    if kept.is_empty() {
        return Err(Error::Undefined("no propensity stratum contains both arms".into()));
    }
    let total: usize = kept.iter().map(|g| g[0].len() + g[1].len()).sum();
    let (mut ate, mut ss, mut var_factor) = (0.0, 0.0, 0.0);
    for g in &kept {
        let (m0, m1) = (crate::linalg::mean(&g[0]), crate::linalg::mean(&g[1]));
        let w = (g[0].len() + g[1].len()) as f64 / total as f64;
        ate += w * (m1 - m0);
        ss += g[0].iter().map(|v| (v - m0).powi(2)).sum::<f64>();
        ss += g[1].iter().map(|v| (v - m1).powi(2)).sum::<f64>();
        var_factor += w * w * (1.0 / g[0].len() as f64 + 1.0 / g[1].len() as f64);
    }
    let df = total as i64 - 2 * kept.len() as i64;
    if df <= 0 {
        return Err(Error::Undefined("too few units per stratum for a variance estimate".into()));
    }
    let se = (ss / df as f64 * var_factor).sqrt();
    let mut res = EstimatorResult::normal(ate, se);
    res.n_dropped = n_dropped;
    res.extras.insert("strata_used".into(), kept.len() as f64);
    res.extras.insert("strata_dropped".into(), dropped_strata as f64);
    Ok(res)
}

/// Predicted outcomes under each arm from separate OLS fits of `y ~ 1 + X`
/// within the treated and control groups. Returns `(m1, m0)`.
pub fn arm_regressions(y: &DVector<f64>, a: &DVector<f64>, x: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = with_intercept(x);
    let mut preds = Vec::with_capacity(2);
    for arm in [1.0, 0.0] {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| a[i] == arm).collect();
        let fit = ols(&y.select_rows(&rows), &d.select_rows(&rows))?;
        preds.push(&d * fit.coef);
    }
    let m0 = preds.pop().expect("two arms");
    let m1 = preds.pop().expect("two arms");
    Ok((m1, m0))
}

/// Augmented inverse-probability weighting with outcome predictions `m1`,
/// `m0`. SE is the sample SD of the influence contributions over `√n`.
pub fn aiptw(
    y: &DVector<f64>,
    a: &DVector<f64>,
    ps: &[f64],
    m1: &DVector<f64>,
    m0: &DVector<f64>,
) -> Result<EstimatorResult> {
    check_inputs(y, a, ps)?;
    let n = y.len();
    if m1.len() != n || m0.len() != n {
        return Err(Error::Dimension("outcome predictions do not match the sample size".into()));
    }
    if n < 2 {
        return Err(Error::Undefined("AIPTW needs at least two units".into()));
    }
    let mut n_clipped = 0;
    let phi: Vec<f64> = (0..n)
        .map(|i| {
            let e = ps[i].clamp(PS_CLIP, 1.0 - PS_CLIP);
            if e != ps[i] {
                n_clipped += 1;
            }
            a[i] * (y[i] - m1[i]) / e + m1[i] - (1.0 - a[i]) * (y[i] - m0[i]) / (1.0 - e) - m0[i]
        })
        .collect();
    let ate = crate::linalg::mean(&phi);
    let se = (crate::linalg::sample_var(&phi) / n as f64).sqrt();
    let mut res = EstimatorResult::normal(ate, se);
    res.extras.insert("ps_clipped".into(), n_clipped as f64);
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PsBasis {
    Linear,
    CubicBspline,
}

/// Clamped cubic B-spline basis on `[lo, hi]` with the given interior knots.
/// Returns `interior.len() + 4` columns whose rows sum to one.
pub fn bspline_basis(x: &[f64], interior: &[f64], lo: f64, hi: f64) -> DMatrix<f64> {
    const DEG: usize = 3;
    let mut knots = vec![lo; DEG + 1];
    knots.extend_from_slice(interior);
    knots.extend(std::iter::repeat_n(hi, DEG + 1));
    let m = knots.len() - DEG - 1;
    let last_span = (0..knots.len() - 1).rev().find(|&j| knots[j] < knots[j + 1]).unwrap_or(0);
    let mut basis = DMatrix::zeros(x.len(), m);
    for (r, &xv) in x.iter().enumerate() {
        let xv = xv.clamp(lo, hi);
        // degree-0 indicators; the right boundary belongs to the last span
        let mut b: Vec<f64> = (0..knots.len() - 1)
            .map(|j| {
                let inside = knots[j] <= xv && xv < knots[j + 1];
                (inside || (j == last_span && xv == hi)) as u8 as f64
            })
            .collect();
        for d in 1..=DEG {
            let next: Vec<f64> = (0..knots.len() - 1 - d)
                .map(|j| {
                    let left = knots[j + d] - knots[j];
                    let right = knots[j + d + 1] - knots[j + 1];
                    let mut v = 0.0;
                    if left > 0.0 {
                        v += (xv - knots[j]) / left * b[j];
                    }
                    if right > 0.0 {
                        v += (knots[j + d + 1] - xv) / right * b[j + 1];
                    }
                    v
                })
                .collect();
            b = next;
        }
        for j in 0..m {
            basis[(r, j)] = b[j];
        }
    }
    basis
}

/// OLS of `y` on `(1, a, basis(ps))`; the ATE is the coefficient on `a`.
/// Basis columns that are linear combinations of earlier columns are dropped
/// and counted in `extras["dropped_columns"]`.
pub fn lm_ps(y: &DVector<f64>, a: &DVector<f64>, ps: &[f64], mode: PsBasis) -> Result<EstimatorResult> {
    check_inputs(y, a, ps)?;
    let n = y.len();
    let lo = ps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let basis = match mode {
        PsBasis::Linear => DMatrix::from_column_slice(n, 1, ps),
        PsBasis::CubicBspline if hi > lo => {
            let s = sorted(ps);
            let interior: Vec<f64> = [0.2, 0.4, 0.6, 0.8].iter().map(|p| quantile_sorted(&s, *p)).collect();
            bspline_basis(ps, &interior, lo, hi)
        }
        PsBasis::CubicBspline => DMatrix::from_element(n, 1, 1.0),
    };
    let mut d = DMatrix::from_element(n, basis.ncols() + 2, 1.0);
    d.set_column(1, a);
    d.columns_mut(2, basis.ncols()).copy_from(&basis);
    let dep = dependent_columns(&d);
    if dep.contains(&0) || dep.contains(&1) {
        return Err(Error::Undefined("treatment indicator is collinear with the intercept".into()));
    }
    let keep: Vec<usize> = (0..d.ncols()).filter(|c| !dep.contains(c)).collect();
    let fit = ols(y, &d.select_columns(&keep))?;
    let mut res = EstimatorResult::normal(fit.coef[1], fit.se(1));
    res.extras.insert("dropped_columns".into(), dep.len() as f64);
    Ok(res)
}

/// Nearest-control Mahalanobis matching for every treated unit, with
/// replacement and ties broken by lowest index. A pair is dropped when any
/// covariate differs by more than `caliper` standard deviations. The estimate
/// is the mean matched difference over retained pairs.
///
/// SE: `(1/N₁²)[Σ(d_i − τ̂)² + Σ_j K_j(K_j − 1)σ̂²_j]` where `K_j` counts the
/// reuse of control `j` and `σ̂²_j = ½(Y_j − Y_j')²` with `j'` the control
/// nearest to `j`.
pub fn md_match(y: &DVector<f64>, a: &DVector<f64>, x: &DMatrix<f64>, caliper: f64) -> Result<EstimatorResult> {
    let n = y.len();
    if a.len() != n || x.nrows() != n {
        return Err(Error::Dimension(format!("y has {n} rows, a has {}, x has {}", a.len(), x.nrows())));
    }
    if !(caliper > 0.0) {
        return Err(Error::Argument(format!("caliper must be positive, got {caliper}")));
    }
    let k = x.ncols();
    let treated: Vec<usize> = (0..n).filter(|&i| a[i] == 1.0).collect();
    let controls: Vec<usize> = (0..n).filter(|&i| a[i] == 0.0).collect();
    if treated.len() + controls.len() != n {
        return Err(Error::Data("treatment must be coded 0/1".into()));
    }
    if treated.is_empty() || controls.is_empty() {
        return Err(Error::Undefined("matching needs both treated and control units".into()));
    }
    let mean = DVector::from_fn(k, |c, _| x.column(c).mean());
    let centered = DMatrix::from_fn(n, k, |i, c| x[(i, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let chol = Cholesky::factor(&cov)?;
    if chol.jitter() > 0.0 {
        return Err(Error::Data("pooled covariate covariance is singular".into()));
    }
    let sds: Vec<f64> = (0..k).map(|c| cov[(c, c)].sqrt()).collect();
    // whitened covariates: Mahalanobis distance is Euclidean in L⁻¹x
    let white = chol.solve_lower_mat(&x.transpose());
    let dist2 = |i: usize, j: usize| (white.column(i) - white.column(j)).norm_squared();
    let nearest = |i: usize, exclude: Option<usize>| {
        let mut best: Option<(usize, f64)> = None;
        for &j in &controls {
            if Some(j) == exclude {
                continue;
            }
            let d = dist2(i, j);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    };

    let mut diffs = Vec::new();
    let mut uses: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in &treated {
        let j = nearest(i, None).expect("controls exist");
        let within = (0..k).all(|c| sds[c] == 0.0 || (x[(i, c)] - x[(j, c)]).abs() / sds[c] <= caliper);
        if within {
            diffs.push(y[i] - y[j]);
            *uses.entry(j).or_default() += 1;
        }
    }
    if diffs.is_empty() {
        return Err(Error::Undefined(format!("no treated unit has a control within caliper {caliper}")));
    }
    let m = diffs.len() as f64;
    let ate = diffs.iter().sum::<f64>() / m;
    let mut v = diffs.iter().map(|d| (d - ate).powi(2)).sum::<f64>();
    for (&j, &kj) in &uses {
        if kj > 1 {
            let s2 = nearest(j, Some(j)).map_or(0.0, |j2| 0.5 * (y[j] - y[j2]).powi(2));
            v += (kj * (kj - 1)) as f64 * s2;
        }
    }
    let se = v.sqrt() / m;
    let mut res = EstimatorResult::normal(ate, se);
    res.n_dropped = treated.len() - diffs.len();
    res.extras.insert("n_matched".into(), m);
    res.extras.insert("unique_controls".into(), uses.len() as f64);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn ols_exact_line() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 5.0]);
        let fit = ols(&dv(&[3.0, 5.0, 7.0, 13.0]), &x).unwrap();
        assert!((fit.coef[0] - 3.0).abs() < 1e-12 && (fit.coef[1] - 2.0).abs() < 1e-12);
        assert!(fit.sigma2.abs() < 1e-20);
    }

    #[test]
    fn ols_three_points_hand_oracle() {
        // y = (1, 2, 4) on x = (0, 1, 2): slope 1.5, intercept 5/6, rss 1/6
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let fit = ols(&dv(&[1.0, 2.0, 4.0]), &x).unwrap();
        assert!((fit.coef[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((fit.coef[1] - 1.5).abs() < 1e-12);
        assert!((fit.rss - 1.0 / 6.0).abs() < 1e-12);
        // var(slope) = σ̂² / Σ(x − x̄)² = (1/6) / 2
        assert!((fit.cov[(1, 1)] - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn ols_duplicate_column_is_rank_error() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0]);
        match ols(&dv(&[1.0, 2.0, 3.0]), &x) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, vec![2]),
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn logistic_independent_covariate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4000;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = DVector::from_fn(n, |_, _| rng.random_bool(0.5) as u8 as f64);
        let fit = logistic_ps(&a, &x).unwrap();
        assert!(fit.converged);
        let mean_a = a.mean();
        assert!((fit.coef[0] - (mean_a / (1.0 - mean_a)).ln()).abs() < 0.01);
        assert!(fit.coef[1].abs() < 3.0 * fit.se[1]);
    }

    #[test]
    fn logistic_score_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 300;
        let x = DMatrix::from_fn(n, 2, |_, c| rng.sample::<f64, _>(StandardNormal) * (1.0 + 3.0 * c as f64) + 10.0);
        let a = DVector::from_fn(n, |i, _| {
            let eta = 0.8 * (x[(i, 0)] - 10.0) - 0.2 * (x[(i, 1)] - 10.0);
            rng.random_bool(logistic(eta)) as u8 as f64
        });
        let fit = logistic_ps(&a, &x).unwrap();
        assert!(fit.converged);
        let resid = DVector::from_fn(n, |i, _| a[i] - fit.ps[i]);
        let score = with_intercept(&x).transpose() * resid;
        assert!(score.amax() < 1e-6, "{score}");
        for i in 0..n {
            let eta = fit.coef[0] + fit.coef[1] * x[(i, 0)] + fit.coef[2] * x[(i, 1)];
            assert!((fit.ps[i] - logistic(eta)).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_separation_is_flagged() {
        let x = DMatrix::from_column_slice(6, 1, &[-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]);
        let a = dv(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let fit = logistic_ps(&a, &x).unwrap();
        assert!(!fit.converged);
        assert!(fit.coef.iter().all(|c| c.is_finite()));
        assert!(fit.ps.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn qnt_single_stratum_is_naive_difference() {
        let y = dv(&[1.0, 2.0, 6.0, 8.0, 3.0]);
        let a = dv(&[0.0, 0.0, 1.0, 1.0, 0.0]);
        let res = qnt_ps(&y, &a, &[0.3; 5]).unwrap();
        assert!((res.ate - (7.0 - 2.0)).abs() < 1e-15);
        assert_eq!(res.extras["strata_used"], 1.0);
    }

    #[test]
    fn qnt_two_strata_hand_example() {
        // 10 units; ps values put units 0-5 in stratum 0 and 6-9 in stratum 4
        let ps = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.9];
        let a = dv(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let y = dv(&[5.0, 7.0, 1.0, 2.0, 3.0, 2.0, 10.0, 12.0, 11.0, 4.0]);
        let res = qnt_ps(&y, &a, &ps).unwrap();
        let expected = 0.6 * (6.0 - 2.0) + 0.4 * (11.0 - 4.0);
        assert!((res.ate - expected).abs() < 1e-12);
        // pooled SS: 2 + 2 + 2 + 0 over 10 − 4 df
        let var: f64 = 6.0 / 6.0 * (0.36 * (1.0 / 4.0 + 1.0 / 2.0) + 0.16 * (1.0 + 1.0 / 3.0));
        assert!((res.se - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn qnt_drops_one_arm_strata() {
        let ps = [0.1, 0.1, 0.1, 0.1, 0.9, 0.9];
        let a = dv(&[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let y = dv(&[3.0, 1.0, 4.0, 1.0, 9.0, 9.0]);
        let res = qnt_ps(&y, &a, &ps).unwrap();
        assert_eq!(res.n_dropped, 2);
        assert_eq!(res.extras["strata_dropped"], 1.0);
        assert!((res.ate - 2.5).abs() < 1e-12);
    }

    #[test]
    fn randomized_quintiles_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5000;
        let ps: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
        let a = DVector::from_fn(n, |_, _| rng.random_bool(0.5) as u8 as f64);
        let y = DVector::from_fn(n, |i, _| 2.0 * a[i] + rng.sample::<f64, _>(StandardNormal));
        let res = qnt_ps(&y, &a, &ps).unwrap();
        assert!((res.ate - 2.0).abs() < 3.0 * res.se + 0.01);
    }

    #[test]
    fn aiptw_reduces_to_horvitz_thompson() {
        let y = dv(&[2.0, 4.0, 1.0, 3.0]);
        let a = dv(&[1.0, 1.0, 0.0, 0.0]);
        let zero = DVector::zeros(4);
        let res = aiptw(&y, &a, &[0.5; 4], &zero, &zero).unwrap();
        let ht = (2.0 + 4.0) / 0.5 / 4.0 - (1.0 + 3.0) / 0.5 / 4.0;
        assert!((res.ate - ht).abs() < 1e-15);
    }

    fn confounded(seed: u64, n: usize) -> (DVector<f64>, DVector<f64>, DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e: Vec<f64> = (0..n).map(|i| logistic(0.8 * x[(i, 0)])).collect();
        let a = DVector::from_fn(n, |i, _| rng.random_bool(e[i]) as u8 as f64);
        let y = DVector::from_fn(n, |i, _| 1.0 + 3.0 * a[i] + 2.0 * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal));
        (y, a, x, e)
    }

    #[test]
    fn aiptw_correct_outcome_wrong_propensity() {
        let (y, a, x, _) = confounded(10, 4000);
        let (m1, m0) = arm_regressions(&y, &a, &x).unwrap();
        let res = aiptw(&y, &a, &vec![0.5; y.len()], &m1, &m0).unwrap();
        assert!((res.ate - 3.0).abs() < 3.0 * res.se, "{res:?}");
    }

    #[test]
    fn aiptw_correct_propensity_wrong_outcome() {
        let (y, a, _, e) = confounded(11, 4000);
        let zero = DVector::zeros(y.len());
        let res = aiptw(&y, &a, &e, &zero, &zero).unwrap();
        assert!((res.ate - 3.0).abs() < 3.0 * res.se, "{res:?}");
    }

    #[test]
    fn aiptw_shift_invariance() {
        let (y, a, x, _) = confounded(12, 300);
        let ps = logistic_ps(&a, &x).unwrap().ps;
        let (m1, m0) = arm_regressions(&y, &a, &x).unwrap();
        let base = aiptw(&y, &a, &ps, &m1, &m0).unwrap();
        let y2 = y.add_scalar(17.0);
        let (m1b, m0b) = arm_regressions(&y2, &a, &x).unwrap();
        let shifted = aiptw(&y2, &a, &ps, &m1b, &m0b).unwrap();
        assert!((base.ate - shifted.ate).abs() < 1e-10);
    }

    #[test]
    fn lm_ps_constant_and_exact() {
        let y = dv(&[1.0, 2.0, 6.0, 8.0]);
        let a = dv(&[0.0, 0.0, 1.0, 1.0]);
        let res = lm_ps(&y, &a, &[0.4; 4], PsBasis::Linear).unwrap();
        assert!((res.ate - 5.5).abs() < 1e-12);
        assert_eq!(res.extras["dropped_columns"], 1.0);
        let ps = [0.1, 0.5, 0.3, 0.9, 0.6];
        let a = dv(&[0.0, 1.0, 0.0, 1.0, 0.0]);
        let y = DVector::from_fn(5, |i, _| a[i] + ps[i]);
        let res = lm_ps(&y, &a, &ps, PsBasis::Linear).unwrap();
        assert!((res.ate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bspline_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps: Vec<f64> = (0..50).map(|_| rng.random_range(0.05..0.95)).collect();
        let s = sorted(&ps);
        let interior: Vec<f64> = [0.2, 0.4, 0.6, 0.8].iter().map(|p| quantile_sorted(&s, *p)).collect();
        let b = bspline_basis(&ps, &interior, s[0], s[49]);
        assert_eq!(b.ncols(), 8);
        for r in 0..50 {
            assert!((b.row(r).sum() - 1.0).abs() < 1e-10);
            assert!(b.row(r).iter().all(|v| *v >= -1e-15));
        }
    }

    #[test]
    fn bspline_matches_cubic_polynomial_fit() {
        // a cubic lies in the spline space, so the regression reproduces it
        let ps: Vec<f64> = (0..40).map(|i| 0.05 + 0.9 * i as f64 / 39.0).collect();
        let a = DVector::from_fn(40, |i, _| (i % 3 == 0) as u8 as f64);
        let y = DVector::from_fn(40, |i, _| 2.0 * a[i] + 4.0 * ps[i].powi(3) - ps[i]);
        let res = lm_ps(&y, &a, &ps, PsBasis::CubicBspline).unwrap();
        assert!((res.ate - 2.0).abs() < 1e-9);
    }

    #[test]
    fn exact_duplicates_match_perfectly() {
        let x = DMatrix::from_row_slice(6, 2, &[0.0, 1.0, 2.0, 0.5, -1.0, 3.0, 0.0, 1.0, 2.0, 0.5, -1.0, 3.0]);
        let a = dv(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let y = dv(&[5.0, 6.0, 2.0, 1.0, 1.5, 0.0]);
        let res = md_match(&y, &a, &x, 0.01).unwrap();
        assert_eq!(res.n_dropped, 0);
        assert!((res.ate - (4.0 + 4.5 + 2.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_binary_covariate_forces_drops() {
        // treated units with flag = 1 have no flagged control
        let x = DMatrix::from_row_slice(8, 2, &[
            0.1, 1.0, 0.2, 1.0, 0.3, 0.0, 0.4, 0.0, 0.12, 0.0, 0.22, 0.0, 0.31, 0.0, 0.41, 0.0,
        ]);
        let a = dv(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let y = dv(&[3.0, 3.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]);
        let res = md_match(&y, &a, &x, 0.5).unwrap();
        assert_eq!(res.n_dropped, 2);
        assert!((res.ate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn drops_non_increasing_in_caliper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let a = DVector::from_fn(n, |i, _| rng.random_bool(logistic(-x[(i, 0)] - x[(i, 1)])) as u8 as f64);
        let y = DVector::from_fn(n, |i, _| 3.0 + 5.0 * a[i] + x[(i, 0)].powi(3));
        let mut last = usize::MAX;
        for cal in [0.05, 0.125, 0.25, 0.5, 1.0, 2.0] {
            let res = md_match(&y, &a, &x, cal).unwrap();
            assert!(res.n_dropped <= last);
            last = res.n_dropped;
        }
    }

    #[test]
    fn no_match_within_caliper_is_undefined() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.1, 5.0, 5.1]);
        let a = dv(&[1.0, 1.0, 0.0, 0.0]);
        let y = dv(&[1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(md_match(&y, &a, &x, 0.1), Err(Error::Undefined(_))));
    }
}
