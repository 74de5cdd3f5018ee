//! Weight-space view of a fitted GP covariance and the residual-on-residual
//! estimating equation for `τ`.
//!
//! The GP smoother `W` (rows of `K Σ⁻¹`, optionally row-normalized) gives
//! fitted outcomes `Ỹ = W y` and fitted treatments `Ã = W a`. Units whose
//! treatment is well predicted by their neighbours (`A ≈ Ã`) carry no
//! information about `τ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covkernel::{build_covariance, kernel_matrix, KernelParams};
use crate::error::{Error, Result};
use crate::linalg::{quantile_sorted, sorted, Cholesky};

/// Sums of squared treatment residuals at or below `n · NO_OVERLAP_TOL` are
/// treated as zero.
pub const NO_OVERLAP_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct WeightSpace {
    pub w: DMatrix<f64>,
    pub y_tilde: DVector<f64>,
    pub a_tilde: DVector<f64>,
    pub normalized: bool,
}

/// Build `W` from kernel covariates `v` (already on the scale the parameters
/// refer to). With `normalize` each row of `K Σ⁻¹` is divided by its sum and a
/// non-positive row sum is an error; otherwise the raw predictive weights are
/// used.
pub fn weight_matrix(
    v: &DMatrix<f64>,
    params: &KernelParams,
    y: &DVector<f64>,
    a: &DVector<f64>,
    normalize: bool,
) -> Result<WeightSpace> {
    let n = v.nrows();
    if y.len() != n || a.len() != n {
        return Err(Error::Dimension(format!("V has {n} rows, y has {}, a has {}", y.len(), a.len())));
    }
    params.validate()?;
    let k = kernel_matrix(v, params)?;
    let chol = Cholesky::factor(&build_covariance(v, params)?)?;
    // Σ and K are symmetric, so K Σ⁻¹ = (Σ⁻¹ K)ᵀ.
    let mut w = chol.solve_mat(&k).transpose();
    if normalize {
        for i in 0..n {
            let s: f64 = w.row(i).sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateWeights { row: i, sum: s });
            }
            w.row_mut(i).unscale_mut(s);
        }
    }
    let y_tilde = &w * y;
    let a_tilde = &w * a;
    Ok(WeightSpace { w, y_tilde, a_tilde, normalized: normalize })
}

fn check_len(ws: &WeightSpace, y: &DVector<f64>, a: &DVector<f64>) -> Result<()> {
    if y.len() != ws.y_tilde.len() || a.len() != ws.a_tilde.len() {
        return Err(Error::Dimension(format!(
            "weight space has {} units, y has {}, a has {}",
            ws.y_tilde.len(),
            y.len(),
            a.len()
        )));
    }
    Ok(())
}

/// `ψ_i(τ) = (Y_i − Ỹ_i − τ(A_i − Ã_i))(A_i − Ã_i)`.
pub fn psi(tau: f64, ws: &WeightSpace, y: &DVector<f64>, a: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(ws, y, a)?;
    Ok(DVector::from_fn(y.len(), |i, _| {
        let d = a[i] - ws.a_tilde[i];
        (y[i] - ws.y_tilde[i] - tau * d) * d
    }))
}

/// Root of `Σψ_i(τ) = 0`: `Σ(Y−Ỹ)(A−Ã) / Σ(A−Ã)²`.
pub fn solve_tau(ws: &WeightSpace, y: &DVector<f64>, a: &DVector<f64>) -> Result<f64> {
    check_len(ws, y, a)?;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        let d = a[i] - ws.a_tilde[i];
        num += (y[i] - ws.y_tilde[i]) * d;
        den += d * d;
    }
    if !(den > NO_OVERLAP_TOL * y.len() as f64) {
        return Err(Error::NoOverlap(den));
    }
    Ok(num / den)
}

/// Distribution of `|A_i − Ã_i|` across units.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapProfile {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
    /// Units with `|A_i − Ã_i| < 1e-6`.
    pub n_near_zero: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub tau: f64,
    pub sum_psi: f64,
    /// `Σ e_i d_i / √(Σe² Σd²)` with `e = Y−Ỹ−τ(A−Ã)` and `d = A−Ã`. Taken about
    /// zero rather than the means so that it vanishes exactly at the root.
    pub correlation: f64,
    /// Ordinary mean-centred correlation of the same residuals; `None` when
    /// either residual has zero variance.
    pub pearson: Option<f64>,
    /// At least one residual vector is identically zero; `correlation` is 0.
    pub zero_variance: bool,
    /// `Σ(A−Ã)²` is zero: the data carry no overlap information about `τ`.
    pub no_overlap: bool,
    pub overlap: OverlapProfile,
}

pub fn residual_independence_report(
    ws: &WeightSpace,
    y: &DVector<f64>,
    a: &DVector<f64>,
    tau: f64,
) -> Result<ResidualReport> {
    check_len(ws, y, a)?;
    let n = y.len();
    if n == 0 {
        return Err(Error::Data("empty dataset".into()));
    }
    let d: Vec<f64> = (0..n).map(|i| a[i] - ws.a_tilde[i]).collect();
    let e: Vec<f64> = (0..n).map(|i| y[i] - ws.y_tilde[i] - tau * d[i]).collect();
    let sed: f64 = e.iter().zip(&d).map(|(x, z)| x * z).sum();
    let see: f64 = e.iter().map(|x| x * x).sum();
    let sdd: f64 = d.iter().map(|x| x * x).sum();
    let no_overlap = !(sdd > NO_OVERLAP_TOL * n as f64);
    let zero_variance = !(see > 0.0) || no_overlap;
    let correlation = if zero_variance { 0.0 } else { sed / (see * sdd).sqrt() };
    let pearson = {
        let (me, md) = (e.iter().sum::<f64>() / n as f64, d.iter().sum::<f64>() / n as f64);
        let cov: f64 = e.iter().zip(&d).map(|(x, z)| (x - me) * (z - md)).sum();
        let ve: f64 = e.iter().map(|x| (x - me).powi(2)).sum();
        let vd: f64 = d.iter().map(|z| (z - md).powi(2)).sum();
        (ve > 0.0 && vd > 0.0).then(|| cov / (ve * vd).sqrt())
    };
    let abs: Vec<f64> = sorted(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let overlap = OverlapProfile {
        min: abs[0],
        q25: quantile_sorted(&abs, 0.25),
        median: quantile_sorted(&abs, 0.5),
        q75: quantile_sorted(&abs, 0.75),
        max: abs[n - 1],
        mean: abs.iter().sum::<f64>() / n as f64,
        n_near_zero: abs.iter().filter(|x| **x < 1e-6).count(),
    };
    if no_overlap {
        log::warn!("treatment residuals are all zero; no overlap information");
    }
    Ok(ResidualReport { tau, sum_psi: sed, correlation, pearson, zero_variance, no_overlap, overlap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(seed: u64, n: usize) -> (DMatrix<f64>, KernelParams, DVector<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.5f64..1.5));
        let a = DVector::from_fn(n, |i, _| if i % 2 == 0 || (i > 1 && rng.random_bool(0.3)) { 1.0 } else { 0.0 });
        let y = DVector::from_fn(n, |i, _| v[(i, 0)].powi(2) + 2.0 * a[i] + rng.random_range(-0.5..0.5));
        let params = KernelParams::new(rng.random_range(0.5..2.0), vec![rng.random_range(0.3..3.0), 1.0], 0.4).unwrap();
        (v, params, y, a)
    }

    fn ws_from(a_tilde: Vec<f64>, y_tilde: Vec<f64>) -> WeightSpace {
        let n = a_tilde.len();
        WeightSpace {
            w: DMatrix::zeros(n, n),
            y_tilde: DVector::from_vec(y_tilde),
            a_tilde: DVector::from_vec(a_tilde),
            normalized: true,
        }
    }

    #[test]
    fn smoothed_values_match_loop_oracle() {
        let (v, params, y, a) = instance(6, 6);
        let ws = weight_matrix(&v, &params, &y, &a, true).unwrap();
        // κ from an explicit inverse and scalar loops
        let sigma = build_covariance(&v, &params).unwrap();
        let inv = sigma.try_inverse().unwrap();
        let k = kernel_matrix(&v, &params).unwrap();
        for i in 0..6 {
            let kappa: Vec<f64> = (0..6).map(|j| (0..6).map(|m| k[(i, m)] * inv[(m, j)]).sum()).collect();
            let total: f64 = kappa.iter().sum();
            let yt: f64 = (0..6).map(|j| kappa[j] / total * y[j]).sum();
            assert!((ws.y_tilde[i] - yt).abs() < 1e-10);
        }
    }

    #[test]
    fn exchangeable_pair_averages() {
        let v = DMatrix::from_row_slice(2, 1, &[0.3, 0.3]);
        let params = KernelParams::new(1.0, vec![1.0], 0.0).unwrap();
        let y = DVector::from_vec(vec![1.0, 3.0]);
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let ws = weight_matrix(&v, &params, &y, &a, true).unwrap();
        for x in ws.w.iter() {
            assert!((x - 0.5).abs() < 1e-6);
        }
        assert!((ws.a_tilde[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn tiny_signal_is_diagonal_dominant() {
        let (v, _, y, a) = instance(3, 5);
        let params = KernelParams::new(1e-3, vec![1e-4, 1e-4], 1.0).unwrap();
        let ws = weight_matrix(&v, &params, &y, &a, true).unwrap();
        for i in 0..5 {
            assert!(ws.w[(i, i)] > 0.9, "row {i}: {}", ws.w[(i, i)]);
        }
    }

    #[test]
    fn raw_weights_are_not_normalized() {
        let (v, params, y, a) = instance(4, 7);
        let raw = weight_matrix(&v, &params, &y, &a, false).unwrap();
        let k = kernel_matrix(&v, &params).unwrap();
        let sigma = build_covariance(&v, &params).unwrap();
        let diff = &raw.w * &sigma - &k;
        assert!(diff.amax() < 1e-10);
        assert!(raw.w.row(0).sum() < 1.0);
    }

    #[test]
    fn psi_vanishes_without_treatment_residual() {
        let ws = ws_from(vec![1.0, 0.0, 1.0], vec![0.5, 0.2, 0.1]);
        let y = DVector::from_vec(vec![3.0, 1.0, 2.0]);
        let a = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        for tau in [-1.0, 0.0, 4.0] {
            assert!(psi(tau, &ws, &y, &a).unwrap().iter().all(|p| *p == 0.0));
        }
        assert!(matches!(solve_tau(&ws, &y, &a), Err(Error::NoOverlap(_))));
        let rep = residual_independence_report(&ws, &y, &a, 1.0).unwrap();
        assert!(rep.no_overlap && rep.zero_variance);
        assert_eq!(rep.correlation, 0.0);
        assert_eq!(rep.overlap.n_near_zero, 3);
    }

    #[test]
    fn exact_linear_outcome_recovers_tau() {
        let (v, params, _, a) = instance(9, 10);
        let y = a.map(|ai| 2.5 * ai + 7.0);
        let ws = weight_matrix(&v, &params, &y, &a, true).unwrap();
        let tau = solve_tau(&ws, &y, &a).unwrap();
        assert!((tau - 2.5).abs() < 1e-10);
    }

    #[test]
    fn pair_averaging_weights_give_mean_difference() {
        // pairs (0,1), (2,3), (4,5) each with one treated unit
        let n = 6;
        let w = DMatrix::from_fn(n, n, |i, j| if i / 2 == j / 2 { 0.5 } else { 0.0 });
        let y = DVector::from_vec(vec![4.0, 1.0, 0.0, 2.5, 3.0, -1.0]);
        let a = DVector::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let ws = WeightSpace { y_tilde: &w * &y, a_tilde: &w * &a, w, normalized: true };
        let tau = solve_tau(&ws, &y, &a).unwrap();
        let diff = (4.0 + 2.5 + 3.0) / 3.0 - (1.0 + 0.0 - 1.0) / 3.0;
        assert!((tau - diff).abs() < 1e-12);
    }

    #[test]
    fn perturbed_tau_gives_opposite_sign_correlation() {
        let (v, params, y, a) = instance(12, 40);
        let ws = weight_matrix(&v, &params, &y, &a, true).unwrap();
        let tau = solve_tau(&ws, &y, &a).unwrap();
        let at_root = residual_independence_report(&ws, &y, &a, tau).unwrap();
        assert!(at_root.correlation.abs() < 1e-8);
        let up = residual_independence_report(&ws, &y, &a, tau + 1.0).unwrap();
        assert!(up.correlation < 0.0);
        let down = residual_independence_report(&ws, &y, &a, tau - 1.0).unwrap();
        assert!(down.correlation > 0.0);
    }

    proptest! {
        #[test]
        fn rows_sum_to_one_and_root_zeroes_psi(seed in 0u64..5_000, n in 3usize..25) {
            let (v, params, y, a) = instance(seed, n);
            let ws = weight_matrix(&v, &params, &y, &a, true).unwrap();
            for i in 0..n {
                prop_assert!((ws.w.row(i).sum() - 1.0).abs() < 1e-12);
            }
            let tau = solve_tau(&ws, &y, &a).unwrap();
            prop_assert!(psi(tau, &ws, &y, &a).unwrap().sum().abs() < 1e-10);
            let s: Vec<f64> = [0.0, 1.0, 2.0].iter().map(|t| psi(*t, &ws, &y, &a).unwrap().sum()).collect();
            prop_assert!((s[2] - 2.0 * s[1] + s[0]).abs() < 1e-12 * (1.0 + s[0].abs()));
            let p = psi(0.7, &ws, &y, &a).unwrap();
            for i in 0..n {
                let d = a[i] - ws.a_tilde[i];
                prop_assert!(p[i].abs() <= (y[i] - ws.y_tilde[i] - 0.7 * d).abs() * d.abs() + 1e-15);
            }
        }
    }
}
