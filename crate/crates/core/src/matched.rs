//! Closed-form GLS treatment effects when the matching structure is known.
//!
//! With compound-symmetry blocks `Σ = ⊕_l (J + σ0²I)` the GLS estimate of
//! `τ` in `y = μ + τa + ε` splits into a within-block part `τ̂₁` and an
//! across-block part `τ̂₀`, mixed by `λ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;

/// Block membership of every unit plus per-block arm counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchingStructure {
    block_of: Vec<usize>,
    n_block: Vec<usize>,
    n_treated: Vec<usize>,
    n_control: Vec<usize>,
}

impl MatchingStructure {
    /// `block_of[i]` must lie in `0..L` and every block must be non-empty.
    pub fn new(block_of: Vec<usize>, a: &[f64]) -> Result<Self> {
        if block_of.len() != a.len() {
            return Err(Error::Dimension(format!("{} block labels for {} units", block_of.len(), a.len())));
        }
        if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::Data(format!("treatment of unit {i} is {v}, expected 0 or 1")));
        }
        let l = block_of.iter().copied().max().map_or(0, |m| m + 1);
        let mut n_treated = vec![0usize; l];
        let mut n_control = vec![0usize; l];
        for (&b, &ai) in block_of.iter().zip(a) {
            if ai == 1.0 {
                n_treated[b] += 1;
            } else {
                n_control[b] += 1;
            }
        }
        let n_block: Vec<usize> = n_treated.iter().zip(&n_control).map(|(t, c)| t + c).collect();
        if let Some(empty) = n_block.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("block labels are not contiguous: block {empty} is empty")));
        }
        Ok(MatchingStructure { block_of, n_block, n_treated, n_control })
    }

    /// Relabel arbitrary block keys to `0..L` in order of first appearance.
    pub fn from_keys<K: Eq + std::hash::Hash + Clone>(keys: &[K], a: &[f64]) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let labels = keys
            .iter()
            .map(|k| {
                let next = map.len();
                *map.entry(k.clone()).or_insert(next)
            })
            .collect();
        Self::new(labels, a)
    }

    pub fn n(&self) -> usize {
        self.block_of.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.n_block.len()
    }

    pub fn block_of(&self) -> &[usize] {
        &self.block_of
    }

    pub fn n_block(&self) -> &[usize] {
        &self.n_block
    }

    pub fn n_treated(&self) -> &[usize] {
        &self.n_treated
    }

    pub fn n_control(&self) -> &[usize] {
        &self.n_control
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GlsEstimate {
    pub mu_hat: f64,
    pub tau_hat: f64,
    pub lambda: f64,
    /// Within-block estimate `C1/D1`; absent when no block holds both arms.
    pub tau1_hat: Option<f64>,
    pub tau0_hat: f64,
    pub c1: f64,
    pub c2: f64,
    pub d1: f64,
    pub d2: f64,
    pub q: Vec<f64>,
    pub warnings: Vec<String>,
}

fn check_treatment(a: &DVector<f64>) -> Result<(usize, usize)> {
    let n1 = a.iter().filter(|v| **v == 1.0).count();
    let n0 = a.iter().filter(|v| **v == 0.0).count();
    if n1 + n0 != a.len() {
        return Err(Error::Data("treatment must be coded 0/1".into()));
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::RankDeficient { columns: vec![1] });
    }
    Ok((n1, n0))
}

/// GLS fit of `y` on `(1, a)` with covariance `sigma`; returns `(μ̂, τ̂)`.
pub fn gls_estimate(y: &DVector<f64>, a: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = y.len();
    if a.len() != n || sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::Dimension(format!(
            "y has {n} rows, a has {}, sigma is {}x{}",
            a.len(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    check_treatment(a)?;
    let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { a[i] });
    let chol = Cholesky::factor(sigma)?;
    let wz = chol.solve_mat(&z);
    let lhs = z.transpose() * &wz;
    let rhs = wz.transpose() * y;
    let det = lhs[(0, 0)] * lhs[(1, 1)] - lhs[(0, 1)] * lhs[(1, 0)];
    if !(det.abs() > 0.0) {
        return Err(Error::RankDeficient { columns: vec![1] });
    }
    let mu = (lhs[(1, 1)] * rhs[0] - lhs[(0, 1)] * rhs[1]) / det;
    let tau = (lhs[(0, 0)] * rhs[1] - lhs[(1, 0)] * rhs[0]) / det;
    Ok((mu, tau))
}

/// GLS estimate under block covariance `J + σ0²I` assembled from block sums.
pub fn weighted_sum_estimate(
    y: &DVector<f64>,
    a: &DVector<f64>,
    ms: &MatchingStructure,
    sigma02: f64,
) -> Result<GlsEstimate> {
    if y.len() != ms.n() || a.len() != ms.n() {
        return Err(Error::Dimension(format!("structure has {} units, y has {}, a has {}", ms.n(), y.len(), a.len())));
    }
    if !(sigma02 >= 0.0 && sigma02.is_finite()) {
        return Err(Error::Argument(format!("sigma02 must be a nonnegative number, got {sigma02}")));
    }
    check_treatment(a)?;
    let l = ms.n_blocks();
    let mut s1 = vec![0.0; l];
    let mut s0 = vec![0.0; l];
    for ((&b, &yi), &ai) in ms.block_of.iter().zip(y.iter()).zip(a.iter()) {
        if ai == 1.0 {
            s1[b] += yi;
        } else {
            s0[b] += yi;
        }
    }
    let rho = 1.0 / (1.0 + sigma02);
    let q: Vec<f64> = ms.n_block.iter().map(|&n| 1.0 / (1.0 - rho + rho * n as f64)).collect();

    let (mut sq_n, mut sq_n1, mut sq_n0) = (0.0, 0.0, 0.0);
    let (mut sq_s1, mut sq_s0, mut sq_within, mut sq_n1n0) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..l {
        let (n1, n0) = (ms.n_treated[k] as f64, ms.n_control[k] as f64);
        sq_n += q[k] * ms.n_block[k] as f64;
        sq_n1 += q[k] * n1;
        sq_n0 += q[k] * n0;
        sq_s1 += q[k] * s1[k];
        sq_s0 += q[k] * s0[k];
        // n1·n0·(Ȳ1 − Ȳ0) written with block sums so one-arm blocks give 0
        sq_within += q[k] * (n0 * s1[k] - n1 * s0[k]);
        sq_n1n0 += q[k] * n1 * n0;
    }
    let c1 = sq_n * sq_within;
    let c2 = sq_n0 * sq_s1 - sq_n1 * sq_s0;
    let d1 = sq_n * sq_n1n0;
    let d2 = sq_n1 * sq_n0;
    let tau0_hat = c2 / d2;
    let mut warnings = Vec::new();
    let (lambda, tau1_hat) = if d1 > 0.0 {
        (rho * d1 / (rho * d1 + (1.0 - rho) * d2), Some(c1 / d1))
    } else {
        let msg = "no block contains both arms; using the across-block estimate only".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        (0.0, None)
    };
    let tau_hat = match tau1_hat {
        Some(t1) => lambda * t1 + (1.0 - lambda) * tau0_hat,
        None => tau0_hat,
    };
    // 1ᵀΣ⁻¹ restricted to block l is q_l/σ² times a row of ones.
    let mu_hat = (sq_s1 + sq_s0 - tau_hat * sq_n1) / sq_n;
    Ok(GlsEstimate { mu_hat, tau_hat, lambda, tau1_hat, tau0_hat, c1, c2, d1, d2, q, warnings })
}

/// Shrinkage weight for equal-sized strata,
/// `N Σ n0_l n1_l / (n1 n0 σ0² + N Σ n0_l n1_l)`, evaluated as written.
pub fn stratified_lambda(ms: &MatchingStructure, sigma02: f64) -> f64 {
    let big_n = ms.n() as f64;
    let n1: usize = ms.n_treated.iter().sum();
    let n0: usize = ms.n_control.iter().sum();
    let within: f64 = ms.n_treated.iter().zip(&ms.n_control).map(|(&t, &c)| (t * c) as f64).sum();
    let num = big_n * within;
    num / ((n1 * n0) as f64 * sigma02 + num)
}
