//! Squared-exponential and block compound-symmetry covariance construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the squared-exponential kernel plus the noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Signal variance σf².
    pub sigma_f2: f64,
    /// One length scale per kernel covariate.
    pub phi: Vec<f64>,
    /// Noise variance σ0².
    pub sigma_02: f64,
}

impl KernelParams {
    pub fn new(sigma_f2: f64, phi: Vec<f64>, sigma_02: f64) -> Result<Self> {
        let p = KernelParams { sigma_f2, phi, sigma_02 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_f2.is_finite() && self.sigma_f2 > 0.0) {
            return Err(Error::Argument(format!("sigma_f2 must be positive, got {}", self.sigma_f2)));
        }
        if let Some((k, v)) = self.phi.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Argument(format!("phi[{k}] must be positive, got {v}")));
        }
        if !(self.sigma_02.is_finite() && self.sigma_02 >= 0.0) {
            return Err(Error::Argument(format!("sigma_02 must be nonnegative, got {}", self.sigma_02)));
        }
        Ok(())
    }

    pub fn q(&self) -> usize {
        self.phi.len()
    }

    /// Flat layout `(σf², φ₁..φ_q, σ0²)` used for chain storage.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.q() + 2);
        v.push(self.sigma_f2);
        v.extend_from_slice(&self.phi);
        v.push(self.sigma_02);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Dimension(format!("kernel parameter vector of length {}", v.len())));
        }
        KernelParams::new(v[0], v[1..v.len() - 1].to_vec(), v[v.len() - 1])
    }
}

/// `σf² exp(−Σ_k (v_ik − v_jk)² / φ_k)`.
///
/// The squared distance is divided by φ_k itself: no factor of two and no
/// squaring of the length scale.
pub fn se_kernel(vi: &[f64], vj: &[f64], params: &KernelParams) -> Result<f64> {
    if vi.len() != vj.len() || vi.len() != params.q() {
        return Err(Error::Dimension(format!(
            "se_kernel: |vi|={}, |vj|={}, |phi|={}",
            vi.len(),
            vj.len(),
            params.q()
        )));
    }
    let s: f64 = vi
        .iter()
        .zip(vj)
        .zip(&params.phi)
        .map(|((a, b), phi)| (a - b) * (a - b) / phi)
        .sum();
    Ok(params.sigma_f2 * (-s).exp())
}

fn check_finite(v: &DMatrix<f64>) -> Result<()> {
    if let Some(idx) = v.iter().position(|x| !x.is_finite()) {
        let (i, j) = (idx % v.nrows(), idx / v.nrows());
        return Err(Error::Data(format!("non-finite kernel covariate at row {i}, column {j}")));
    }
    Ok(())
}

/// Kernel matrix `K` without the noise term.
pub fn kernel_matrix(v: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    if v.ncols() != params.q() {
        return Err(Error::Dimension(format!(
            "V has {} columns, params have {} length scales",
            v.ncols(),
            params.q()
        )));
    }
    check_finite(v)?;
    let n = v.nrows();
    let inv_phi: Vec<f64> = params.phi.iter().map(|p| 1.0 / p).collect();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = params.sigma_f2;
        for i in (j + 1)..n {
            let mut s = 0.0;
            for (c, w) in inv_phi.iter().enumerate() {
                let d = v[(i, c)] - v[(j, c)];
                s += d * d * w;
            }
            let val = params.sigma_f2 * (-s).exp();
            k[(i, j)] = val;
            k[(j, i)] = val;
        }
    }
    Ok(k)
}

/// `Σ = K + σ0² I`.
pub fn build_covariance(v: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    if v.nrows() == 0 {
        return Err(Error::Data("empty kernel covariate matrix".into()));
    }
    let mut k = kernel_matrix(v, params)?;
    for i in 0..k.nrows() {
        k[(i, i)] += params.sigma_02;
    }
    Ok(k)
}

/// Column standardization applied to kernel covariates before fitting.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub values: DMatrix<f64>,
    /// Indices of the original columns that were kept.
    pub kept: Vec<usize>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Original columns dropped because they had zero variance.
    pub dropped: Vec<usize>,
}

/// Center each column and divide by its sample standard deviation. Constant
/// columns are dropped with a warning.
pub fn standardize(v: &DMatrix<f64>) -> Result<Standardized> {
    check_finite(v)?;
    let n = v.nrows();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for c in 0..v.ncols() {
        let col: Vec<f64> = v.column(c).iter().copied().collect();
        let m = crate::linalg::mean(&col);
        let sd = if n > 1 { crate::linalg::sample_var(&col).sqrt() } else { 0.0 };
        if sd > 0.0 && sd.is_finite() {
            kept.push(c);
            means.push(m);
            sds.push(sd);
        } else {
            log::warn!("kernel covariate column {c} has zero variance and is dropped");
            dropped.push(c);
        }
    }
    let values = DMatrix::from_fn(n, kept.len(), |i, k| (v[(i, kept[k])] - means[k]) / sds[k]);
    Ok(Standardized { values, kept, means, sds, dropped })
}

/// Per-dimension squared distance matrices, cached so length-scale updates
/// only need a weighted sum and an exponential.
#[derive(Debug, Clone)]
pub struct SqDistances {
    n: usize,
    /// Packed lower triangles (strictly below the diagonal), one per dimension.
    dims: Vec<Vec<f64>>,
}

impl SqDistances {
    pub fn new(v: &DMatrix<f64>) -> Self {
        let n = v.nrows();
        let dims = (0..v.ncols())
            .map(|c| {
                let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
                for j in 0..n {
                    for i in (j + 1)..n {
                        let x = v[(i, c)] - v[(j, c)];
                        d.push(x * x);
                    }
                }
                d
            })
            .collect();
        SqDistances { n, dims }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.dims.len()
    }

    /// Packed `Σ_k D_k / φ_k`.
    pub fn scaled_sum(&self, phi: &[f64]) -> Vec<f64> {
        let len = self.n * self.n.saturating_sub(1) / 2;
        let mut s = vec![0.0; len];
        for (d, p) in self.dims.iter().zip(phi) {
            let w = 1.0 / p;
            s.iter_mut().zip(d).for_each(|(a, b)| *a += b * w);
        }
        s
    }

    /// Update a packed scaled sum after changing one length scale.
    pub fn rescale_dim(&self, sum: &[f64], k: usize, old_phi: f64, new_phi: f64) -> Vec<f64> {
        let w = 1.0 / new_phi - 1.0 / old_phi;
        sum.iter().zip(&self.dims[k]).map(|(s, d)| s + d * w).collect()
    }

    /// Dense `σf² exp(−S) + σ0² I` from a packed scaled sum. Only the lower
    /// triangle is filled when `lower_only` is set.
    pub fn covariance(&self, sum: &[f64], sigma_f2: f64, sigma_02: f64, lower_only: bool) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::<f64>::zeros(n, n);
        let mut idx = 0;
        for j in 0..n {
            m[(j, j)] = sigma_f2 + sigma_02;
            for i in (j + 1)..n {
                let val = sigma_f2 * (-sum[idx]).exp();
                m[(i, j)] = val;
                if !lower_only {
                    m[(j, i)] = val;
                }
                idx += 1;
            }
        }
        m
    }
}

/// One compound-symmetry block `σ²[(1−ρ)I + ρJ]` of size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub n: usize,
    pub rho: f64,
    pub sigma2: f64,
}

impl Block {
    /// Block implied by a noise variance: `σ² = 1 + σ0²`, `ρ = 1/σ²`.
    pub fn from_noise(n: usize, sigma02: f64) -> Self {
        let sigma2 = 1.0 + sigma02;
        Block { n, rho: 1.0 / sigma2, sigma2 }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                self.sigma2
            } else {
                self.sigma2 * self.rho
            }
        })
    }
}

/// Block-diagonal covariance, with blocks indexed by unit membership.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockCovariance {
    pub blocks: Vec<Block>,
    /// Block index of each unit.
    pub block_of: Vec<usize>,
}

impl BlockCovariance {
    pub fn from_labels(block_of: &[usize], sigma02: f64) -> Self {
        let l = block_of.iter().copied().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; l];
        for &b in block_of {
            sizes[b] += 1;
        }
        BlockCovariance {
            blocks: sizes.into_iter().map(|n| Block::from_noise(n, sigma02)).collect(),
            block_of: block_of.to_vec(),
        }
    }

    /// Dense `n×n` matrix in unit order.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.block_of.len();
        DMatrix::from_fn(n, n, |i, j| {
            let b = &self.blocks[self.block_of[i]];
            if i == j {
                b.sigma2
            } else if self.block_of[i] == self.block_of[j] {
                b.sigma2 * b.rho
            } else {
                0.0
            }
        })
    }
}

/// Closed-form inverse of a compound-symmetry block:
/// `[(1−ρ+nρ)I − ρJ] / (σ²(1−ρ)(1−ρ+nρ))`.
pub fn block_inverse(block: &Block) -> Result<DMatrix<f64>> {
    let Block { n, rho, sigma2 } = *block;
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::SingularBlock(format!("sigma2 = {sigma2}")));
    }
    if n == 1 {
        return Ok(DMatrix::from_element(1, 1, 1.0 / sigma2));
    }
    let a = 1.0 - rho + n as f64 * rho;
    let denom = sigma2 * (1.0 - rho) * a;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::SingularBlock(format!("n = {n}, rho = {rho}, sigma2 = {sigma2}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let v = if i == j { a - rho } else { -rho };
        v / denom
    }))
}

pub fn row(v: &DMatrix<f64>, i: usize) -> Vec<f64> {
    v.row(i).iter().copied().collect()
}
