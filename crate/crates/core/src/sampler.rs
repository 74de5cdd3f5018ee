//! Metropolis-within-Gibbs sampling for the partially linear GP model.
//!
//! Each sweep first updates the kernel hyperparameters one at a time with
//! Gaussian random-walk proposals on the log scale (conditioning on the
//! current mean coefficients), then draws the coefficients from their
//! multivariate normal full conditional.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covkernel::{standardize, KernelParams, SqDistances};
use crate::error::{Error, Result};
use crate::linalg::{least_squares, mean, quantile_sorted, sample_var, Cholesky};
use crate::model::{build_design, Dataset, DesignMatrix, ModelSpec, PriorConfig};

pub const TARGET_ACCEPT: f64 = 0.44;
const DEFAULT_LOG_STEP: f64 = 0.5;
const MIN_LOG_STEP: f64 = 1e-3;
const MAX_LOG_STEP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_burnin: usize,
    pub n_keep: usize,
    pub seed: u64,
    /// Log-scale random-walk step per kernel parameter, in the order
    /// `(σf², φ₁..φ_q, σ0²)`. `None` starts every step at 0.5.
    #[serde(default)]
    pub proposal_scales: Option<Vec<f64>>,
    /// Robbins-Monro step adaptation during burn-in.
    #[serde(default = "default_true")]
    pub adapt_burnin: bool,
    /// Drop the likelihood from the kernel update, leaving the priors.
    #[serde(default)]
    pub prior_only: bool,
}

fn default_true() -> bool {
    true
}

impl McmcConfig {
    pub fn new(seed: u64) -> Self {
        McmcConfig {
            n_burnin: 5000,
            n_keep: 5000,
            seed,
            proposal_scales: None,
            adapt_burnin: true,
            prior_only: false,
        }
    }

    /// 2000 burn-in + 2000 retained draws.
    pub fn desk_scale(seed: u64) -> Self {
        McmcConfig { n_burnin: 2000, n_keep: 2000, ..McmcConfig::new(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_keep == 0 {
            return Err(Error::Config("n_keep must be at least 1".into()));
        }
        if let Some(s) = &self.proposal_scales {
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("proposal scales must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Log density of IG(a, b) for `x = exp(u)` with respect to `u`, up to a
/// constant: `−a·u − b·exp(−u)`.
fn ig_log_density_log_scale(x: f64, a: f64, b: f64) -> f64 {
    -a * x.ln() - b / x
}

/// Posterior of the mean coefficients given a factored covariance.
#[derive(Debug, Clone)]
pub struct GammaPosterior {
    pub mean: DVector<f64>,
    /// Cholesky factor of the posterior precision.
    pub precision: Cholesky,
}

impl GammaPosterior {
    /// Precision `ZᵀΣ⁻¹Z + ZᵀZ/(ωσ_lm²)`, mean `precision⁻¹ ZᵀΣ⁻¹y`.
    pub fn new(y: &DVector<f64>, z: &DMatrix<f64>, sigma: &Cholesky, prior: &PriorConfig) -> Result<Self> {
        let w = sigma.solve_lower_mat(z);
        let u = sigma.solve_lower(y);
        let ztz = z.transpose() * z;
        let prec = w.transpose() * &w + ztz / (prior.omega * prior.sigma_lm2);
        let precision = Cholesky::factor(&prec)?;
        let mean = precision.solve(&(w.transpose() * u));
        Ok(GammaPosterior { mean, precision })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        self.precision.solve_mat(&DMatrix::identity(d, d))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut dev = xi;
        self.precision.l().tr_solve_lower_triangular_unchecked_mut(&mut dev);
        &self.mean + dev
    }
}

/// One draw of γ from its multivariate normal full conditional.
pub fn sample_gamma<R: Rng + ?Sized>(
    ds: &Dataset,
    design: &DesignMatrix,
    sigma: &DMatrix<f64>,
    prior: &PriorConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = Cholesky::factor(sigma)?;
    Ok(GammaPosterior::new(ds.y(), &design.z, &chol, prior)?.draw(rng))
}

/// Current kernel hyperparameters with their cached covariance factor.
#[derive(Debug, Clone)]
pub struct KernelState {
    pub params: KernelParams,
    /// Packed strictly-lower `exp(−Σ_k D_k/φ_k)`.
    corr: Vec<f64>,
    chol: Cholesky,
    /// `rᵀΣ⁻¹r` for the residual the state was last refreshed with.
    quad: f64,
}

impl KernelState {
    pub fn chol(&self) -> &Cholesky {
        &self.chol
    }

    fn log_lik(&self) -> f64 {
        -0.5 * self.chol.log_det() - 0.5 * self.quad
    }

    /// Recompute the quadratic form after the residual changed.
    pub fn refresh(&mut self, resid: &DVector<f64>) {
        self.quad = self.chol.quad_form(resid);
    }
}

/// Kernel-hyperparameter update for a fixed set of kernel covariates.
#[derive(Debug, Clone)]
pub struct KernelUpdater<'a> {
    dist: &'a SqDistances,
    prior: &'a PriorConfig,
    likelihood: bool,
}

impl<'a> KernelUpdater<'a> {
    pub fn new(dist: &'a SqDistances, prior: &'a PriorConfig, likelihood: bool) -> Self {
        KernelUpdater { dist, prior, likelihood }
    }

    /// Number of updated parameters, `q + 2`.
    pub fn n_params(&self) -> usize {
        self.dist.q() + 2
    }

    fn corr(&self, phi: &[f64]) -> Vec<f64> {
        if self.dist.q() == 0 {
            return vec![0.0; self.dist.n() * self.dist.n().saturating_sub(1) / 2];
        }
        let mut s = self.dist.scaled_sum(phi);
        s.iter_mut().for_each(|v| *v = (-*v).exp());
        s
    }

    /// `σf²·C + σ0²·I` with both triangles filled; with no kernel covariates
    /// the covariance collapses to `σ0²·I`.
    fn covariance(&self, corr: &[f64], sigma_f2: f64, sigma_02: f64) -> DMatrix<f64> {
        let n = self.dist.n();
        let diag = if self.dist.q() == 0 { sigma_02 } else { sigma_f2 + sigma_02 };
        let mut m = DMatrix::<f64>::zeros(n, n);
        let mut idx = 0;
        for j in 0..n {
            m[(j, j)] = diag;
            let col = &mut m.as_mut_slice()[j * n..(j + 1) * n];
            for slot in col.iter_mut().skip(j + 1) {
                *slot = sigma_f2 * corr[idx];
                idx += 1;
            }
        }
        for j in 0..n {
            for i in 0..j {
                m[(i, j)] = m[(j, i)];
            }
        }
        m
    }

    pub fn init(&self, params: KernelParams, resid: &DVector<f64>) -> Result<KernelState> {
        params.validate()?;
        if params.q() != self.dist.q() {
            return Err(Error::Dimension(format!(
                "{} length scales for {} kernel covariates",
                params.q(),
                self.dist.q()
            )));
        }
        let corr = self.corr(&params.phi);
        let chol = Cholesky::factor_symmetric(self.covariance(&corr, params.sigma_f2, params.sigma_02))?;
        let quad = chol.quad_form(resid);
        Ok(KernelState { params, corr, chol, quad })
    }

    fn log_prior(&self, idx: usize, x: f64) -> f64 {
        let q = self.dist.q();
        let p = self.prior;
        if idx == 0 {
            ig_log_density_log_scale(x, p.af, p.bf)
        } else if idx <= q {
            ig_log_density_log_scale(x, p.a_phi, p.b_phi)
        } else {
            ig_log_density_log_scale(x, p.a0, p.b0)
        }
    }

    /// One Metropolis sweep over `(σf², φ₁..φ_q, σ0²)`. Returns per-parameter
    /// acceptance. Proposals whose covariance cannot be factored are rejected.
    pub fn sweep<R: Rng + ?Sized>(
        &self,
        state: &mut KernelState,
        resid: &DVector<f64>,
        log_steps: &[f64],
        rng: &mut R,
    ) -> Vec<bool> {
        let q = self.dist.q();
        let mut accepted = vec![false; q + 2];
        for idx in 0..q + 2 {
            let xi: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let current = state.params.to_vec()[idx];
            let proposed = (current.ln() + log_steps[idx] * xi).exp();
            if !(proposed.is_finite() && proposed > 0.0) {
                continue;
            }
            let mut params = state.params.clone();
            match idx {
                0 => params.sigma_f2 = proposed,
                i if i <= q => params.phi[i - 1] = proposed,
                _ => params.sigma_02 = proposed,
            }
            let mut log_ratio = self.log_prior(idx, proposed) - self.log_prior(idx, current);
            let mut candidate = None;
            if self.likelihood {
                let corr = if (1..=q).contains(&idx) { Some(self.corr(&params.phi)) } else { None };
                let cov = self.covariance(corr.as_deref().unwrap_or(&state.corr), params.sigma_f2, params.sigma_02);
                let chol = match Cholesky::factor_symmetric(cov) {
                    Ok(c) => c,
                    Err(_) => continue,
                };
                let quad = chol.quad_form(resid);
                let new_ll = -0.5 * chol.log_det() - 0.5 * quad;
                log_ratio += new_ll - state.log_lik();
                candidate = Some((corr, chol, quad));
            }
            if u.ln() < log_ratio {
                accepted[idx] = true;
                state.params = params;
                match candidate {
                    Some((corr, chol, quad)) => {
                        if let Some(c) = corr {
                            state.corr = c;
                        }
                        state.chol = chol;
                        state.quad = quad;
                    }
                    None => {
                        if (1..=q).contains(&idx) {
                            state.corr = self.corr(&state.params.phi);
                        }
                    }
                }
            }
        }
        if !self.likelihood {
            // keep the factor consistent with the parameters for the γ step
            if let Ok(c) = Cholesky::factor_symmetric(self.covariance(&state.corr, state.params.sigma_f2, state.params.sigma_02)) {
                state.chol = c;
                state.quad = state.chol.quad_form(resid);
            }
        }
        accepted
    }
}

/// Single kernel update on raw kernel covariates `ds.v()`; convenience
/// wrapper over [`KernelUpdater`] for one-off use.
#[allow(clippy::too_many_arguments)]
pub fn sample_kernel_params<R: Rng + ?Sized>(
    ds: &Dataset,
    design: &DesignMatrix,
    gamma: &DVector<f64>,
    current: &KernelParams,
    prior: &PriorConfig,
    log_steps: &[f64],
    rng: &mut R,
) -> Result<(KernelParams, Vec<bool>)> {
    let dist = SqDistances::new(ds.v());
    let updater = KernelUpdater::new(&dist, prior, true);
    if log_steps.len() != updater.n_params() {
        return Err(Error::Dimension(format!("{} proposal scales for {} parameters", log_steps.len(), updater.n_params())));
    }
    let resid = ds.y() - &design.z * gamma;
    let mut state = updater.init(current.clone(), &resid)?;
    let acc = updater.sweep(&mut state, &resid, log_steps, rng);
    Ok((state.params, acc))
}

/// Retained draws of one chain.
#[derive(Debug, Clone)]
pub struct PosteriorChain {
    /// `n_keep × d` draws of γ = (β, α).
    pub gamma_draws: DMatrix<f64>,
    /// `n_keep × (q+2)` draws of `(σf², φ₁..φ_q, σ0²)`, length scales on the
    /// standardized covariate scale.
    pub kernel_draws: DMatrix<f64>,
    pub ate_draws: Vec<f64>,
    /// Acceptance fraction per kernel parameter over retained sweeps.
    pub acceptance_rates: Vec<f64>,
    /// Final log-scale proposal steps.
    pub proposal_scales: Vec<f64>,
    /// Weights `w` with `ATE_s = w·γ_s`.
    pub ate_weights: DVector<f64>,
    /// Posterior-mean unit effects `τ(x_i)`.
    pub unit_effects: DVector<f64>,
    pub gamma_names: Vec<String>,
    pub kernel_names: Vec<String>,
    /// Original kernel covariate columns retained after standardization.
    pub kernel_columns: Vec<usize>,
    pub kernel_means: Vec<f64>,
    pub kernel_sds: Vec<f64>,
    pub sigma_lm2: f64,
}

impl PosteriorChain {
    pub fn n_keep(&self) -> usize {
        self.ate_draws.len()
    }

    /// Posterior-mean kernel parameters.
    pub fn mean_kernel_params(&self) -> Result<KernelParams> {
        let m: Vec<f64> = (0..self.kernel_draws.ncols()).map(|c| self.kernel_draws.column(c).mean()).collect();
        KernelParams::from_slice(&m)
    }
}

fn gamma_names(design: &DesignMatrix) -> Vec<String> {
    let p = design.treatment_col - 1;
    let mut names = vec!["intercept".to_string()];
    names.extend((0..p).map(|k| format!("beta_x{}", k + 1)));
    names.push("alpha_treatment".into());
    names.extend(design.interaction_cols.iter().enumerate().map(|(k, _)| format!("alpha_x{}", k + 1)));
    debug_assert_eq!(names.len(), design.ncols());
    names
}

fn kernel_names(q: usize) -> Vec<String> {
    let mut names = vec!["sigma_f2".to_string()];
    names.extend((0..q).map(|k| format!("phi{}", k + 1)));
    names.push("sigma_02".into());
    names
}

/// Run the full Metropolis-within-Gibbs chain. Deterministic given `mcmc.seed`.
pub fn run_chain(ds: &Dataset, spec: &ModelSpec, prior: &PriorConfig, mcmc: &McmcConfig) -> Result<PosteriorChain> {
    prior.validate()?;
    mcmc.validate()?;
    let design = build_design(ds, spec);
    let v = spec.kernel_covariates(ds)?;
    let std = standardize(&v)?;
    let kernel_columns: Vec<usize> = match &spec.kernel_columns {
        Some(cols) => std.kept.iter().map(|k| cols[*k]).collect(),
        None => std.kept.clone(),
    };
    let q = std.values.ncols();
    let dist = SqDistances::new(&std.values);
    let updater = KernelUpdater::new(&dist, prior, !mcmc.prior_only);

    let mut log_steps = match &mcmc.proposal_scales {
        Some(s) if s.len() == q + 2 => s.clone(),
        Some(s) => {
            return Err(Error::Config(format!("{} proposal scales given for {} kernel parameters", s.len(), q + 2)));
        }
        None => vec![DEFAULT_LOG_STEP; q + 2],
    };

    let y = ds.y();
    let z = &design.z;
    let mut gamma = least_squares(z, y)?.coef;
    let start = KernelParams::new(prior.sigma_lm2 / 2.0, vec![1.0; q], prior.sigma_lm2 / 2.0)?;
    let mut resid = y - z * &gamma;
    let mut state = updater.init(start, &resid)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mcmc.seed);
    let d = design.ncols();
    let total = mcmc.n_burnin + mcmc.n_keep;
    let mut gamma_draws = DMatrix::<f64>::zeros(mcmc.n_keep, d);
    let mut kernel_draws = DMatrix::<f64>::zeros(mcmc.n_keep, q + 2);
    let mut accept_counts = vec![0usize; q + 2];
    let ate_weights = design.ate_weights(ds.x());

    for sweep in 0..total {
        let acc = updater.sweep(&mut state, &resid, &log_steps, &mut rng);
        let burning = sweep < mcmc.n_burnin;
        if burning && mcmc.adapt_burnin {
            let rate = ((sweep + 1) as f64).powf(-0.6);
            for (s, a) in log_steps.iter_mut().zip(&acc) {
                if *s > 0.0 {
                    let target = if *a { 1.0 } else { 0.0 } - TARGET_ACCEPT;
                    *s = (s.ln() + rate * target).exp().clamp(MIN_LOG_STEP, MAX_LOG_STEP);
                }
            }
        }
        let post = GammaPosterior::new(y, z, state.chol(), prior)
            .map_err(|e| Error::Sweep { sweep, source: Box::new(e) })?;
        gamma = post.draw(&mut rng);
        resid = y - z * &gamma;
        state.refresh(&resid);
        if !burning {
            let k = sweep - mcmc.n_burnin;
            gamma_draws.row_mut(k).copy_from(&gamma.transpose());
            for (c, v) in state.params.to_vec().into_iter().enumerate() {
                kernel_draws[(k, c)] = v;
            }
            for (cnt, a) in accept_counts.iter_mut().zip(&acc) {
                *cnt += usize::from(*a);
            }
        }
    }

    let ate_draws: Vec<f64> = (0..mcmc.n_keep).map(|k| gamma_draws.row(k).dot(&ate_weights.transpose())).collect();
    let gamma_mean = DVector::from_fn(d, |c, _| gamma_draws.column(c).mean());
    let unit_effects = design.unit_effects(ds.x(), &gamma_mean);
    Ok(PosteriorChain {
        gamma_names: gamma_names(&design),
        kernel_names: kernel_names(q),
        gamma_draws,
        kernel_draws,
        ate_draws,
        acceptance_rates: accept_counts.iter().map(|c| *c as f64 / mcmc.n_keep as f64).collect(),
        proposal_scales: log_steps,
        ate_weights,
        unit_effects,
        kernel_columns,
        kernel_means: std.means,
        kernel_sds: std.sds,
        sigma_lm2: prior.sigma_lm2,
    })
}

/// Posterior summary of the average treatment effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub mean: f64,
    pub sd: f64,
    /// Equal-tailed 95% interval (type-7 percentiles).
    pub ci_low: f64,
    pub ci_high: f64,
    pub tau_i: Vec<f64>,
}

pub fn summarize(chain: &PosteriorChain) -> AteEstimate {
    summarize_draws(&chain.ate_draws, chain.unit_effects.iter().copied().collect())
}

pub fn summarize_draws(draws: &[f64], tau_i: Vec<f64>) -> AteEstimate {
    let s = crate::linalg::sorted(draws);
    let sd = if draws.len() > 1 { sample_var(draws).max(0.0).sqrt() } else { f64::NAN };
    AteEstimate {
        mean: mean(draws),
        sd,
        ci_low: quantile_sorted(&s, 0.025),
        ci_high: quantile_sorted(&s, 0.975),
        tau_i,
    }
}
