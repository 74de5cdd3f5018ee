//! Command-line surface: config loading, CSV ingestion and result files.
//!
//! Every command reads a JSON config (optional) whose values are overridden by
//! flags, then writes its results into an output directory. Files contain no
//! timestamps or host details, so a rerun with the same inputs and seed
//! reproduces them byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::covkernel::KernelParams;
use crate::diagnostics::{residual_independence_report, solve_tau, weight_matrix, ResidualReport};
use crate::error::{Error, Result};
use crate::matched::{stratified_lambda, weighted_sum_estimate, MatchingStructure};
use crate::model::{Dataset, MeanTerms, ModelSpec, PriorConfig};
use crate::sampler::{run_chain, summarize, McmcConfig, PosteriorChain};
use crate::simharness::{default_estimators, run_study, Estimator, Study, StudySpec};

/// Version of the JSON output layout described in `schema/output.schema.json`.
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Parser)]
#[command(name = "gpmatch", version, about = "Causal effect estimation with Gaussian-process matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the GP model to a CSV dataset and report the average treatment effect.
    Analyze(AnalyzeArgs),
    /// Run a simulation study and summarize every estimator.
    Simulate(SimulateArgs),
    /// Closed-form GLS estimate for a known block (matched-set) structure.
    Matched(MatchedArgs),
    /// Weight-space diagnostics for given kernel parameters.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    /// Comma-separated mean-function covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub mean_covariates: Option<Vec<String>>,
    /// Comma-separated kernel covariate columns (default: the mean covariates).
    #[arg(long, value_delimiter = ',')]
    pub kernel_covariates: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// `treatment_only` or `full` (default: `full` when mean covariates are given).
    #[arg(long)]
    pub mean_terms: Option<String>,
    /// Drop treatment-by-covariate terms from the full mean.
    #[arg(long)]
    pub no_interactions: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub keep: Option<usize>,
    /// Use raw rather than row-normalized GP weights in the diagnostics.
    #[arg(long)]
    pub raw_weights: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// single_covariate (default), md_comparison or kang_schafer.
    #[arg(long)]
    pub study: Option<String>,
    /// Single-covariate parameter setting (1 to 4).
    #[arg(long)]
    pub setting: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// 50 replicates and 2000 + 2000 MCMC sweeps unless set explicitly.
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated estimator labels, e.g. `Gold,GPMatch1,MdMatch(0.5)`.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub keep: Option<usize>,
    /// Worker threads (default from GPMATCH_THREADS or the core count).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MatchedArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Column holding the matched-set label of each unit.
    #[arg(long)]
    pub block: Option<String>,
    /// Noise variance of the block covariance `J + σ0²I`.
    #[arg(long)]
    pub sigma02: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub sigma_f2: Option<f64>,
    /// Comma-separated length scales, one per kernel covariate.
    #[arg(long, value_delimiter = ',')]
    pub phi: Option<Vec<f64>>,
    #[arg(long)]
    pub sigma_02: Option<f64>,
    /// Use raw rather than row-normalized GP weights.
    #[arg(long)]
    pub raw_weights: bool,
    /// Use kernel covariates as given instead of standardizing them.
    #[arg(long)]
    pub raw_scale: bool,
    /// Effect at which to evaluate the residual report (default: the root).
    #[arg(long)]
    pub tau: Option<f64>,
}

/// Column roles in the input CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    #[serde(default)]
    pub mean_covariates: Vec<String>,
    /// `None` reuses the mean covariates.
    pub kernel_covariates: Option<Vec<String>>,
    /// Matched-set label column for the `matched` command.
    pub block: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    pub mean_terms: Option<MeanTerms>,
    pub interactions: Option<bool>,
}

/// Prior hyperparameters to override; unset values follow the data-driven
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorOverrides {
    pub omega: Option<f64>,
    pub a0: Option<f64>,
    pub b0: Option<f64>,
    pub af: Option<f64>,
    pub bf: Option<f64>,
    pub a_phi: Option<f64>,
    pub b_phi: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcOptions {
    pub n_burnin: Option<usize>,
    pub n_keep: Option<usize>,
    pub seed: Option<u64>,
    pub proposal_scales: Option<Vec<f64>>,
    pub adapt_burnin: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateOptions {
    pub study: Option<Study>,
    pub setting: Option<usize>,
    pub gammas: Option<[f64; 4]>,
    pub n: Option<usize>,
    pub replicates: Option<usize>,
    #[serde(default)]
    pub desk_scale: bool,
    pub estimators: Option<Vec<Estimator>>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseOptions {
    pub kernel_params: Option<KernelParams>,
    #[serde(default)]
    pub raw_weights: bool,
    #[serde(default)]
    pub raw_scale: bool,
    pub tau: Option<f64>,
}

/// Contents of a `--config` file. Each command reads the sections it needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub prior: PriorOverrides,
    #[serde(default)]
    pub mcmc: McmcOptions,
    #[serde(default)]
    pub simulate: SimulateOptions,
    pub sigma02: Option<f64>,
    #[serde(default)]
    pub diagnose: DiagnoseOptions,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    fn from_common(common: &CommonArgs) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &common.out {
            cfg.output_dir = Some(out.clone());
        }
        Ok(cfg)
    }

    fn apply_data(&mut self, d: &DataArgs) {
        if let Some(p) = &d.data {
            self.data = Some(p.clone());
        }
        if let Some(v) = &d.outcome {
            self.roles.outcome = Some(v.clone());
        }
        if let Some(v) = &d.treatment {
            self.roles.treatment = Some(v.clone());
        }
        if let Some(v) = &d.mean_covariates {
            self.roles.mean_covariates = v.clone();
        }
        if let Some(v) = &d.kernel_covariates {
            self.roles.kernel_covariates = Some(v.clone());
        }
    }

    fn output_dir(&self) -> Result<&Path> {
        self.output_dir.as_deref().ok_or_else(|| Error::Config("no output directory (--out)".into()))
    }

    fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::Config("no input data (--data)".into()))
    }
}

/// A parsed dataset plus the rows that were dropped for missing values.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// 1-based data-row numbers (header excluded) dropped for missing values.
    pub rejected_rows: Vec<usize>,
    pub n_rows: usize,
    /// Block label per retained row when a block column was requested.
    pub blocks: Option<Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Read `path` and assemble a dataset from the column roles. Rows with a
/// missing value in any used column are dropped and reported.
pub fn load_csv(path: &Path, roles: &Roles) -> Result<LoadedData> {
    let outcome = roles.outcome.as_deref().ok_or_else(|| Error::Config("no outcome column given".into()))?;
    let treatment = roles.treatment.as_deref().ok_or_else(|| Error::Config("no treatment column given".into()))?;
    if outcome == treatment {
        return Err(Error::Config(format!("column '{outcome}' cannot be both outcome and treatment")));
    }
    let kernel = roles.kernel_covariates.clone().unwrap_or_else(|| roles.mean_covariates.clone());
    for c in roles.mean_covariates.iter().chain(&kernel) {
        if c == outcome || c == treatment {
            return Err(Error::Config(format!("column '{c}' is the outcome or treatment and cannot be a covariate")));
        }
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Config(format!("cannot open data {}: {e}", path.display())),
        _ => Error::Csv(e),
    })?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found in {}", path.display())))
    };
    let y_col = index(outcome)?;
    let a_col = index(treatment)?;
    let x_cols = roles.mean_covariates.iter().map(|c| index(c)).collect::<Result<Vec<_>>>()?;
    let v_cols = kernel.iter().map(|c| index(c)).collect::<Result<Vec<_>>>()?;
    let b_col = roles.block.as_deref().map(index).transpose()?;

    let mut numeric_cols = vec![y_col, a_col];
    numeric_cols.extend(&x_cols);
    numeric_cols.extend(&v_cols);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut blocks = Vec::new();
    let mut rejected = Vec::new();
    let mut n_rows = 0;
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row_no = k + 1;
        n_rows += 1;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        let block_missing = b_col.is_some_and(|c| is_missing(cell(c)));
        if block_missing || numeric_cols.iter().any(|&c| is_missing(cell(c))) {
            rejected.push(row_no);
            continue;
        }
        let mut vals = Vec::with_capacity(numeric_cols.len());
        for &c in &numeric_cols {
            let raw = cell(c).trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Data(format!("data row {row_no}, column '{}': cannot parse '{raw}'", headers[c])))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("data row {row_no}, column '{}': non-finite value", headers[c])));
            }
            vals.push(v);
        }
        if vals[1] != 0.0 && vals[1] != 1.0 {
            return Err(Error::Data(format!(
                "data row {row_no}, column '{}': treatment must be 0 or 1, found '{}'",
                headers[a_col],
                cell(a_col).trim()
            )));
        }
        if let Some(c) = b_col {
            blocks.push(cell(c).trim().to_string());
        }
        rows.push(vals);
    }
    if !rejected.is_empty() {
        log::warn!("{} rows with missing values dropped: {:?}", rejected.len(), rejected);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::Data(format!("no complete rows in {}", path.display())));
    }
    let (p, q) = (x_cols.len(), v_cols.len());
    let y = DVector::from_fn(n, |i, _| rows[i][0]);
    let a = DVector::from_fn(n, |i, _| rows[i][1]);
    let x = DMatrix::from_fn(n, p, |i, k| rows[i][2 + k]);
    let v = DMatrix::from_fn(n, q, |i, k| rows[i][2 + p + k]);
    Ok(LoadedData {
        dataset: Dataset::new(y, a, x, v)?,
        rejected_rows: rejected,
        n_rows,
        blocks: b_col.map(|_| blocks),
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn data_report(loaded: &LoadedData) -> serde_json::Value {
    json!({
        "rows_read": loaded.n_rows,
        "rows_used": loaded.dataset.n(),
        "rows_rejected": loaded.rejected_rows,
        "n_treated": loaded.dataset.n_treated(),
    })
}

fn prior_with(ds: &Dataset, o: &PriorOverrides) -> PriorConfig {
    let mut p = PriorConfig::for_dataset(ds);
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut p.omega, o.omega);
    set(&mut p.a0, o.a0);
    set(&mut p.b0, o.b0);
    set(&mut p.af, o.af);
    set(&mut p.bf, o.bf);
    set(&mut p.a_phi, o.a_phi);
    set(&mut p.b_phi, o.b_phi);
    p
}

fn column_summary(draws: &DMatrix<f64>, names: &[String]) -> Vec<serde_json::Value> {
    names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let col: Vec<f64> = draws.column(c).iter().copied().collect();
            let s = crate::sampler::summarize_draws(&col, vec![]);
            json!({"name": name, "mean": s.mean, "sd": s.sd, "ci_low": s.ci_low, "ci_high": s.ci_high})
        })
        .collect()
}

fn write_trace(path: &Path, chain: &PosteriorChain) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(chain.gamma_names.iter().cloned());
    header.extend(chain.kernel_names.iter().cloned());
    header.push("ate".into());
    w.write_record(&header)?;
    for k in 0..chain.n_keep() {
        let mut rec = vec![(k + 1).to_string()];
        rec.extend(chain.gamma_draws.row(k).iter().map(|v| v.to_string()));
        rec.extend(chain.kernel_draws.row(k).iter().map(|v| v.to_string()));
        rec.push(chain.ate_draws[k].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Residual report at the estimating-equation root and at a second effect.
fn diagnostics_json(
    v: &DMatrix<f64>,
    params: &KernelParams,
    ds: &Dataset,
    normalize: bool,
    tau_at: Option<f64>,
) -> Result<serde_json::Value> {
    let ws = weight_matrix(v, params, ds.y(), ds.a(), normalize)?;
    let root = solve_tau(&ws, ds.y(), ds.a());
    let report = |tau: f64| -> Result<ResidualReport> { residual_independence_report(&ws, ds.y(), ds.a(), tau) };
    let mut out = json!({
        "kernel_params": params,
        "weights_normalized": normalize,
    });
    match root {
        Ok(t) => {
            out["tau_hat"] = json!(t);
            out["report_at_root"] = serde_json::to_value(report(t)?)?;
        }
        Err(e) => {
            out["tau_hat"] = serde_json::Value::Null;
            out["root_error"] = json!(e.to_string());
        }
    }
    if let Some(t) = tau_at {
        out["tau_evaluated"] = json!(t);
        out["report_at_tau"] = serde_json::to_value(report(t)?)?;
    }
    Ok(out)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut cfg = RunConfig::from_common(&args.common)?;
    cfg.apply_data(&args.data);
    if let Some(m) = &args.mean_terms {
        cfg.model.mean_terms = Some(
            serde_json::from_value(json!(m)).map_err(|_| Error::Config(format!("unknown mean terms '{m}'")))?,
        );
    }
    if args.no_interactions {
        cfg.model.interactions = Some(false);
    }
    if let Some(s) = args.seed {
        cfg.mcmc.seed = Some(s);
    }
    if let Some(b) = args.burnin {
        cfg.mcmc.n_burnin = Some(b);
    }
    if let Some(k) = args.keep {
        cfg.mcmc.n_keep = Some(k);
    }
    let seed = cfg.mcmc.seed.ok_or_else(|| Error::Config("a seed is required (--seed or mcmc.seed)".into()))?;
    let out = cfg.output_dir()?.to_path_buf();
    let loaded = load_csv(cfg.data_path()?, &cfg.roles)?;
    let ds = &loaded.dataset;

    let spec = ModelSpec {
        mean_terms: cfg.model.mean_terms.unwrap_or(if cfg.roles.mean_covariates.is_empty() {
            MeanTerms::TreatmentOnly
        } else {
            MeanTerms::Full
        }),
        interactions: cfg.model.interactions.unwrap_or(true),
        kernel_columns: None,
    };
    let prior = prior_with(ds, &cfg.prior);
    let base = McmcConfig::new(seed);
    let mcmc = McmcConfig {
        n_burnin: cfg.mcmc.n_burnin.unwrap_or(base.n_burnin),
        n_keep: cfg.mcmc.n_keep.unwrap_or(base.n_keep),
        proposal_scales: cfg.mcmc.proposal_scales.clone(),
        adapt_burnin: cfg.mcmc.adapt_burnin.unwrap_or(true),
        ..base
    };
    let chain = run_chain(ds, &spec, &prior, &mcmc)?;
    let ate = summarize(&chain);

    let kernel_names: Vec<String> = cfg.roles.kernel_covariates.clone().unwrap_or(cfg.roles.mean_covariates.clone());
    let kept_names: Vec<&String> = chain.kernel_columns.iter().map(|c| &kernel_names[*c]).collect();
    let diagnostics = if chain.kernel_columns.is_empty() {
        json!({"skipped": "no kernel covariates with nonzero variance"})
    } else {
        let v = DMatrix::from_fn(ds.n(), chain.kernel_columns.len(), |i, k| {
            (ds.v()[(i, chain.kernel_columns[k])] - chain.kernel_means[k]) / chain.kernel_sds[k]
        });
        let params = chain.mean_kernel_params()?;
        match diagnostics_json(&v, &params, ds, !args.raw_weights, Some(ate.mean)) {
            Ok(d) => d,
            Err(e) => json!({"error": e.to_string(), "kind": e.kind()}),
        }
    };

    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "analyze",
        "data": data_report(&loaded),
        "model": spec,
        "prior": prior,
        "mcmc": mcmc,
        "ate": {"mean": ate.mean, "sd": ate.sd, "ci_low": ate.ci_low, "ci_high": ate.ci_high},
        "tau_i": ate.tau_i,
        "coefficients": column_summary(&chain.gamma_draws, &chain.gamma_names),
        "kernel": column_summary(&chain.kernel_draws, &chain.kernel_names),
        "kernel_covariates": kept_names,
        "acceptance_rates": chain.acceptance_rates,
        "proposal_scales": chain.proposal_scales,
    });
    write_json(&out, "ate_summary.json", &summary)?;
    write_trace(&out.join("trace.csv"), &chain)?;
    write_json(
        &out,
        "diagnostics.json",
        &json!({"schema_version": SCHEMA_VERSION, "command": "diagnose", "source": "analyze", "diagnostics": diagnostics}),
    )?;
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut cfg = RunConfig::from_common(&args.common)?;
    let sim = &mut cfg.simulate;
    if let Some(s) = &args.study {
        sim.study = Some(s.parse()?);
    }
    if let Some(v) = args.setting {
        sim.setting = Some(v);
    }
    if let Some(v) = args.n {
        sim.n = Some(v);
    }
    if let Some(v) = args.replicates {
        sim.replicates = Some(v);
    }
    if args.desk_scale {
        sim.desk_scale = true;
    }
    if let Some(list) = &args.estimators {
        sim.estimators = Some(list.iter().map(|s| s.trim().parse()).collect::<Result<Vec<_>>>()?);
    }
    if let Some(t) = args.threads {
        sim.threads = Some(t);
    }
    if let Some(s) = args.seed {
        cfg.mcmc.seed = Some(s);
    }
    if let Some(b) = args.burnin {
        cfg.mcmc.n_burnin = Some(b);
    }
    if let Some(k) = args.keep {
        cfg.mcmc.n_keep = Some(k);
    }
    let sim = &cfg.simulate;
    let study = sim.study.unwrap_or(Study::SingleCovariate);
    let seed = cfg.mcmc.seed.ok_or_else(|| Error::Config("a seed is required (--seed or mcmc.seed)".into()))?;
    let n = sim.n.unwrap_or(400);
    let mut spec = if sim.desk_scale { StudySpec::desk_scale(study, n, seed) } else { StudySpec::new(study, n, seed) };
    spec.setting = sim.setting.unwrap_or(1);
    spec.gammas = sim.gammas;
    if let Some(r) = sim.replicates {
        spec.n_replicates = r;
    }
    spec.estimators = sim.estimators.clone().unwrap_or_else(|| default_estimators(study));
    if let Some(b) = cfg.mcmc.n_burnin {
        spec.n_burnin = b;
    }
    if let Some(k) = cfg.mcmc.n_keep {
        spec.n_keep = k;
    }
    if let Some(i) = cfg.model.interactions {
        spec.interactions = i;
    }
    let out = cfg.output_dir()?.to_path_buf();
    let result = run_study(&spec, sim.threads)?;

    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("replicates.csv"))?;
    for r in &result.records {
        w.serialize(r)?;
    }
    w.flush()?;
    let failures: BTreeMap<String, Vec<String>> = result
        .records
        .iter()
        .filter(|r| r.failed)
        .fold(BTreeMap::new(), |mut m, r| {
            m.entry(r.estimator.clone())
                .or_insert_with(Vec::new)
                .push(format!("replicate {}: {}", r.replicate, r.error.as_deref().unwrap_or("failed")));
            m
        });
    write_json(
        &out,
        "metrics.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "simulate",
            "spec": result.spec,
            "metrics": result.metrics,
            "failures": failures,
        }),
    )
}

pub fn cmd_matched(args: &MatchedArgs) -> Result<()> {
    let mut cfg = RunConfig::from_common(&args.common)?;
    cfg.apply_data(&args.data);
    if let Some(b) = &args.block {
        cfg.roles.block = Some(b.clone());
    }
    if let Some(s) = args.sigma02 {
        cfg.sigma02 = Some(s);
    }
    if cfg.roles.block.is_none() {
        return Err(Error::Config("no block column given (--block)".into()));
    }
    let sigma02 = cfg.sigma02.ok_or_else(|| Error::Config("no noise variance given (--sigma02)".into()))?;
    let out = cfg.output_dir()?.to_path_buf();
    let loaded = load_csv(cfg.data_path()?, &cfg.roles)?;
    let ds = &loaded.dataset;
    let keys = loaded.blocks.as_ref().expect("block column requested");
    let ms = MatchingStructure::from_keys(keys, ds.a().as_slice())?;
    let est = weighted_sum_estimate(ds.y(), ds.a(), &ms, sigma02)?;
    let y1 = ds.y().iter().zip(ds.a().iter()).filter(|(_, a)| **a == 1.0).map(|(y, _)| *y).collect::<Vec<_>>();
    let y0 = ds.y().iter().zip(ds.a().iter()).filter(|(_, a)| **a == 0.0).map(|(y, _)| *y).collect::<Vec<_>>();
    let mut labels: Vec<&String> = Vec::new();
    for k in keys {
        if !labels.contains(&k) {
            labels.push(k);
        }
    }
    let blocks: Vec<serde_json::Value> = labels
        .iter()
        .enumerate()
        .map(|(l, key)| json!({"label": key, "n": ms.n_block()[l], "n_treated": ms.n_treated()[l], "n_control": ms.n_control()[l]}))
        .collect();
    write_json(
        &out,
        "matched.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "matched",
            "data": data_report(&loaded),
            "sigma02": sigma02,
            "estimate": est,
            "stratified_lambda": stratified_lambda(&ms, sigma02),
            "mean_difference": crate::linalg::mean(&y1) - crate::linalg::mean(&y0),
            "blocks": blocks,
        }),
    )
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let mut cfg = RunConfig::from_common(&args.common)?;
    cfg.apply_data(&args.data);
    let d = &mut cfg.diagnose;
    if args.sigma_f2.is_some() || args.phi.is_some() || args.sigma_02.is_some() {
        let base = d.kernel_params.clone();
        let pick = |flag: Option<f64>, from: Option<f64>, name: &str| {
            flag.or(from).ok_or_else(|| Error::Config(format!("missing kernel parameter {name}")))
        };
        let phi = args
            .phi
            .clone()
            .or_else(|| base.as_ref().map(|b| b.phi.clone()))
            .ok_or_else(|| Error::Config("missing kernel parameter phi".into()))?;
        d.kernel_params = Some(KernelParams {
            sigma_f2: pick(args.sigma_f2, base.as_ref().map(|b| b.sigma_f2), "sigma_f2")?,
            phi,
            sigma_02: pick(args.sigma_02, base.as_ref().map(|b| b.sigma_02), "sigma_02")?,
        });
    }
    d.raw_weights |= args.raw_weights;
    d.raw_scale |= args.raw_scale;
    if args.tau.is_some() {
        d.tau = args.tau;
    }
    let params = cfg
        .diagnose
        .kernel_params
        .clone()
        .ok_or_else(|| Error::Config("kernel parameters are required (--sigma-f2, --phi, --sigma-02)".into()))?;
    params.validate().map_err(|e| Error::Config(e.to_string()))?;
    let out = cfg.output_dir()?.to_path_buf();
    let loaded = load_csv(cfg.data_path()?, &cfg.roles)?;
    let ds = &loaded.dataset;
    if params.q() != ds.q() {
        return Err(Error::Config(format!("{} length scales for {} kernel covariates", params.q(), ds.q())));
    }
    let v = if cfg.diagnose.raw_scale {
        ds.v().clone()
    } else {
        let st = crate::covkernel::standardize(ds.v())?;
        if !st.dropped.is_empty() {
            return Err(Error::Data(format!("kernel covariates {:?} have zero variance", st.dropped)));
        }
        st.values
    };
    let diagnostics = diagnostics_json(&v, &params, ds, !cfg.diagnose.raw_weights, cfg.diagnose.tau)?;
    write_json(
        &out,
        "diagnostics.json",
        &json!({
            "schema_version": SCHEMA_VERSION,
            "command": "diagnose",
            "source": "diagnose",
            "data": data_report(&loaded),
            "standardized": !cfg.diagnose.raw_scale,
            "diagnostics": diagnostics,
        }),
    )
}

fn error_json(e: &Error) -> String {
    json!({
        "schema_version": SCHEMA_VERSION,
        "error": {"kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()},
    })
    .to_string()
}

/// Parse arguments, run the command and return the process exit code. Errors
/// are written to stdout as a single JSON object.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err = Error::Config(e.to_string());
            println!("{}", error_json(&err));
            return err.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Matched(a) => cmd_matched(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let mut stdout = std::io::stdout();
            let _ = writeln!(stdout, "{}", error_json(&e));
            e.exit_code()
        }
    }
}
