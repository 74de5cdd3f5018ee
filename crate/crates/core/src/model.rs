//! Data containers, mean-function design and prior configuration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{least_squares, sample_var};

/// Observed outcomes, binary treatment, mean-function covariates `x` and
/// kernel covariates `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    a: DVector<f64>,
    x: DMatrix<f64>,
    v: DMatrix<f64>,
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    m.iter().position(|x| !x.is_finite()).map(|k| (k % m.nrows(), k / m.nrows()))
}

impl Dataset {
    pub fn new(y: DVector<f64>, a: DVector<f64>, x: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if a.len() != n || x.nrows() != n || v.nrows() != n {
            return Err(Error::Dimension(format!(
                "y has {n} rows, a {}, x {}, v {}",
                a.len(),
                x.nrows(),
                v.nrows()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite outcome at row {i}")));
        }
        if let Some(i) = a.iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Data(format!("treatment at row {i} is {}, expected 0 or 1", a[i])));
        }
        if let Some((i, j)) = first_non_finite(&x) {
            return Err(Error::Data(format!("non-finite mean covariate at row {i}, column {j}")));
        }
        if let Some((i, j)) = first_non_finite(&v) {
            return Err(Error::Data(format!("non-finite kernel covariate at row {i}, column {j}")));
        }
        let treated = a.iter().filter(|v| **v == 1.0).count();
        if treated == 0 || treated == n {
            return Err(Error::Data(format!(
                "both treatment arms are required ({treated} treated of {n})"
            )));
        }
        Ok(Dataset { y, a, x, v })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of mean-function covariates.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of kernel covariates.
    pub fn q(&self) -> usize {
        self.v.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn n_treated(&self) -> usize {
        self.a.iter().filter(|v| **v == 1.0).count()
    }
}

/// Which terms enter the parametric mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanTerms {
    /// `(1, a)`.
    TreatmentOnly,
    /// `(1, x', a, a·x')`, or `(1, x', a)` when interactions are disabled.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mean_terms: MeanTerms,
    /// Include `a·x` columns with the full mean.
    pub interactions: bool,
    /// Subset of kernel covariate columns; `None` keeps all of them.
    pub kernel_columns: Option<Vec<usize>>,
}

impl ModelSpec {
    pub fn treatment_only() -> Self {
        ModelSpec { mean_terms: MeanTerms::TreatmentOnly, interactions: true, kernel_columns: None }
    }

    pub fn full() -> Self {
        ModelSpec { mean_terms: MeanTerms::Full, interactions: true, kernel_columns: None }
    }

    /// Kernel covariates selected by this spec.
    pub fn kernel_covariates(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        match &self.kernel_columns {
            None => Ok(ds.v().clone()),
            Some(cols) => {
                if let Some(c) = cols.iter().find(|c| **c >= ds.q()) {
                    return Err(Error::Argument(format!("kernel column {c} out of range (q = {})", ds.q())));
                }
                Ok(ds.v().select_columns(cols.iter()))
            }
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::treatment_only()
    }
}

/// Mean-function design `Z` with rows `(1, x', a, a·x')`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub z: DMatrix<f64>,
    /// Column holding the treatment indicator.
    pub treatment_col: usize,
    /// Columns holding `a·x_k`, in covariate order.
    pub interaction_cols: Vec<usize>,
}

impl DesignMatrix {
    pub fn ncols(&self) -> usize {
        self.z.ncols()
    }

    /// Row vector mapping γ to the sample-average treatment effect:
    /// `mean_i (1, x_i')·α`.
    pub fn ate_weights(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut w = DVector::zeros(self.z.ncols());
        w[self.treatment_col] = 1.0;
        for (k, c) in self.interaction_cols.iter().enumerate() {
            w[*c] = x.column(k).mean();
        }
        w
    }

    /// Unit-level effects `τ(x_i) = (1, x_i')·α` for a coefficient vector.
    pub fn unit_effects(&self, x: &DMatrix<f64>, gamma: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.nrows(), |i, _| {
            gamma[self.treatment_col]
                + self
                    .interaction_cols
                    .iter()
                    .enumerate()
                    .map(|(k, c)| x[(i, k)] * gamma[*c])
                    .sum::<f64>()
        })
    }
}

pub fn build_design(ds: &Dataset, spec: &ModelSpec) -> DesignMatrix {
    let n = ds.n();
    let p = match spec.mean_terms {
        MeanTerms::TreatmentOnly => 0,
        MeanTerms::Full => ds.p(),
    };
    let interactions = spec.interactions && p > 0;
    let d = 2 + p + if interactions { p } else { 0 };
    let treatment_col = 1 + p;
    let mut z = DMatrix::<f64>::zeros(n, d);
    for i in 0..n {
        let ai = ds.a()[i];
        z[(i, 0)] = 1.0;
        for k in 0..p {
            z[(i, 1 + k)] = ds.x()[(i, k)];
        }
        z[(i, treatment_col)] = ai;
        if interactions {
            for k in 0..p {
                z[(i, treatment_col + 1 + k)] = ai * ds.x()[(i, k)];
            }
        }
    }
    let interaction_cols = if interactions { (0..p).map(|k| treatment_col + 1 + k).collect() } else { vec![] };
    DesignMatrix { z, treatment_col, interaction_cols }
}

/// Prior hyperparameters. `b0` and `bf` default to `σ_lm²/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub omega: f64,
    pub a0: f64,
    pub b0: f64,
    pub af: f64,
    pub bf: f64,
    pub a_phi: f64,
    pub b_phi: f64,
    pub sigma_lm2: f64,
}

impl PriorConfig {
    pub fn from_anchor(sigma_lm2: f64) -> Self {
        PriorConfig {
            omega: 1e6,
            a0: 2.0,
            b0: sigma_lm2 / 2.0,
            af: 2.0,
            bf: sigma_lm2 / 2.0,
            a_phi: 1.0,
            b_phi: 1.0,
            sigma_lm2,
        }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        PriorConfig::from_anchor(sigma_lm2_anchor(ds))
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.omega, self.a0, self.b0, self.af, self.bf, self.a_phi, self.b_phi, self.sigma_lm2];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("prior hyperparameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Residual variance of the pilot regression of `y` on `(1, a, x)`, floored
/// at `max(1e−8·var(y), 1e−12)`.
pub fn sigma_lm2_anchor(ds: &Dataset) -> f64 {
    let y: Vec<f64> = ds.y().iter().copied().collect();
    let var_y = if y.len() > 1 { sample_var(&y) } else { 0.0 };
    let floor = (1e-8 * var_y).max(1e-12);
    let n = ds.n();
    let p = ds.p();
    let raw = if n > p + 2 {
        let z = DMatrix::from_fn(n, p + 2, |i, c| match c {
            0 => 1.0,
            1 => ds.a()[i],
            _ => ds.x()[(i, c - 2)],
        });
        match least_squares(&z, ds.y()) {
            Ok(fit) => fit.rss / (n - p - 2) as f64,
            Err(e) => {
                log::warn!("pilot regression failed ({e}); using var(y) as sigma_lm2");
                var_y
            }
        }
    } else {
        log::warn!("pilot regression has no residual degrees of freedom; using var(y)");
        var_y
    };
    if !(raw >= floor) {
        log::warn!("sigma_lm2 anchor {raw} below floor, using {floor}");
        return floor;
    }
    raw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(y: &[f64], a: &[f64], x: &[f64], p: usize) -> Dataset {
        let n = y.len();
        Dataset::new(
            DVector::from_column_slice(y),
            DVector::from_column_slice(a),
            DMatrix::from_row_slice(n, p, x),
            DMatrix::from_row_slice(n, p, x),
        )
        .unwrap()
    }

    #[test]
    fn full_design_rows() {
        let d = ds(&[0.0, 1.0], &[0.0, 1.0], &[3.0, 5.0], 1);
        let z = build_design(&d, &ModelSpec::full());
        assert_eq!(z.z, DMatrix::from_row_slice(2, 4, &[1.0, 3.0, 0.0, 0.0, 1.0, 5.0, 1.0, 5.0]));
        assert_eq!(z.treatment_col, 2);
        assert_eq!(z.interaction_cols, vec![3]);
    }

    #[test]
    fn treatment_only_design() {
        let d = ds(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 1);
        let z = build_design(&d, &ModelSpec::treatment_only());
        assert_eq!(z.z, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn empty_x_full_equals_treatment_only() {
        let d = ds(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0], &[], 0);
        assert_eq!(
            build_design(&d, &ModelSpec::full()),
            build_design(&d, &ModelSpec::treatment_only())
        );
    }

    #[test]
    fn interactions_can_be_disabled() {
        let d = ds(&[0.0, 1.0], &[0.0, 1.0], &[3.0, 5.0], 1);
        let spec = ModelSpec { interactions: false, ..ModelSpec::full() };
        let z = build_design(&d, &spec);
        assert_eq!(z.ncols(), 3);
        assert!(z.interaction_cols.is_empty());
    }

    #[test]
    fn dataset_validation() {
        let bad_a = Dataset::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![0.0, 2.0]),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 0),
        );
        assert!(matches!(bad_a, Err(Error::Data(_))));
        let one_arm = Dataset::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 0),
        );
        assert!(matches!(one_arm, Err(Error::Data(_))));
    }

    #[test]
    fn perfect_fit_anchor_is_floored() {
        let a = [0.0, 1.0, 0.0, 1.0, 1.0];
        let y: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let d = ds(&y, &a, &[], 0);
        let var_y = sample_var(&y);
        assert_eq!(sigma_lm2_anchor(&d), (1e-8 * var_y).max(1e-12));
    }

    #[test]
    fn constant_y_anchor_is_floored() {
        let d = ds(&[3.0; 4], &[0.0, 1.0, 0.0, 1.0], &[], 0);
        assert_eq!(sigma_lm2_anchor(&d), 1e-12);
    }

    #[test]
    fn anchor_matches_normal_equations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 30;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| 1.0 + a[i] + x[2 * i] - x[2 * i + 1] + rng.random_range(-1.0..1.0)).collect();
        let d = ds(&y, &a, &x, 2);
        // normal equations oracle
        let z = DMatrix::from_fn(n, 4, |i, c| match c {
            0 => 1.0,
            1 => a[i],
            _ => x[2 * i + c - 2],
        });
        let yv = DVector::from_vec(y.clone());
        let beta = (z.transpose() * &z).try_inverse().unwrap() * z.transpose() * &yv;
        let rss = (&yv - &z * beta).norm_squared();
        assert!((sigma_lm2_anchor(&d) - rss / (n - 4) as f64).abs() < 1e-8);
    }

    #[test]
    fn prior_defaults() {
        let p = PriorConfig::from_anchor(3.0);
        assert_eq!((p.omega, p.a_phi, p.b_phi, p.a0, p.af), (1e6, 1.0, 1.0, 2.0, 2.0));
        assert_eq!((p.b0, p.bf), (1.5, 1.5));
    }
}
