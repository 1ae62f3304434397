//! Core domain types. Every constructor validates its invariants, so an
//! instance that exists is an instance that is valid.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on the proportion simplex; sums within it are renormalized.
pub const SIMPLEX_TOL: f64 = 1e-8;

/// Symmetry tolerance for prior covariance matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub(crate) fn check_unique(kind: &'static str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId {
                kind,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

pub(crate) fn check_finite<'a>(what: &str, xs: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if xs.into_iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Observed bulk expression, genes by samples, on a log-normalized scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BulkMatrix {
    genes: Vec<String>,
    samples: Vec<String>,
    values: DMatrix<f64>,
}

impl BulkMatrix {
    pub fn new(genes: Vec<String>, samples: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if genes.is_empty() || samples.is_empty() {
            return Err(Error::Empty(
                "bulk matrix needs at least one gene and one sample".into(),
            ));
        }
        if values.nrows() != genes.len() || values.ncols() != samples.len() {
            return Err(Error::Dimension(format!(
                "bulk values are {}x{} but there are {} genes and {} samples",
                values.nrows(),
                values.ncols(),
                genes.len(),
                samples.len()
            )));
        }
        check_unique("gene", &genes)?;
        check_unique("sample", &samples)?;
        check_finite("bulk matrix", values.iter())?;
        Ok(BulkMatrix {
            genes,
            samples,
            values,
        })
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn gene_index(&self, gene: &str) -> Option<usize> {
        self.genes.iter().position(|g| g == gene)
    }

    pub fn gene_row(&self, g: usize) -> Vec<f64> {
        self.values.row(g).iter().copied().collect()
    }
}

/// Latent cell-type-specific expression with per-entry posterior mean and
/// variance, stored gene-major then cell type then sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CtsTensor {
    genes: Vec<String>,
    cell_types: Vec<String>,
    samples: Vec<String>,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl CtsTensor {
    pub fn new(
        genes: Vec<String>,
        cell_types: Vec<String>,
        samples: Vec<String>,
        mean: Vec<f64>,
        variance: Vec<f64>,
    ) -> Result<Self> {
        let len = genes.len() * cell_types.len() * samples.len();
        if mean.len() != len || variance.len() != len {
            return Err(Error::Dimension(format!(
                "tensor of shape {}x{}x{} needs {len} entries, got mean {} / variance {}",
                genes.len(),
                cell_types.len(),
                samples.len(),
                mean.len(),
                variance.len()
            )));
        }
        check_unique("gene", &genes)?;
        check_unique("cell type", &cell_types)?;
        check_unique("sample", &samples)?;
        check_finite("tensor mean", mean.iter())?;
        check_finite("tensor variance", variance.iter())?;
        if let Some(v) = variance.iter().find(|v| **v < 0.0) {
            return Err(Error::Invalid(format!("negative tensor variance {v}")));
        }
        Ok(CtsTensor {
            genes,
            cell_types,
            samples,
            mean,
            variance,
        })
    }

    /// Build from closures over (gene, cell type, sample) indices.
    pub fn from_fn(
        genes: Vec<String>,
        cell_types: Vec<String>,
        samples: Vec<String>,
        mut mean: impl FnMut(usize, usize, usize) -> f64,
        mut variance: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (g_n, c_n, n_n) = (genes.len(), cell_types.len(), samples.len());
        let mut m = Vec::with_capacity(g_n * c_n * n_n);
        let mut v = Vec::with_capacity(g_n * c_n * n_n);
        for g in 0..g_n {
            for c in 0..c_n {
                for i in 0..n_n {
                    m.push(mean(g, c, i));
                    v.push(variance(g, c, i));
                }
            }
        }
        CtsTensor::new(genes, cell_types, samples, m, v)
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn cell_types(&self) -> &[String] {
        &self.cell_types
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.genes.len(), self.cell_types.len(), self.samples.len())
    }

    fn offset(&self, g: usize, c: usize, i: usize) -> usize {
        (g * self.cell_types.len() + c) * self.samples.len() + i
    }

    pub fn mean_at(&self, g: usize, c: usize, i: usize) -> f64 {
        self.mean[self.offset(g, c, i)]
    }

    pub fn variance_at(&self, g: usize, c: usize, i: usize) -> f64 {
        self.variance[self.offset(g, c, i)]
    }

    /// Posterior means of one (gene, cell type) across all samples.
    pub fn mean_over_samples(&self, g: usize, c: usize) -> &[f64] {
        let start = self.offset(g, c, 0);
        &self.mean[start..start + self.samples.len()]
    }

    pub fn variance_over_samples(&self, g: usize, c: usize) -> &[f64] {
        let start = self.offset(g, c, 0);
        &self.variance[start..start + self.samples.len()]
    }

    pub fn mean_values(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance_values(&self) -> &[f64] {
        &self.variance
    }

    /// Copy restricted to the given sample columns, in the given order.
    pub fn select_samples(&self, sample_idx: &[usize]) -> Result<CtsTensor> {
        let samples = sample_idx
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect();
        CtsTensor::from_fn(
            self.genes.clone(),
            self.cell_types.clone(),
            samples,
            |g, c, k| self.mean_at(g, c, sample_idx[k]),
            |g, c, k| self.variance_at(g, c, sample_idx[k]),
        )
    }
}

/// Per-gene multivariate Normal prior over the cell-type vector, plus the
/// observation noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GenePrior {
    gene: String,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    noise_var: f64,
}

impl GenePrior {
    pub fn new(
        gene: String,
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        noise_var: f64,
    ) -> Result<Self> {
        let c = mu.len();
        if c == 0 || sigma.nrows() != c || sigma.ncols() != c {
            return Err(Error::Dimension(format!(
                "prior for {gene}: mean has {c} entries, covariance is {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        check_finite("prior mean", mu.iter())?;
        check_finite("prior covariance", sigma.iter())?;
        if !linalg::is_symmetric(&sigma, SYMMETRY_TOL) {
            return Err(Error::Invalid(format!(
                "prior covariance for {gene} is not symmetric"
            )));
        }
        if !linalg::is_positive_definite(&sigma) {
            return Err(Error::Invalid(format!(
                "prior covariance for {gene} is not positive definite"
            )));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::Invalid(format!(
                "noise variance for {gene} must be positive, got {noise_var}"
            )));
        }
        Ok(GenePrior {
            gene,
            mu,
            sigma,
            noise_var,
        })
    }

    pub fn gene(&self) -> &str {
        &self.gene
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn n_cell_types(&self) -> usize {
        self.mu.len()
    }

    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        GenePrior::new(
            self.gene.clone(),
            self.mu.clone(),
            self.sigma.clone(),
            noise_var,
        )
    }
}

/// Per-sample mixing proportions and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    sample_id: String,
    proportions: DVector<f64>,
    bulk_cov: DVector<f64>,
    cts_cov: DVector<f64>,
}

impl SampleMeta {
    pub fn new(
        sample_id: String,
        proportions: DVector<f64>,
        bulk_cov: DVector<f64>,
        cts_cov: DVector<f64>,
    ) -> Result<Self> {
        if proportions.is_empty() {
            return Err(Error::Empty(format!("proportions for sample {sample_id}")));
        }
        check_finite("proportions", proportions.iter())?;
        check_finite("bulk covariates", bulk_cov.iter())?;
        check_finite("cell-type covariates", cts_cov.iter())?;
        if let Some(p) = proportions.iter().find(|p| **p < 0.0) {
            return Err(Error::Invalid(format!(
                "negative proportion {p} for sample {sample_id}"
            )));
        }
        let total = proportions.sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invalid(format!(
                "proportions for sample {sample_id} sum to {total}, not 1"
            )));
        }
        // A sum already within rounding of 1 is kept as is, so that a
        // rescaled vector is not rescaled again after a save and load.
        let rounding = 4.0 * f64::EPSILON * proportions.len() as f64;
        let proportions = if (total - 1.0).abs() <= rounding {
            proportions
        } else {
            proportions / total
        };
        Ok(SampleMeta {
            sample_id,
            proportions,
            bulk_cov,
            cts_cov,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn proportions(&self) -> &DVector<f64> {
        &self.proportions
    }

    pub fn bulk_cov(&self) -> &DVector<f64> {
        &self.bulk_cov
    }

    pub fn cts_cov(&self) -> &DVector<f64> {
        &self.cts_cov
    }
}

/// Sample metadata for a cohort, sharing one cell-type axis and covariate
/// dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetaTable {
    cell_types: Vec<String>,
    metas: Vec<SampleMeta>,
}

impl SampleMetaTable {
    pub fn new(cell_types: Vec<String>, metas: Vec<SampleMeta>) -> Result<Self> {
        if cell_types.is_empty() {
            return Err(Error::Empty("cell types".into()));
        }
        check_unique("cell type", &cell_types)?;
        let ids: Vec<String> = metas.iter().map(|m| m.sample_id.clone()).collect();
        check_unique("sample", &ids)?;
        let c = cell_types.len();
        let (d1, d2) = metas
            .first()
            .map(|m| (m.bulk_cov.len(), m.cts_cov.len()))
            .unwrap_or((0, 0));
        for m in &metas {
            if m.proportions.len() != c || m.bulk_cov.len() != d1 || m.cts_cov.len() != d2 {
                return Err(Error::Dimension(format!(
                    "sample {} has shape (C={}, d1={}, d2={}), expected ({c}, {d1}, {d2})",
                    m.sample_id,
                    m.proportions.len(),
                    m.bulk_cov.len(),
                    m.cts_cov.len()
                )));
            }
        }
        Ok(SampleMetaTable { cell_types, metas })
    }

    pub fn cell_types(&self) -> &[String] {
        &self.cell_types
    }

    pub fn metas(&self) -> &[SampleMeta] {
        &self.metas
    }

    pub fn n_cell_types(&self) -> usize {
        self.cell_types.len()
    }

    pub fn bulk_dim(&self) -> usize {
        self.metas.first().map_or(0, |m| m.bulk_cov.len())
    }

    pub fn cts_dim(&self) -> usize {
        self.metas.first().map_or(0, |m| m.cts_cov.len())
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleMeta> {
        self.metas.iter().find(|m| m.sample_id == sample_id)
    }

    /// Metadata reordered to follow the bulk matrix's sample axis.
    pub fn aligned_to(&self, samples: &[String]) -> Result<Vec<SampleMeta>> {
        samples
            .iter()
            .map(|s| {
                self.get(s)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("no metadata for sample {s}")))
            })
            .collect()
    }
}

/// Covariate adjustment coefficients for one gene: `gamma` on bulk-level
/// covariates and `b` (cell types by cell-type-level covariates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentParams {
    pub gamma: DVector<f64>,
    pub b: DMatrix<f64>,
}

impl AdjustmentParams {
    pub fn new(gamma: DVector<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_finite("gamma", gamma.iter())?;
        check_finite("b", b.iter())?;
        Ok(AdjustmentParams { gamma, b })
    }

    pub fn zeros(n_cell_types: usize, bulk_dim: usize, cts_dim: usize) -> Self {
        AdjustmentParams {
            gamma: DVector::zeros(bulk_dim),
            b: DMatrix::zeros(n_cell_types, cts_dim),
        }
    }

    /// Covariate contribution `gamma . c1 + w^T b c2` for one sample.
    pub fn offset(&self, meta: &SampleMeta) -> f64 {
        let bulk = if self.gamma.is_empty() {
            0.0
        } else {
            self.gamma.dot(meta.bulk_cov())
        };
        let cts = if self.b.ncols() == 0 {
            0.0
        } else {
            meta.proportions().dot(&(&self.b * meta.cts_cov()))
        };
        bulk + cts
    }

    pub fn check_shape(&self, c: usize, d1: usize, d2: usize) -> Result<()> {
        if self.gamma.len() != d1 || self.b.nrows() != c || self.b.ncols() != d2 {
            return Err(Error::Dimension(format!(
                "adjustment params are (d1={}, {}x{}), expected (d1={d1}, {c}x{d2})",
                self.gamma.len(),
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        Ok(())
    }
}

/// Hyperpriors of the Gibbs sampler and switches to hold blocks fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperpriors {
    /// Prior variance of every covariate coefficient (prior mean 0).
    pub coef_var: f64,
    /// Inverse-Gamma shape of the noise variance prior.
    pub noise_shape: f64,
    /// Inverse-Gamma scale of the noise variance prior.
    pub noise_scale: f64,
    pub update_adjustment: bool,
    pub update_noise: bool,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Hyperpriors {
            coef_var: 10.0,
            noise_shape: 2.0,
            noise_scale: 1.0,
            update_adjustment: true,
            update_noise: true,
        }
    }
}

/// Settings for sampling and two-stage prior refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    /// Standard deviation of the jitter on refined prior means.
    pub tau: f64,
    /// Inverse-Wishart degrees of freedom; `None` means 100 C. Values near
    /// the minimum C + 2 make single covariance draws erratic enough to
    /// undo the first round's fit.
    pub nu: Option<f64>,
    pub rounds: usize,
    pub chains: usize,
    pub iters: usize,
    /// Discarded draws per chain; `None` means iters / 2.
    pub burnin: Option<usize>,
    pub rhat_threshold: f64,
    /// Shrinkage of reference covariances toward their diagonal.
    pub shrinkage: f64,
    pub hyper: Hyperpriors,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            tau: 0.1,
            nu: None,
            rounds: 2,
            chains: 4,
            iters: 2000,
            burnin: None,
            rhat_threshold: 1.05,
            shrinkage: 0.5,
            hyper: Hyperpriors::default(),
        }
    }
}

impl RefinementConfig {
    pub fn nu_for(&self, n_cell_types: usize) -> f64 {
        self.nu.unwrap_or(100.0 * n_cell_types as f64)
    }

    pub fn burnin(&self) -> usize {
        self.burnin.unwrap_or(self.iters / 2)
    }

    /// Check every field; `iters == 0` is accepted as a degenerate run that
    /// retains no draws and is reported as non-converged.
    pub fn validate(&self, n_cell_types: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be non-negative, got {}", self.tau));
        }
        let nu = self.nu_for(n_cell_types);
        if !(nu >= n_cell_types as f64 + 2.0) || !nu.is_finite() {
            return bad(format!(
                "nu must be at least C + 2 = {}, got {nu}",
                n_cell_types + 2
            ));
        }
        if self.rounds == 0 {
            return bad("rounds must be positive".into());
        }
        if self.chains < 2 {
            return bad(format!(
                "at least 2 chains are required, got {}",
                self.chains
            ));
        }
        let burnin = self.burnin();
        if self.iters > 0 && burnin >= self.iters {
            return bad(format!(
                "burnin {burnin} must be below iters {}",
                self.iters
            ));
        }
        if self.iters == 0 && burnin != 0 {
            return bad("burnin must be 0 when iters is 0".into());
        }
        if !(self.rhat_threshold > 1.0) {
            return bad(format!(
                "rhat threshold must exceed 1, got {}",
                self.rhat_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return bad(format!(
                "shrinkage must lie in [0, 1], got {}",
                self.shrinkage
            ));
        }
        let h = &self.hyper;
        if !(h.coef_var > 0.0 && h.noise_shape > 0.0 && h.noise_scale > 0.0) {
            return bad("hyperprior constants must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn bulk_rejects_duplicates_and_nan() {
        let m = dmatrix![1.0, 2.0; 3.0, 4.0];
        assert!(BulkMatrix::new(ids("g", 2), ids("s", 2), m.clone()).is_ok());
        let dup = vec!["G1".to_string(), "G1".to_string()];
        assert!(matches!(
            BulkMatrix::new(dup, ids("s", 2), m.clone()),
            Err(Error::DuplicateId { .. })
        ));
        let nan = dmatrix![1.0, f64::NAN; 3.0, 4.0];
        assert!(matches!(
            BulkMatrix::new(ids("g", 2), ids("s", 2), nan),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn tensor_rejects_negative_variance() {
        let r = CtsTensor::new(
            ids("g", 1),
            ids("c", 1),
            ids("s", 1),
            vec![5.0],
            vec![-0.25],
        );
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn prior_requires_spd() {
        let ok = GenePrior::new(
            "g".into(),
            dvector![0.0, 1.0],
            dmatrix![1.0, 0.2; 0.2, 1.0],
            1.0,
        );
        assert!(ok.is_ok());
        let asym = GenePrior::new(
            "g".into(),
            dvector![0.0, 1.0],
            dmatrix![1.0, 0.2; 0.3, 1.0],
            1.0,
        );
        assert!(asym.is_err());
        let indefinite = GenePrior::new(
            "g".into(),
            dvector![0.0, 1.0],
            dmatrix![1.0, 2.0; 2.0, 1.0],
            1.0,
        );
        assert!(indefinite.is_err());
        let no_noise = GenePrior::new("g".into(), dvector![0.0], dmatrix![1.0], 0.0);
        assert!(no_noise.is_err());
    }

    #[test]
    fn proportions_renormalized_within_tolerance() {
        let m = SampleMeta::new(
            "s".into(),
            dvector![0.3, 0.7 + 5e-9],
            DVector::zeros(0),
            DVector::zeros(0),
        )
        .unwrap();
        assert!((m.proportions().sum() - 1.0).abs() < 1e-15);
        let again = SampleMeta::new("s".into(), m.proportions().clone(), DVector::zeros(0), DVector::zeros(0)).unwrap();
        assert_eq!(again.proportions(), m.proportions());
        let far = SampleMeta::new(
            "s".into(),
            dvector![0.3, 0.71],
            DVector::zeros(0),
            DVector::zeros(0),
        );
        assert!(far.is_err());
        let neg = SampleMeta::new(
            "s".into(),
            dvector![-0.1, 1.1],
            DVector::zeros(0),
            DVector::zeros(0),
        );
        assert!(neg.is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = RefinementConfig::default();
        assert_eq!(cfg.rhat_threshold, 1.05);
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.nu_for(3), 300.0);
        assert_eq!(cfg.burnin(), 1000);
        assert!(cfg.validate(3).is_ok());
        let bad = RefinementConfig {
            chains: 1,
            ..RefinementConfig::default()
        };
        assert!(bad.validate(3).is_err());
        let low_nu = RefinementConfig {
            nu: Some(4.0),
            ..RefinementConfig::default()
        };
        assert!(low_nu.validate(3).is_err());
    }
}
