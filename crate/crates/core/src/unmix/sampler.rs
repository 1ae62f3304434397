//! Blocked Gibbs sampler for one gene's mixture model.
//!
//! Per gene `g` and sample `i`:
//!
//! ```text
//! z_i ~ N(mu, S)
//! x_i = w_i^T z_i + gamma^T c1_i + w_i^T B c2_i + e_i,   e_i ~ N(0, s2)
//! gamma, B ~ N(0, coef_var)       s2 ~ InvGamma(a0, b0)
//! ```
//!
//! Every block has a conjugate full conditional. Genes share no parameters,
//! so each (gene, chain) pair runs on its own random stream.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use super::rhat::split_rhat;
use crate::data::{
    AdjustmentParams, BulkMatrix, CtsTensor, GenePrior, Hyperpriors, RefinementConfig, SampleMeta,
    SampleMetaTable,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, tag};
use crate::stats::RunningMoments;

/// Per-sample design shared by every gene: proportions and the covariate
/// regression matrix whose columns are `c1` followed by `w (x) c2`.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    w: Vec<DVector<f64>>,
    reg: DMatrix<f64>,
    xtx: DMatrix<f64>,
    n_types: usize,
    bulk_dim: usize,
    cts_dim: usize,
}

impl Design {
    pub(crate) fn new(metas: &[SampleMeta], n_types: usize) -> Result<Self> {
        let (d1, d2) = metas
            .first()
            .map(|m| (m.bulk_cov().len(), m.cts_cov().len()))
            .unwrap_or((0, 0));
        let p = d1 + n_types * d2;
        let mut reg = DMatrix::zeros(metas.len(), p);
        for (i, m) in metas.iter().enumerate() {
            if m.proportions().len() != n_types
                || m.bulk_cov().len() != d1
                || m.cts_cov().len() != d2
            {
                return Err(Error::Dimension(format!(
                    "sample {} does not match the shared design",
                    m.sample_id()
                )));
            }
            for k in 0..d1 {
                reg[(i, k)] = m.bulk_cov()[k];
            }
            for c in 0..n_types {
                for k in 0..d2 {
                    reg[(i, d1 + c * d2 + k)] = m.proportions()[c] * m.cts_cov()[k];
                }
            }
        }
        let xtx = reg.transpose() * &reg;
        Ok(Design {
            w: metas.iter().map(|m| m.proportions().clone()).collect(),
            reg,
            xtx,
            n_types,
            bulk_dim: d1,
            cts_dim: d2,
        })
    }

    fn n_coef(&self) -> usize {
        self.reg.ncols()
    }

    fn n_samples(&self) -> usize {
        self.w.len()
    }

    fn theta(&self, adj: &AdjustmentParams) -> DVector<f64> {
        let (d1, d2) = (self.bulk_dim, self.cts_dim);
        DVector::from_fn(self.n_coef(), |k, _| {
            if k < d1 {
                adj.gamma[k]
            } else {
                let j = k - d1;
                adj.b[(j / d2, j % d2)]
            }
        })
    }

    fn adjustment(&self, theta: &DVector<f64>) -> AdjustmentParams {
        let (d1, d2) = (self.bulk_dim, self.cts_dim);
        AdjustmentParams {
            gamma: DVector::from_fn(d1, |k, _| theta[k]),
            b: DMatrix::from_fn(self.n_types, d2, |c, k| theta[d1 + c * d2 + k]),
        }
    }

    fn offsets(&self, adj: &AdjustmentParams) -> DVector<f64> {
        if self.n_coef() == 0 {
            DVector::zeros(self.n_samples())
        } else {
            &self.reg * self.theta(adj)
        }
    }
}

/// Prior quantities that stay fixed for a whole run.
#[derive(Debug, Clone)]
pub(crate) struct PreparedPrior {
    mu: DVector<f64>,
    chol: DMatrix<f64>,
    sigma_w: Vec<DVector<f64>>,
    w_sigma_w: Vec<f64>,
    sigma_diag: DVector<f64>,
    noise_var: f64,
}

impl PreparedPrior {
    pub(crate) fn new(prior: &GenePrior, design: &Design) -> Result<Self> {
        if prior.n_cell_types() != design.n_types {
            return Err(Error::Dimension(format!(
                "prior for {} has {} cell types, design has {}",
                prior.gene(),
                prior.n_cell_types(),
                design.n_types
            )));
        }
        let chol = linalg::cholesky(prior.sigma())
            .ok_or(Error::SingularPrecision)?
            .l();
        let sigma_w: Vec<DVector<f64>> = design.w.iter().map(|w| prior.sigma() * w).collect();
        let w_sigma_w = design
            .w
            .iter()
            .zip(&sigma_w)
            .map(|(w, sw)| w.dot(sw))
            .collect();
        Ok(PreparedPrior {
            mu: prior.mu().clone(),
            chol,
            sigma_w,
            w_sigma_w,
            sigma_diag: prior.sigma().diagonal(),
            noise_var: prior.noise_var(),
        })
    }
}

/// One gene's block of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneState {
    /// Cell-type vector of every sample.
    pub z: Vec<DVector<f64>>,
    pub adjustment: AdjustmentParams,
    pub noise_var: f64,
    rng: rng::Rng,
}

impl GeneState {
    /// Over-dispersed start: prior draws with the deviation from the mean
    /// doubled.
    fn initialize(prior: &PreparedPrior, design: &Design, mut rng: rng::Rng) -> Self {
        let z = (0..design.n_samples())
            .map(|_| {
                &prior.mu + (&prior.chol * linalg::standard_normal(&mut rng, prior.mu.len())) * 2.0
            })
            .collect();
        GeneState {
            z,
            adjustment: AdjustmentParams::zeros(design.n_types, design.bulk_dim, design.cts_dim),
            noise_var: prior.noise_var,
            rng,
        }
    }

    /// Push the exact conditional mean of every `z_i` given the current
    /// coefficients and noise into `means`, and add the conditional
    /// variances to `variances`. Averaging these over draws estimates the
    /// posterior moments with less Monte Carlo error than the raw draws.
    fn accumulate_conditional(
        &self,
        x: &[f64],
        prior: &PreparedPrior,
        design: &Design,
        means: &mut [RunningMoments],
        variances: &mut [f64],
    ) {
        let n = design.n_samples();
        let offsets = design.offsets(&self.adjustment);
        for i in 0..n {
            let s = prior.w_sigma_w[i] + self.noise_var;
            let step = (x[i] - offsets[i] - design.w[i].dot(&prior.mu)) / s;
            for c in 0..design.n_types {
                let sw = prior.sigma_w[i][c];
                means[c * n + i].push(prior.mu[c] + sw * step);
                variances[c * n + i] += prior.sigma_diag[c] - sw * sw / s;
            }
        }
    }

    fn sweep(
        &mut self,
        x: &[f64],
        prior: &PreparedPrior,
        design: &Design,
        hyper: &Hyperpriors,
    ) -> Result<()> {
        let n = design.n_samples();
        let c_n = design.n_types;
        let mut offsets = design.offsets(&self.adjustment);

        // (a) cell-type vectors, drawn by conditioning a prior draw on the
        // observation: z = z0 + S w (r - w^T z0 - e0) / (w^T S w + s2).
        let noise_sd = self.noise_var.sqrt();
        for i in 0..n {
            let r = x[i] - offsets[i];
            let z0 = &prior.mu + &prior.chol * linalg::standard_normal(&mut self.rng, c_n);
            let e0 = noise_sd * self.rng.sample::<f64, _>(StandardNormal);
            let s = prior.w_sigma_w[i] + self.noise_var;
            let step = (r - design.w[i].dot(&z0) - e0) / s;
            self.z[i] = z0 + &prior.sigma_w[i] * step;
        }

        // (b) covariate coefficients: Bayesian linear regression of
        // x - w^T z on the design with N(0, coef_var) priors.
        let p = design.n_coef();
        if hyper.update_adjustment && p > 0 {
            let y = DVector::from_fn(n, |i, _| x[i] - design.w[i].dot(&self.z[i]));
            let precision = DMatrix::identity(p, p) / hyper.coef_var + &design.xtx / self.noise_var;
            let rhs = design.reg.transpose() * y / self.noise_var;
            let chol = linalg::cholesky(&precision).ok_or(Error::SingularPrecision)?;
            let mean = chol.solve(&rhs);
            let eps = linalg::standard_normal(&mut self.rng, p);
            let dev = chol
                .l()
                .transpose()
                .solve_upper_triangular(&eps)
                .ok_or(Error::SingularPrecision)?;
            let theta = mean + dev;
            self.adjustment = design.adjustment(&theta);
            offsets = &design.reg * theta;
        }

        // (c) noise variance from its Inverse-Gamma conditional.
        if hyper.update_noise {
            let ss: f64 = (0..n)
                .map(|i| {
                    let e = x[i] - design.w[i].dot(&self.z[i]) - offsets[i];
                    e * e
                })
                .sum();
            let shape = hyper.noise_shape + n as f64 / 2.0;
            let rate = hyper.noise_scale + ss / 2.0;
            let g = Gamma::new(shape, 1.0 / rate)
                .map_err(|e| Error::Invalid(format!("noise conditional: {e}")))?
                .sample(&mut self.rng);
            self.noise_var = 1.0 / g;
        }
        if !self.noise_var.is_finite() || self.noise_var <= 0.0 {
            return Err(Error::NonFinite("noise variance draw".into()));
        }
        Ok(())
    }
}

/// State of one chain across all genes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub genes: Vec<GeneState>,
    pub iteration: usize,
    pub seed: u64,
    pub chain: usize,
}

fn gene_stream(seed: u64, chain: usize, gene: usize) -> rng::Rng {
    rng::stream(seed, &[tag::CHAIN, chain as u64, gene as u64])
}

impl ChainState {
    pub fn initialize(
        priors: &[GenePrior],
        metas: &[SampleMeta],
        seed: u64,
        chain: usize,
    ) -> Result<Self> {
        let c_n = priors.first().map_or(0, |p| p.n_cell_types());
        let design = Design::new(metas, c_n)?;
        let genes = priors
            .iter()
            .enumerate()
            .map(|(g, p)| {
                let prep = PreparedPrior::new(p, &design)?;
                Ok(GeneState::initialize(
                    &prep,
                    &design,
                    gene_stream(seed, chain, g),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(ChainState {
            genes,
            iteration: 0,
            seed,
            chain,
        })
    }
}

/// One full sweep over every gene: cell-type vectors, then covariate
/// coefficients, then noise variance. Deterministic given the state.
pub fn gibbs_sweep(
    state: &mut ChainState,
    bulk: &BulkMatrix,
    priors: &[GenePrior],
    metas: &[SampleMeta],
    hyper: &Hyperpriors,
) -> Result<()> {
    if priors.len() != bulk.n_genes()
        || state.genes.len() != bulk.n_genes()
        || metas.len() != bulk.n_samples()
    {
        return Err(Error::Dimension(format!(
            "state has {} genes, priors {}, bulk {}x{}, metadata {}",
            state.genes.len(),
            priors.len(),
            bulk.n_genes(),
            bulk.n_samples(),
            metas.len()
        )));
    }
    let design = Design::new(metas, priors[0].n_cell_types())?;
    state
        .genes
        .par_iter_mut()
        .zip(priors.par_iter())
        .enumerate()
        .try_for_each(|(g, (gs, prior))| {
            let prep = PreparedPrior::new(prior, &design)?;
            gs.sweep(&bulk.gene_row(g), &prep, &design, hyper)
        })?;
    state.iteration += 1;
    Ok(())
}

/// Split-R-hat of one (gene, cell type) trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RhatEntry {
    pub gene: String,
    pub cell_type: String,
    pub rhat: f64,
}

/// Pooled posterior of a run.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    /// Posterior mean and variance of every (gene, cell type, sample).
    pub cts: CtsTensor,
    /// Posterior mean of the cell-type vector across samples, per gene.
    pub mu_hat: Vec<DVector<f64>>,
    /// Posterior expected covariance of the cell-type vector across samples.
    pub sigma_hat: Vec<DMatrix<f64>>,
    pub noise_var_hat: Vec<f64>,
    pub adjustment_hat: Vec<AdjustmentParams>,
    pub rhat: Vec<RhatEntry>,
    pub max_rhat: f64,
    pub converged: bool,
    pub draws_per_chain: usize,
    pub diagnostics: Vec<String>,
}

/// Result of all chains for one gene.
#[derive(Debug, Clone)]
pub(crate) struct GenePosterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub mu_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub noise_var_hat: f64,
    pub adjustment_hat: AdjustmentParams,
    /// Per cell type; NaN when undefined.
    pub rhat: Vec<f64>,
    pub kept: usize,
}

/// Run every chain of one gene and pool the retained draws. Posterior
/// means and variances of `z` are Rao-Blackwellized over the conditional
/// given the other blocks.
pub(crate) fn run_gene(
    x: &[f64],
    prior: &GenePrior,
    design: &Design,
    config: &RefinementConfig,
    seed: u64,
    gene: usize,
) -> Result<GenePosterior> {
    let prep = PreparedPrior::new(prior, design)?;
    let (c_n, n) = (design.n_types, design.n_samples());
    let burnin = config.burnin();
    let kept = config.iters.saturating_sub(burnin);
    let mut moments = vec![RunningMoments::default(); c_n * n];
    let mut cond_var = vec![0.0; c_n * n];
    let mut traces: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(config.chains); c_n];
    let mut sum_d = DVector::zeros(c_n);
    let mut sum_dd = DMatrix::zeros(c_n, c_n);
    let mut noise = RunningMoments::default();
    let mut theta_sum = DVector::zeros(design.n_coef());

    for chain in 0..config.chains {
        let mut state = GeneState::initialize(&prep, design, gene_stream(seed, chain, gene));
        let mut chain_moments = vec![RunningMoments::default(); c_n * n];
        let mut chain_traces = vec![Vec::with_capacity(kept); c_n];
        for t in 0..config.iters {
            state.sweep(x, &prep, design, &config.hyper)?;
            if t < burnin {
                continue;
            }
            for c in 0..c_n {
                let mut avg = 0.0;
                for zi in &state.z {
                    avg += zi[c];
                }
                if n > 0 {
                    chain_traces[c].push(avg / n as f64);
                }
            }
            state.accumulate_conditional(x, &prep, design, &mut chain_moments, &mut cond_var);
            for zi in &state.z {
                let d = zi - &prep.mu;
                sum_dd += &d * d.transpose();
                sum_d += d;
            }
            noise.push(state.noise_var);
            theta_sum += design.theta(&state.adjustment);
        }
        for (acc, m) in moments.iter_mut().zip(&chain_moments) {
            acc.merge(m);
        }
        for (c, tr) in chain_traces.into_iter().enumerate() {
            traces[c].push(tr);
        }
    }

    let draws = kept * config.chains;
    let count = (draws * n) as f64;
    let (mu_hat, sigma_hat) = if count > 0.0 {
        let d_bar = &sum_d / count;
        let cov = linalg::symmetrize(&(&sum_dd / count - &d_bar * d_bar.transpose()));
        let trace = cov.trace().max(0.0);
        let eps = if trace > 0.0 {
            1e-6 * trace / c_n as f64
        } else {
            1e-6
        };
        (&prep.mu + d_bar, linalg::regularize_pd(&cov, eps).0)
    } else {
        (prior.mu().clone(), prior.sigma().clone())
    };
    let (mean, variance) = if draws > 0 {
        (
            moments.iter().map(|m| m.mean).collect(),
            moments
                .iter()
                .zip(&cond_var)
                .map(|(m, v)| m.population_variance() + v / draws as f64)
                .collect(),
        )
    } else {
        (
            (0..c_n * n).map(|k| prior.mu()[k / n.max(1)]).collect(),
            (0..c_n * n)
                .map(|k| prior.sigma()[(k / n.max(1), k / n.max(1))])
                .collect(),
        )
    };
    let rhat = traces
        .iter()
        .map(|chains| split_rhat(chains).unwrap_or(f64::NAN))
        .collect();
    let theta_hat = if draws > 0 {
        theta_sum / draws as f64
    } else {
        DVector::zeros(design.n_coef())
    };
    Ok(GenePosterior {
        mean,
        variance,
        mu_hat,
        sigma_hat,
        noise_var_hat: if draws > 0 {
            noise.mean
        } else {
            prior.noise_var()
        },
        adjustment_hat: design.adjustment(&theta_hat),
        rhat,
        kept,
    })
}

/// Sample the posterior of every gene with `config.chains` independent
/// chains, discard burn-in, pool draws, and check split-R-hat on each
/// gene's per-cell-type sample-averaged trace. Non-convergence is reported
/// through `converged`, not as an error.
pub fn run_mcmc(
    bulk: &BulkMatrix,
    priors: &[GenePrior],
    metas: &SampleMetaTable,
    config: &RefinementConfig,
    seed: u64,
) -> Result<PosteriorSummary> {
    let c_n = metas.n_cell_types();
    config.validate(c_n)?;
    if priors.len() != bulk.n_genes() {
        return Err(Error::Dimension(format!(
            "{} priors for {} bulk genes",
            priors.len(),
            bulk.n_genes()
        )));
    }
    for (p, g) in priors.iter().zip(bulk.genes()) {
        if p.gene() != g {
            return Err(Error::Invalid(format!(
                "prior for {} is aligned with bulk gene {g}",
                p.gene()
            )));
        }
    }
    let aligned = metas.aligned_to(bulk.samples())?;
    let design = Design::new(&aligned, c_n)?;
    let per_gene: Vec<GenePosterior> = (0..bulk.n_genes())
        .into_par_iter()
        .map(|g| run_gene(&bulk.gene_row(g), &priors[g], &design, config, seed, g))
        .collect::<Result<_>>()?;
    summarize(
        bulk.genes(),
        metas.cell_types(),
        bulk.samples(),
        per_gene,
        config,
    )
}

pub(crate) fn summarize(
    genes: &[String],
    cell_types: &[String],
    samples: &[String],
    per_gene: Vec<GenePosterior>,
    config: &RefinementConfig,
) -> Result<PosteriorSummary> {
    let mut mean = Vec::new();
    let mut variance = Vec::new();
    let mut rhat = Vec::new();
    let mut diagnostics = Vec::new();
    let kept = per_gene.first().map_or(0, |p| p.kept);
    if kept < 4 {
        diagnostics.push(format!(
            "only {kept} post-burn-in draws per chain; split R-hat is undefined"
        ));
    }
    for (g, post) in per_gene.iter().enumerate() {
        mean.extend_from_slice(&post.mean);
        variance.extend_from_slice(&post.variance);
        for (c, r) in post.rhat.iter().enumerate() {
            rhat.push(RhatEntry {
                gene: genes[g].clone(),
                cell_type: cell_types[c].clone(),
                rhat: *r,
            });
        }
    }
    let undefined = rhat.iter().filter(|r| !r.rhat.is_finite()).count();
    if undefined > 0 && kept >= 4 {
        diagnostics.push(format!(
            "{undefined} R-hat values are undefined or infinite"
        ));
    }
    let max_rhat = rhat.iter().map(|r| r.rhat).fold(f64::NEG_INFINITY, |a, b| {
        if a.is_nan() || b.is_nan() {
            f64::NAN
        } else {
            a.max(b)
        }
    });
    let converged = !rhat.is_empty() && max_rhat.is_finite() && max_rhat < config.rhat_threshold;
    if !converged && max_rhat.is_finite() {
        diagnostics.push(format!(
            "max R-hat {max_rhat:.4} is not below the threshold {}",
            config.rhat_threshold
        ));
    }
    let cts = CtsTensor::new(
        genes.to_vec(),
        cell_types.to_vec(),
        samples.to_vec(),
        mean,
        variance,
    )?;
    Ok(PosteriorSummary {
        cts,
        mu_hat: per_gene.iter().map(|p| p.mu_hat.clone()).collect(),
        sigma_hat: per_gene.iter().map(|p| p.sigma_hat.clone()).collect(),
        noise_var_hat: per_gene.iter().map(|p| p.noise_var_hat).collect(),
        adjustment_hat: per_gene.into_iter().map(|p| p.adjustment_hat).collect(),
        rhat,
        max_rhat,
        converged,
        draws_per_chain: kept,
        diagnostics,
    })
}
