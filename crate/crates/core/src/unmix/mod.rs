//! Posterior inference of cell-type-specific expression from bulk profiles.

mod conditional;
mod refine;
mod rhat;
mod sampler;

use std::path::Path;

use nalgebra::DVector;

pub use conditional::z_conditional;
pub use refine::{inverse_wishart, refine_priors, MAX_DRAW_ATTEMPTS};
pub use rhat::split_rhat;
pub use sampler::{gibbs_sweep, run_mcmc, ChainState, GeneState, PosteriorSummary, RhatEntry};

use crate::data::{BulkMatrix, CtsTensor, GenePrior, RefinementConfig, SampleMetaTable};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_atomic};
use crate::reference::{estimate_priors, ReferenceDataset};
use crate::rng::{self, tag};
use crate::select::PairSelection;

/// Seed of the reference prior estimate inside [`deconvolve`].
pub fn prior_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[tag::PRIOR])
}

/// Seed of sampling round `round` (0-based) inside [`deconvolve`].
pub fn round_seed(seed: u64, round: usize) -> u64 {
    rng::derive_seed(seed, &[tag::ROUND, round as u64])
}

/// Seed of the refinement that follows round `round`.
pub fn refine_seed(seed: u64, round: usize) -> u64 {
    rng::derive_seed(seed, &[tag::REFINE, round as u64])
}

/// Result of the full multi-round pipeline.
#[derive(Debug, Clone)]
pub struct Deconvolution {
    /// Summaries of every round, over the selected genes only.
    pub rounds: Vec<PosteriorSummary>,
    /// Final estimate over every bulk gene that has reference data. Pairs
    /// that were not inferred carry the reference prior mean and variance.
    pub tensor: CtsTensor,
    /// `inferred[g * C + c]` is true when pair (g, c) of `tensor` comes from
    /// the posterior.
    pub inferred: Vec<bool>,
    /// Bulk genes absent from the reference, left out of `tensor`.
    pub genes_without_reference: Vec<String>,
}

impl Deconvolution {
    pub fn final_round(&self) -> &PosteriorSummary {
        self.rounds.last().expect("at least one round")
    }

    pub fn converged(&self) -> bool {
        self.final_round().converged
    }
}

/// Reference priors, then `config.rounds` sampling runs over the selected
/// genes with the priors refined between runs. Each run starts fresh
/// chains.
pub fn deconvolve(
    bulk: &BulkMatrix,
    reference: &ReferenceDataset,
    selection: &PairSelection,
    metas: &SampleMetaTable,
    config: &RefinementConfig,
    seed: u64,
) -> Result<Deconvolution> {
    let cell_types = metas.cell_types();
    let c_n = cell_types.len();
    config.validate(c_n)?;
    for (gene, ct) in selection.pairs() {
        if bulk.gene_index(gene).is_none() {
            return Err(Error::Invalid(format!(
                "selected gene {gene} is not in the bulk matrix"
            )));
        }
        if !cell_types.contains(ct) {
            return Err(Error::Invalid(format!(
                "selected cell type {ct} is not in the sample metadata"
            )));
        }
    }
    let reference = reference.with_type_order(cell_types)?;

    let mut kept_genes = Vec::new();
    let mut ref_rows = Vec::new();
    let mut genes_without_reference = Vec::new();
    for gene in bulk.genes() {
        match reference.gene_index(gene) {
            Some(r) => {
                kept_genes.push(gene.clone());
                ref_rows.push(r);
            }
            None => genes_without_reference.push(gene.clone()),
        }
    }
    for gene in selection.genes() {
        if reference.gene_index(&gene).is_none() {
            return Err(Error::Invalid(format!(
                "selected gene {gene} has no reference profile"
            )));
        }
    }
    if kept_genes.is_empty() {
        return Err(Error::Empty("no bulk gene has a reference profile".into()));
    }
    let reference = reference.select_genes(&ref_rows)?;
    let all_priors = estimate_priors(&reference, config.shrinkage, prior_seed(seed))?;

    let run_idx: Vec<usize> = kept_genes
        .iter()
        .enumerate()
        .filter(|(_, g)| cell_types.iter().any(|c| selection.contains(g, c)))
        .map(|(k, _)| k)
        .collect();
    if run_idx.is_empty() {
        return Err(Error::Empty(
            "the selection contains no gene to deconvolve".into(),
        ));
    }
    let run_genes: Vec<String> = run_idx.iter().map(|&k| kept_genes[k].clone()).collect();
    let run_bulk = restrict_bulk(bulk, &run_genes)?;
    let mut priors: Vec<GenePrior> = run_idx.iter().map(|&k| all_priors[k].clone()).collect();

    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        if round > 0 {
            let last = rounds.last().expect("previous round");
            priors = refine_priors(last, &priors, config, refine_seed(seed, round - 1))?;
        }
        let summary = run_mcmc(&run_bulk, &priors, metas, config, round_seed(seed, round))?;
        log::info!(
            "round {} of {}: max R-hat {:.4}, converged {}",
            round + 1,
            config.rounds,
            summary.max_rhat,
            summary.converged
        );
        rounds.push(summary);
    }

    let last = rounds.last().expect("at least one round");
    let n = bulk.n_samples();
    let mut run_pos = vec![None; kept_genes.len()];
    for (r, &k) in run_idx.iter().enumerate() {
        run_pos[k] = Some(r);
    }
    let inferred: Vec<bool> = (0..kept_genes.len() * c_n)
        .map(|k| {
            run_pos[k / c_n].is_some()
                && selection.contains(&kept_genes[k / c_n], &cell_types[k % c_n])
        })
        .collect();
    let pick = |g: usize, c: usize, i: usize, posterior: bool| -> f64 {
        let r = run_pos[g].unwrap_or(0);
        match (inferred[g * c_n + c], posterior) {
            (true, true) => last.cts.mean_at(r, c, i),
            (true, false) => last.cts.variance_at(r, c, i),
            (false, true) => all_priors[g].mu()[c],
            (false, false) => all_priors[g].sigma()[(c, c)],
        }
    };
    let tensor = CtsTensor::from_fn(
        kept_genes,
        cell_types.to_vec(),
        bulk.samples().to_vec(),
        |g, c, i| pick(g, c, i, true),
        |g, c, i| pick(g, c, i, false),
    )?;
    debug_assert_eq!(tensor.shape().2, n);
    Ok(Deconvolution {
        rounds,
        tensor,
        inferred,
        genes_without_reference,
    })
}

fn restrict_bulk(bulk: &BulkMatrix, genes: &[String]) -> Result<BulkMatrix> {
    let rows: Vec<usize> = genes
        .iter()
        .map(|g| bulk.gene_index(g).expect("gene taken from the bulk matrix"))
        .collect();
    let values = bulk.values().select_rows(rows.iter());
    BulkMatrix::new(genes.to_vec(), bulk.samples().to_vec(), values)
}

/// Diagnostic table `gene, cell_type, rhat`.
pub fn save_rhat_tsv(summary: &PosteriorSummary, path: &Path) -> Result<()> {
    let mut out = String::from("gene\tcell_type\trhat\n");
    for e in &summary.rhat {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            e.gene,
            e.cell_type,
            fmt_f64(e.rhat)
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Table `gene, cell_type, inferred` marking which tensor entries are
/// posterior estimates.
pub fn save_inferred_tsv(result: &Deconvolution, path: &Path) -> Result<()> {
    let t = &result.tensor;
    let c_n = t.cell_types().len();
    let mut out = String::from("gene\tcell_type\tinferred\n");
    for (k, flag) in result.inferred.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            t.genes()[k / c_n],
            t.cell_types()[k % c_n],
            flag
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Posterior means of one sample's cell-type vector for gene `g`.
pub fn sample_vector(tensor: &CtsTensor, g: usize, i: usize) -> DVector<f64> {
    let (_, c_n, _) = tensor.shape();
    DVector::from_fn(c_n, |c, _| tensor.mean_at(g, c, i))
}
