//! Single-cell reference data and empirical gene priors derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::data::{check_finite, check_unique, GenePrior};
use crate::error::{Error, Result};
use crate::io::{read_json, read_matrix_tsv, render_matrix_tsv, write_atomic, write_json};
use crate::linalg;
use crate::rng::{self, tag};

/// Number of pseudo-replicate half-samples used for cross-type covariance.
pub const PSEUDO_REPLICATES: usize = 20;

/// Floor for a regularizer or noise variance when the reference carries no
/// variance at all.
const VARIANCE_FLOOR: f64 = 1e-6;

/// Labelled single-cell expression: genes by cells, one cell type per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDataset {
    genes: Vec<String>,
    cells: Vec<String>,
    cell_types: Vec<String>,
    labels: Vec<usize>,
    values: DMatrix<f64>,
}

impl ReferenceDataset {
    /// `labels[m]` indexes into `cell_types`. Every type needs two cells.
    pub fn new(
        genes: Vec<String>,
        cells: Vec<String>,
        cell_types: Vec<String>,
        labels: Vec<usize>,
        values: DMatrix<f64>,
    ) -> Result<Self> {
        if genes.is_empty() || cells.is_empty() {
            return Err(Error::Empty("reference needs genes and cells".into()));
        }
        if values.nrows() != genes.len()
            || values.ncols() != cells.len()
            || labels.len() != cells.len()
        {
            return Err(Error::Dimension(format!(
                "reference values {}x{} with {} genes, {} cells, {} labels",
                values.nrows(),
                values.ncols(),
                genes.len(),
                cells.len(),
                labels.len()
            )));
        }
        check_unique("gene", &genes)?;
        check_unique("cell", &cells)?;
        check_unique("cell type", &cell_types)?;
        check_finite("reference", values.iter())?;
        let mut counts = vec![0usize; cell_types.len()];
        for &l in &labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::Invalid(format!("label index {l} out of range")))? += 1;
        }
        if let Some((c, n)) = counts.iter().enumerate().find(|(_, n)| **n < 2) {
            return Err(Error::Degenerate(format!(
                "cell type {} has {n} cells; at least 2 are required",
                cell_types[c]
            )));
        }
        Ok(ReferenceDataset {
            genes,
            cells,
            cell_types,
            labels,
            values,
        })
    }

    /// Build from per-cell type names; the type axis follows first appearance.
    pub fn from_named_labels(
        genes: Vec<String>,
        cells: Vec<String>,
        names: &[String],
        values: DMatrix<f64>,
    ) -> Result<Self> {
        let mut cell_types: Vec<String> = Vec::new();
        let labels = names
            .iter()
            .map(|n| match cell_types.iter().position(|t| t == n) {
                Some(i) => i,
                None => {
                    cell_types.push(n.clone());
                    cell_types.len() - 1
                }
            })
            .collect();
        ReferenceDataset::new(genes, cells, cell_types, labels, values)
    }

    pub fn genes(&self) -> &[String] {
        &self.genes
    }

    pub fn cells(&self) -> &[String] {
        &self.cells
    }

    pub fn cell_types(&self) -> &[String] {
        &self.cell_types
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_cell_types(&self) -> usize {
        self.cell_types.len()
    }

    pub fn gene_index(&self, gene: &str) -> Option<usize> {
        self.genes.iter().position(|g| g == gene)
    }

    /// Cell column indices of each type.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cell_types.len()];
        for (m, &l) in self.labels.iter().enumerate() {
            out[l].push(m);
        }
        out
    }

    /// Same data with the cell-type axis permuted to `order`.
    pub fn with_type_order(&self, order: &[String]) -> Result<Self> {
        if order.len() != self.cell_types.len() {
            return Err(Error::Dimension(format!(
                "reference has {} cell types, requested order lists {}",
                self.cell_types.len(),
                order.len()
            )));
        }
        let map: Vec<usize> = self
            .cell_types
            .iter()
            .map(|t| {
                order.iter().position(|o| o == t).ok_or_else(|| {
                    Error::Invalid(format!("cell type {t} missing from requested order"))
                })
            })
            .collect::<Result<_>>()?;
        ReferenceDataset::new(
            self.genes.clone(),
            self.cells.clone(),
            order.to_vec(),
            self.labels.iter().map(|&l| map[l]).collect(),
            self.values.clone(),
        )
    }

    /// Restrict to a subset of genes (by index, in the given order).
    pub fn select_genes(&self, idx: &[usize]) -> Result<Self> {
        ReferenceDataset::new(
            idx.iter().map(|&g| self.genes[g].clone()).collect(),
            self.cells.clone(),
            self.cell_types.clone(),
            self.labels.clone(),
            self.values.select_rows(idx),
        )
    }

    /// Load a genes-by-cells matrix TSV and a `{cell_id: cell_type}` label map.
    pub fn load(matrix: &Path, labels: &Path) -> Result<Self> {
        let m = read_matrix_tsv(matrix)?;
        let map: BTreeMap<String, String> = read_json(labels)?;
        let names = m
            .cols
            .iter()
            .map(|cell| {
                map.get(cell)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("cell {cell} has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        ReferenceDataset::from_named_labels(m.rows, m.cols, &names, m.values)
    }

    pub fn save(&self, matrix: &Path, labels: &Path) -> Result<()> {
        write_atomic(
            matrix,
            render_matrix_tsv("gene", &self.genes, &self.cells, &self.values).as_bytes(),
        )?;
        let map: serde_json::Map<String, serde_json::Value> = self
            .cells
            .iter()
            .zip(&self.labels)
            .map(|(c, &l)| {
                (
                    c.clone(),
                    serde_json::Value::from(self.cell_types[l].clone()),
                )
            })
            .collect();
        write_json(labels, &map)
    }
}

/// Per-type mean expression, genes by cell types.
pub fn signature_matrix(reference: &ReferenceDataset) -> DMatrix<f64> {
    let members = reference.members();
    DMatrix::from_fn(reference.genes.len(), reference.n_cell_types(), |g, c| {
        let cells = &members[c];
        cells.iter().map(|&m| reference.values[(g, m)]).sum::<f64>() / cells.len() as f64
    })
}

/// Per-type unbiased variance of each gene, genes by cell types.
pub fn within_type_variance(reference: &ReferenceDataset) -> DMatrix<f64> {
    let members = reference.members();
    let sig = signature_matrix(reference);
    DMatrix::from_fn(reference.genes.len(), reference.n_cell_types(), |g, c| {
        let cells = &members[c];
        let m = sig[(g, c)];
        cells
            .iter()
            .map(|&k| (reference.values[(g, k)] - m).powi(2))
            .sum::<f64>()
            / (cells.len() - 1) as f64
    })
}

/// Empirical per-gene priors from a labelled reference.
///
/// The mean is the per-type average. The covariance is the cross-type
/// covariance of per-type means over random half-sample pseudo-replicates,
/// shrunk toward its diagonal by `shrinkage`, and ridged until positive
/// definite. The noise variance starts at the pooled within-type variance.
pub fn estimate_priors(
    reference: &ReferenceDataset,
    shrinkage: f64,
    seed: u64,
) -> Result<Vec<GenePrior>> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::Invalid(format!(
            "shrinkage must lie in [0, 1], got {shrinkage}"
        )));
    }
    let members = reference.members();
    let c_n = reference.n_cell_types();
    let sig = signature_matrix(reference);
    let within = within_type_variance(reference);
    let mut rng = rng::stream(seed, &[tag::PRIOR]);
    // The same half-samples serve every gene, so cross-gene structure is
    // consistent and the draw count does not depend on G.
    let halves: Vec<Vec<Vec<usize>>> = (0..PSEUDO_REPLICATES)
        .map(|_| {
            members
                .iter()
                .map(|cells| {
                    let k = cells.len() / 2;
                    let mut pick: Vec<usize> = index::sample(&mut rng, cells.len(), k)
                        .into_iter()
                        .map(|j| cells[j])
                        .collect();
                    pick.sort_unstable();
                    pick
                })
                .collect()
        })
        .collect();
    let pooled_dof: usize = members.iter().map(|m| m.len() - 1).sum();

    (0..reference.genes.len())
        .map(|g| {
            let reps: Vec<DVector<f64>> = halves
                .iter()
                .map(|rep| {
                    DVector::from_fn(c_n, |c, _| {
                        rep[c]
                            .iter()
                            .map(|&m| reference.values[(g, m)])
                            .sum::<f64>()
                            / rep[c].len() as f64
                    })
                })
                .collect();
            let centre =
                reps.iter().fold(DVector::zeros(c_n), |acc, r| acc + r) / reps.len() as f64;
            let mut s = reps.iter().fold(DMatrix::zeros(c_n, c_n), |acc, r| {
                acc + (r - &centre) * (r - &centre).transpose()
            }) / (reps.len() - 1) as f64;
            s = linalg::symmetrize(&s);
            let diag = DMatrix::from_diagonal(&s.diagonal());
            let shrunk = s.clone() * (1.0 - shrinkage) + diag * shrinkage;
            let trace = s.trace();
            let eps = if trace > 0.0 {
                1e-6 * trace / c_n as f64
            } else {
                VARIANCE_FLOOR
            };
            let (sigma, _) = linalg::regularize_pd(&shrunk, eps);
            let pooled = (0..c_n)
                .map(|c| within[(g, c)] * (members[c].len() - 1) as f64)
                .sum::<f64>()
                / pooled_dof as f64;
            GenePrior::new(
                reference.genes[g].clone(),
                DVector::from_fn(c_n, |c, _| sig[(g, c)]),
                sigma,
                pooled.max(VARIANCE_FLOOR),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn constant_reference() -> ReferenceDataset {
        // gene g0: type A = 5.0, type B = 2.0; gene g1 varies.
        let cells: Vec<String> = (0..6).map(|i| format!("cell{i}")).collect();
        let names: Vec<String> = ["A", "A", "A", "B", "B", "B"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let values = DMatrix::from_row_slice(
            2,
            6,
            &[5.0, 5.0, 5.0, 2.0, 2.0, 2.0, 1.0, 2.0, 3.0, 0.5, 1.5, 1.0],
        );
        ReferenceDataset::from_named_labels(vec!["g0".into(), "g1".into()], cells, &names, values)
            .unwrap()
    }

    #[test]
    fn constant_gene_prior() {
        let r = constant_reference();
        let priors = estimate_priors(&r, 0.5, 1).unwrap();
        let p = &priors[0];
        assert_eq!(p.mu().as_slice(), &[5.0, 2.0]);
        let s = p.sigma();
        assert_eq!(s[(0, 1)], 0.0);
        assert!(s[(0, 0)] > 0.0 && s[(0, 0)] <= 1e-5);
        assert!(p.noise_var() > 0.0);
    }

    #[test]
    fn full_shrinkage_is_diagonal() {
        let r = constant_reference();
        for p in estimate_priors(&r, 1.0, 3).unwrap() {
            assert_eq!(p.sigma()[(0, 1)], 0.0);
            assert_eq!(p.sigma()[(1, 0)], 0.0);
        }
    }

    #[test]
    fn single_cell_type_member_is_degenerate() {
        let values = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let names: Vec<String> = ["A", "A", "B"].iter().map(|s| s.to_string()).collect();
        let cells = vec!["a".into(), "b".into(), "c".into()];
        let r = ReferenceDataset::from_named_labels(vec!["g".into()], cells, &names, values);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn bad_shrinkage_rejected() {
        assert!(estimate_priors(&constant_reference(), 1.5, 0).is_err());
    }

    #[test]
    fn signature_is_order_invariant() {
        let r = constant_reference();
        let sig = signature_matrix(&r);
        assert_eq!(sig[(0, 0)], 5.0);
        assert_eq!(sig[(0, 1)], 2.0);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let names: Vec<String> = perm
            .iter()
            .map(|&m| r.cell_types()[r.labels()[m]].clone())
            .collect();
        let cells: Vec<String> = perm.iter().map(|&m| r.cells()[m].clone()).collect();
        let shuffled = ReferenceDataset::from_named_labels(
            r.genes().to_vec(),
            cells,
            &names,
            r.values().select_columns(&perm),
        )
        .unwrap()
        .with_type_order(r.cell_types())
        .unwrap();
        let sig2 = signature_matrix(&shuffled);
        assert!((sig - sig2).abs().max() < 1e-12);
    }

    #[test]
    fn monte_carlo_means_within_three_standard_errors() {
        let mut rng = rng::stream(2024, &[]);
        let n_per = 200;
        let truth = [3.0, 1.0];
        let mut names = Vec::new();
        let mut vals = Vec::new();
        for (c, &mu) in truth.iter().enumerate() {
            let d = Normal::new(mu, 0.5).unwrap();
            for _ in 0..n_per {
                names.push(if c == 0 {
                    "T1".to_string()
                } else {
                    "T2".to_string()
                });
                vals.push(d.sample(&mut rng));
            }
        }
        let cells: Vec<String> = (0..vals.len()).map(|i| format!("c{i}")).collect();
        let r = ReferenceDataset::from_named_labels(
            vec!["g".into()],
            cells,
            &names,
            DMatrix::from_row_slice(1, vals.len(), &vals),
        )
        .unwrap();
        let p = &estimate_priors(&r, 0.5, 9).unwrap()[0];
        let se = 0.5 / (n_per as f64).sqrt();
        for c in 0..2 {
            assert!(
                (p.mu()[c] - truth[c]).abs() < 3.0 * se,
                "mu[{c}] = {}",
                p.mu()[c]
            );
        }
    }
}
