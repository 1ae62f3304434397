//! Synthetic ground truth for the mixture model, simple baseline
//! deconvolvers, and correlation-based recovery scoring.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{AdjustmentParams, BulkMatrix, CtsTensor, SampleMeta, SampleMetaTable};
use crate::error::{Error, Result};
use crate::io::{
    fmt_f64, load_bulk_matrix, load_cts_tensor, load_sample_metas, read_json, read_matrix_tsv,
    render_matrix_tsv, save_bulk_matrix, save_cts_tensor, save_sample_metas, write_atomic,
    write_json,
};
use crate::reference::{signature_matrix, within_type_variance, ReferenceDataset};
use crate::rng::{self, tag};
use crate::stats::{self, Quartiles};

/// Dimensions and magnitudes of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub genes: usize,
    pub cell_types: usize,
    pub samples: usize,
    pub bulk_dim: usize,
    pub cts_dim: usize,
    /// Dirichlet concentration of the proportions, one entry per type.
    /// A single entry is broadcast to every type.
    pub dirichlet_alpha: Vec<f64>,
    pub noise_sd: f64,
    pub covariate_effect_scale: f64,
    pub reference_cells_per_type: usize,
    pub mean_centre: f64,
    pub mean_sd: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            genes: 50,
            cell_types: 3,
            samples: 60,
            bulk_dim: 2,
            cts_dim: 1,
            dirichlet_alpha: vec![1.0],
            noise_sd: 0.5,
            covariate_effect_scale: 0.5,
            reference_cells_per_type: 50,
            mean_centre: 5.0,
            mean_sd: 2.0,
            seed: 1,
        }
    }
}

impl Scenario {
    pub fn alpha(&self) -> Vec<f64> {
        if self.dirichlet_alpha.len() == 1 {
            vec![self.dirichlet_alpha[0]; self.cell_types]
        } else {
            self.dirichlet_alpha.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.genes == 0 || self.cell_types == 0 || self.samples == 0 {
            return bad("genes, cell types and samples must be positive".into());
        }
        if self.reference_cells_per_type < 2 {
            return bad("the reference needs at least 2 cells per type".into());
        }
        let alpha = self.alpha();
        if alpha.len() != self.cell_types || alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return bad(format!(
                "dirichlet_alpha needs 1 or {} positive entries, got {:?}",
                self.cell_types, self.dirichlet_alpha
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!(
                "noise_sd must be non-negative, got {}",
                self.noise_sd
            ));
        }
        if !(self.covariate_effect_scale >= 0.0 && self.covariate_effect_scale.is_finite()) {
            return bad(format!(
                "covariate_effect_scale must be non-negative, got {}",
                self.covariate_effect_scale
            ));
        }
        if !(self.mean_sd >= 0.0 && self.mean_sd.is_finite() && self.mean_centre.is_finite()) {
            return bad("mean_centre must be finite and mean_sd non-negative".into());
        }
        Ok(())
    }
}

/// Everything [`generate`] draws, including the latent quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBundle {
    pub bulk: BulkMatrix,
    /// True cell-type expression; variances are zero.
    pub true_z: CtsTensor,
    pub metas: SampleMetaTable,
    pub reference: ReferenceDataset,
    pub true_params: Vec<AdjustmentParams>,
    pub true_means: Vec<DVector<f64>>,
    pub true_covs: Vec<DMatrix<f64>>,
    /// Measurement noise, genes by samples.
    pub noise: DMatrix<f64>,
}

/// Per-gene generating parameters as stored in `truth_params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneTruth {
    pub gene: String,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub adjustment: AdjustmentParams,
}

impl GroundTruthBundle {
    /// Writes `bulk.tsv`, `metas.json`, `truth.mean.tsv`,
    /// `truth.variance.tsv`, `reference.tsv`, `reference_labels.json`,
    /// `truth_params.json` and `noise.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_bulk_matrix(&self.bulk, &dir.join("bulk.tsv"))?;
        save_sample_metas(&self.metas, &dir.join("metas.json"))?;
        save_cts_tensor(&self.true_z, &dir.join("truth"))?;
        self.reference.save(
            &dir.join("reference.tsv"),
            &dir.join("reference_labels.json"),
        )?;
        let params: Vec<GeneTruth> = self
            .bulk
            .genes()
            .iter()
            .enumerate()
            .map(|(g, gene)| GeneTruth {
                gene: gene.clone(),
                mu: self.true_means[g].clone(),
                sigma: self.true_covs[g].clone(),
                adjustment: self.true_params[g].clone(),
            })
            .collect();
        write_json(&dir.join("truth_params.json"), &params)?;
        let noise = render_matrix_tsv("gene", self.bulk.genes(), self.bulk.samples(), &self.noise);
        write_atomic(&dir.join("noise.tsv"), noise.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bulk = load_bulk_matrix(&dir.join("bulk.tsv"))?;
        let params: Vec<GeneTruth> = read_json(&dir.join("truth_params.json"))?;
        if params
            .iter()
            .map(|p| p.gene.as_str())
            .ne(bulk.genes().iter().map(String::as_str))
        {
            return Err(Error::Invalid(
                "truth_params.json genes differ from bulk.tsv".into(),
            ));
        }
        let noise = read_matrix_tsv(&dir.join("noise.tsv"))?;
        if noise.rows != bulk.genes() || noise.cols != bulk.samples() {
            return Err(Error::Invalid("noise.tsv axes differ from bulk.tsv".into()));
        }
        let mut true_params = Vec::with_capacity(params.len());
        let mut true_means = Vec::with_capacity(params.len());
        let mut true_covs = Vec::with_capacity(params.len());
        for p in params {
            true_params.push(p.adjustment);
            true_means.push(p.mu);
            true_covs.push(p.sigma);
        }
        Ok(GroundTruthBundle {
            metas: load_sample_metas(&dir.join("metas.json"))?,
            true_z: load_cts_tensor(&dir.join("truth"))?,
            reference: ReferenceDataset::load(
                &dir.join("reference.tsv"),
                &dir.join("reference_labels.json"),
            )?,
            bulk,
            true_params,
            true_means,
            true_covs,
            noise: noise.values,
        })
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(2);
    (0..n).map(|k| format!("{prefix}{k:0width$}")).collect()
}

/// SPD matrix `Q diag(l) Q^T` with a random orthogonal `Q` and
/// eigenvalues uniform on [0.5, 1.5].
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = a.qr().q();
    let eig = Uniform::new(0.5, 1.5).expect("valid range");
    let l = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| eig.sample(rng)));
    let m = &q * l * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Dirichlet draw by normalizing independent Gamma(alpha_c, 1) variables.
pub fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Result<DVector<f64>> {
    let gammas = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::Invalid(format!("dirichlet alpha: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    // Small concentrations can underflow every component to zero; redraw.
    for _ in 0..1000 {
        let v = DVector::from_iterator(alpha.len(), gammas.iter().map(|g| g.sample(rng)));
        let total = v.sum();
        if total > 0.0 && total.is_finite() {
            return Ok(v / total);
        }
    }
    Err(Error::RetryExhausted {
        attempts: 1000,
        what: "dirichlet draw with a positive total".into(),
    })
}

/// Draw a cohort from the full generative model.
pub fn generate(scenario: &Scenario) -> Result<GroundTruthBundle> {
    scenario.validate()?;
    let (g_n, c_n, n) = (scenario.genes, scenario.cell_types, scenario.samples);
    let (d1, d2) = (scenario.bulk_dim, scenario.cts_dim);
    let genes = names("gene", g_n);
    let cell_types = names("type", c_n);
    let samples = names("sample", n);
    let mean_dist = Normal::new(scenario.mean_centre, scenario.mean_sd)
        .map_err(|e| Error::Invalid(e.to_string()))?;

    let mut meta_rng = rng::stream(scenario.seed, &[tag::SIMULATE, 0]);
    let alpha = scenario.alpha();
    let metas = samples
        .iter()
        .map(|s| {
            let w = dirichlet(&mut meta_rng, &alpha)?;
            let c1 = DVector::from_fn(d1, |_, _| meta_rng.sample::<f64, _>(StandardNormal));
            let c2 = DVector::from_fn(d2, |_, _| meta_rng.sample::<f64, _>(StandardNormal));
            SampleMeta::new(s.clone(), w, c1, c2)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut z = vec![0.0; g_n * c_n * n];
    let mut bulk = DMatrix::zeros(g_n, n);
    let mut noise = DMatrix::zeros(g_n, n);
    let mut true_params = Vec::with_capacity(g_n);
    let mut true_means = Vec::with_capacity(g_n);
    let mut true_covs = Vec::with_capacity(g_n);
    let cells_per = scenario.reference_cells_per_type;
    let mut ref_values = DMatrix::zeros(g_n, c_n * cells_per);
    for g in 0..g_n {
        let mut r = rng::stream(scenario.seed, &[tag::SIMULATE, 1, g as u64]);
        let mu = DVector::from_fn(c_n, |_, _| mean_dist.sample(&mut r));
        let sigma = random_spd(&mut r, c_n);
        let l = sigma
            .clone()
            .cholesky()
            .expect("eigenvalues are at least 0.5")
            .l();
        let scale = scenario.covariate_effect_scale;
        let adj = AdjustmentParams {
            gamma: DVector::from_fn(d1, |_, _| scale * r.sample::<f64, _>(StandardNormal)),
            b: DMatrix::from_fn(c_n, d2, |_, _| scale * r.sample::<f64, _>(StandardNormal)),
        };
        for (i, meta) in metas.iter().enumerate() {
            let zi = &mu + &l * DVector::from_fn(c_n, |_, _| r.sample::<f64, _>(StandardNormal));
            let e = scenario.noise_sd * r.sample::<f64, _>(StandardNormal);
            for c in 0..c_n {
                z[(g * c_n + c) * n + i] = zi[c];
            }
            noise[(g, i)] = e;
            bulk[(g, i)] = meta.proportions().dot(&zi) + adj.offset(meta) + e;
        }
        for c in 0..c_n {
            let sd = sigma[(c, c)].sqrt();
            for k in 0..cells_per {
                ref_values[(g, c * cells_per + k)] =
                    mu[c] + sd * r.sample::<f64, _>(StandardNormal);
            }
        }
        true_params.push(adj);
        true_means.push(mu);
        true_covs.push(sigma);
    }

    let cells = names("cell", c_n * cells_per);
    let labels = (0..c_n * cells_per).map(|k| k / cells_per).collect();
    let reference =
        ReferenceDataset::new(genes.clone(), cells, cell_types.clone(), labels, ref_values)?;
    let true_z = CtsTensor::new(
        genes.clone(),
        cell_types.clone(),
        samples.clone(),
        z,
        vec![0.0; g_n * c_n * n],
    )?;
    Ok(GroundTruthBundle {
        bulk: BulkMatrix::new(genes, samples, bulk)?,
        true_z,
        metas: SampleMetaTable::new(cell_types, metas)?,
        reference,
        true_params,
        true_means,
        true_covs,
        noise,
    })
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientLength(format!(
            "correlation needs at least 2 points, got {}",
            a.len()
        )));
    }
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation summary of one cell type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTypeRecovery {
    pub cell_type: String,
    /// Correlation across samples, one value per gene.
    pub per_gene: Option<Quartiles>,
    /// Correlation across genes, one value per sample.
    pub per_sample: Option<Quartiles>,
    pub genes_excluded: usize,
    pub samples_excluded: usize,
}

/// Per-gene and per-sample recovery of a tensor against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub cell_types: Vec<CellTypeRecovery>,
    /// Median of every defined per-gene correlation, pooled over cell types.
    pub median_per_gene: Option<f64>,
    pub median_per_sample: Option<f64>,
    pub genes_excluded: usize,
    pub samples_excluded: usize,
    /// `(gene, cell_type, pcc)`; `None` where a side has zero variance.
    pub per_gene_pcc: Vec<(String, String, Option<f64>)>,
}

impl RecoveryReport {
    pub fn save_per_gene_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("gene\tcell_type\tpcc\n");
        for (g, c, p) in &self.per_gene_pcc {
            let v = p.map_or_else(|| "NA".to_string(), fmt_f64);
            out.push_str(&format!("{g}\t{c}\t{v}\n"));
        }
        write_atomic(path, out.as_bytes())
    }
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn summary(xs: &[f64]) -> Option<Quartiles> {
    (!xs.is_empty()).then(|| Quartiles::of(xs))
}

/// Score posterior means against the truth. Zero-variance genes or samples
/// are excluded and counted rather than dropped silently.
pub fn evaluate_recovery(estimate: &CtsTensor, truth: &CtsTensor) -> Result<RecoveryReport> {
    if estimate.genes() != truth.genes()
        || estimate.cell_types() != truth.cell_types()
        || estimate.samples() != truth.samples()
    {
        return Err(Error::Dimension(
            "estimate and truth have different axes".into(),
        ));
    }
    let (g_n, c_n, n) = estimate.shape();
    let mut per_type = Vec::with_capacity(c_n);
    let mut all_gene = Vec::new();
    let mut all_sample = Vec::new();
    let mut per_gene_pcc = Vec::with_capacity(g_n * c_n);
    let (mut ge_total, mut se_total) = (0, 0);
    for c in 0..c_n {
        let mut gene_pccs = Vec::new();
        let mut ge = 0;
        for g in 0..g_n {
            let p = if n >= 2 {
                defined(pearson(
                    estimate.mean_over_samples(g, c),
                    truth.mean_over_samples(g, c),
                ))?
            } else {
                None
            };
            match p {
                Some(v) => gene_pccs.push(v),
                None => ge += 1,
            }
            per_gene_pcc.push((
                estimate.genes()[g].clone(),
                estimate.cell_types()[c].clone(),
                p,
            ));
        }
        let mut sample_pccs = Vec::new();
        let mut se = 0;
        for i in 0..n {
            let a: Vec<f64> = (0..g_n).map(|g| estimate.mean_at(g, c, i)).collect();
            let b: Vec<f64> = (0..g_n).map(|g| truth.mean_at(g, c, i)).collect();
            match if g_n >= 2 {
                defined(pearson(&a, &b))?
            } else {
                None
            } {
                Some(v) => sample_pccs.push(v),
                None => se += 1,
            }
        }
        ge_total += ge;
        se_total += se;
        all_gene.extend_from_slice(&gene_pccs);
        all_sample.extend_from_slice(&sample_pccs);
        per_type.push(CellTypeRecovery {
            cell_type: estimate.cell_types()[c].clone(),
            per_gene: summary(&gene_pccs),
            per_sample: summary(&sample_pccs),
            genes_excluded: ge,
            samples_excluded: se,
        });
    }
    Ok(RecoveryReport {
        cell_types: per_type,
        median_per_gene: (!all_gene.is_empty()).then(|| stats::median(&all_gene)),
        median_per_sample: (!all_sample.is_empty()).then(|| stats::median(&all_sample)),
        genes_excluded: ge_total,
        samples_excluded: se_total,
        per_gene_pcc,
    })
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .svd(true, true)
        .solve(b, 1e-12)
        .map_err(|e| Error::Invalid(format!("least squares: {e}")))
}

fn check_rank(s: &DMatrix<f64>) -> Result<()> {
    let sv = s.clone().svd(false, false).singular_values;
    let max = sv.max();
    let tol = s.nrows().max(s.ncols()) as f64 * f64::EPSILON * max;
    if max == 0.0 || sv.iter().any(|v| *v <= tol) {
        return Err(Error::RankDeficient(format!(
            "signature columns are linearly dependent (singular values {:?})",
            sv.as_slice()
        )));
    }
    Ok(())
}

/// Non-negative least squares `min |x - S p|^2, p >= 0` by the
/// Lawson-Hanson active-set method, then scaled onto the simplex.
pub fn nnls_proportions(x: &DVector<f64>, signature: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (g_n, c_n) = signature.shape();
    if x.len() != g_n {
        return Err(Error::Dimension(format!(
            "bulk column has {} genes, signature {g_n}",
            x.len()
        )));
    }
    if g_n < c_n {
        return Err(Error::RankDeficient(format!(
            "{g_n} genes cannot resolve {c_n} cell types"
        )));
    }
    check_rank(signature)?;
    let p = nnls(x, signature)?;
    let total = p.sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "non-negative fit is identically zero".into(),
        ));
    }
    Ok(p / total)
}

/// Lawson-Hanson active-set solver.
pub fn nnls(b: &DVector<f64>, a: &DMatrix<f64>) -> Result<DVector<f64>> {
    let c_n = a.ncols();
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    let mut x = DVector::zeros(c_n);
    let mut passive = vec![false; c_n];
    let max_outer = 3 * c_n + 10;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let next = (0..c_n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = next else {
            return Ok(x);
        };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..c_n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(idx.iter());
            let s_p = least_squares(&sub, b)?;
            let mut s = DVector::zeros(c_n);
            for (k, &col) in idx.iter().enumerate() {
                s[col] = s_p[k];
            }
            if idx.iter().all(|&k| s[k] > 0.0) {
                x = s;
                break;
            }
            let alpha = idx
                .iter()
                .filter(|&&k| s[k] <= 0.0)
                .map(|&k| x[k] / (x[k] - s[k]))
                .fold(f64::INFINITY, f64::min);
            x += (s - &x) * alpha;
            for &k in &idx {
                if x[k] <= tol {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
    Ok(x)
}

/// Every sample gets the reference per-type mean, with the reference
/// within-type variance.
pub fn baseline_reference_mean(
    reference: &ReferenceDataset,
    bulk: &BulkMatrix,
) -> Result<CtsTensor> {
    let rows = bulk
        .genes()
        .iter()
        .map(|g| {
            reference
                .gene_index(g)
                .ok_or_else(|| Error::Invalid(format!("bulk gene {g} is not in the reference")))
        })
        .collect::<Result<Vec<_>>>()?;
    let sig = signature_matrix(reference);
    let var = within_type_variance(reference);
    CtsTensor::from_fn(
        bulk.genes().to_vec(),
        reference.cell_types().to_vec(),
        bulk.samples().to_vec(),
        |g, c, _| sig[(rows[g], c)],
        |g, c, _| var[(rows[g], c)],
    )
}

/// Per-gene least squares ignoring covariates.
///
/// Each gene's bulk values are regressed on the proportions, giving one
/// coefficient per cell type. A sample's estimate is the minimum-norm
/// correction of those coefficients that reproduces its own bulk value:
/// `z_i = beta + w_i (x_i - w_i^T beta) / |w_i|^2`. Variances are zero.
pub fn baseline_ols(bulk: &BulkMatrix, metas: &SampleMetaTable) -> Result<CtsTensor> {
    let aligned = metas.aligned_to(bulk.samples())?;
    let c_n = metas.n_cell_types();
    let n = bulk.n_samples();
    let w = DMatrix::from_fn(n, c_n, |i, c| aligned[i].proportions()[c]);
    let pinv = w
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Invalid(format!("proportion matrix: {e}")))?;
    let mut z = vec![0.0; bulk.n_genes() * c_n * n];
    for g in 0..bulk.n_genes() {
        let x = DVector::from_vec(bulk.gene_row(g));
        let beta = &pinv * &x;
        for (i, m) in aligned.iter().enumerate() {
            let wi = m.proportions();
            let step = (x[i] - wi.dot(&beta)) / wi.norm_squared();
            for c in 0..c_n {
                z[(g * c_n + c) * n + i] = beta[c] + wi[c] * step;
            }
        }
    }
    CtsTensor::new(
        bulk.genes().to_vec(),
        metas.cell_types().to_vec(),
        bulk.samples().to_vec(),
        z,
        vec![0.0; bulk.n_genes() * c_n * n],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use nalgebra::dvector;

    #[test]
    fn pearson_hand_values() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Centred: (-4,-1,5)/3 and (-8,-5,13)/3, so r = 102 / sqrt(42 * 258).
        let expected = 102.0 / (42.0f64 * 258.0).sqrt();
        assert!((pearson(&[1.0, 2.0, 4.0], &[2.0, 3.0, 9.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.97986).abs() < 1e-5);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn nnls_noiseless() {
        let s = dmatrix![1.0, 5.0; 2.0, 1.0; 4.0, 0.5; 3.0, 3.0];
        let x = &s * dvector![0.3, 0.7];
        let p = nnls_proportions(&x, &s).unwrap();
        assert!((p - dvector![0.3, 0.7]).abs().max() < 1e-8);
    }

    #[test]
    fn nnls_clamps_negative_component() {
        // The unconstrained solution is (2, -1); the constrained one sits on
        // the boundary.
        let s = dmatrix![1.0, 0.0; 0.0, 1.0; 1.0, 1.0];
        let x = dvector![2.0, -1.0, 1.0];
        let raw = nnls(&x, &s).unwrap();
        assert!(raw.iter().all(|v| *v >= 0.0));
        assert_eq!(raw[1], 0.0);
        assert!((raw[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn nnls_rejects_dependent_columns() {
        let s = dmatrix![1.0, 2.0; 2.0, 4.0; 3.0, 6.0];
        assert!(matches!(
            nnls_proportions(&dvector![1.0, 2.0, 3.0], &s),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn ols_recovers_exact_constant_profiles() {
        let metas = SampleMetaTable::new(
            vec!["a".into(), "b".into()],
            [dvector![0.2, 0.8], dvector![0.6, 0.4], dvector![0.9, 0.1]]
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    SampleMeta::new(format!("s{i}"), w.clone(), dvector![], dvector![]).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let beta = dvector![2.0, 7.0];
        let x: Vec<f64> = metas
            .metas()
            .iter()
            .map(|m| m.proportions().dot(&beta))
            .collect();
        let bulk = BulkMatrix::new(
            vec!["g".into()],
            vec!["s0".into(), "s1".into(), "s2".into()],
            DMatrix::from_row_slice(1, 3, &x),
        )
        .unwrap();
        let t = baseline_ols(&bulk, &metas).unwrap();
        for i in 0..3 {
            assert!((t.mean_at(0, 0, i) - 2.0).abs() < 1e-10);
            assert!((t.mean_at(0, 1, i) - 7.0).abs() < 1e-10);
        }
    }
}
