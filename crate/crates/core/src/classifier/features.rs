use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{check_finite, check_unique, CtsTensor};
use crate::error::{Error, Result};
use crate::io::{
    fmt_f64, parse_f64, read_json, read_matrix_tsv, read_text, tsv_lines, write_atomic,
};
use crate::select::PairSelection;

/// Binary diagnosis; `Ad` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    #[serde(rename = "nonAD")]
    NonAd,
    #[serde(rename = "AD")]
    Ad,
}

impl Diagnosis {
    /// AD when `p >= 0.5`.
    pub fn from_probability(p: f64) -> Self {
        if p >= 0.5 {
            Diagnosis::Ad
        } else {
            Diagnosis::NonAd
        }
    }

    pub fn target(self) -> f64 {
        match self {
            Diagnosis::Ad => 1.0,
            Diagnosis::NonAd => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::Ad => "AD",
            Diagnosis::NonAd => "nonAD",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "ad" | "1" => Some(Diagnosis::Ad),
            "nonad" | "non-ad" | "0" => Some(Diagnosis::NonAd),
            _ => None,
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a feature column measures, read off its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Cts,
    EqtlBeta,
    EqtlSe,
    EqtlPval,
    Covariate,
}

impl FeatureKind {
    pub fn of(name: &str) -> Self {
        if name.starts_with("cts:") {
            FeatureKind::Cts
        } else if name.starts_with("beta:") {
            FeatureKind::EqtlBeta
        } else if name.starts_with("se:") {
            FeatureKind::EqtlSe
        } else if name.starts_with("pval:") {
            FeatureKind::EqtlPval
        } else {
            FeatureKind::Covariate
        }
    }
}

pub fn cts_feature(gene: &str, cell_type: &str) -> String {
    format!("cts:{gene}:{cell_type}")
}

pub fn beta_feature(gene: &str) -> String {
    format!("beta:{gene}")
}

pub fn se_feature(gene: &str) -> String {
    format!("se:{gene}")
}

pub fn pval_feature(gene: &str) -> String {
    format!("pval:{gene}")
}

/// One sample's features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub sample: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.names.iter().map(|n| FeatureKind::of(n)).collect()
    }
}

/// Samples by features, optionally labelled.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    names: Vec<String>,
    samples: Vec<String>,
    values: DMatrix<f64>,
    labels: Option<Vec<Diagnosis>>,
}

impl FeatureDataset {
    pub fn new(
        names: Vec<String>,
        samples: Vec<String>,
        values: DMatrix<f64>,
        labels: Option<Vec<Diagnosis>>,
    ) -> Result<Self> {
        if values.nrows() != samples.len() || values.ncols() != names.len() {
            return Err(Error::Dimension(format!(
                "feature values are {}x{} for {} samples and {} features",
                values.nrows(),
                values.ncols(),
                samples.len(),
                names.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
        }
        if names
            .iter()
            .any(|n| n.is_empty() || n == "label" || n == "sample" || n.contains(['\t', '\n']))
        {
            return Err(Error::Invalid(
                "feature names must be non-empty, tab-free and not `sample`/`label`".into(),
            ));
        }
        check_unique("feature", &names)?;
        check_unique("sample", &samples)?;
        check_finite("features", values.iter())?;
        Ok(FeatureDataset {
            names,
            samples,
            values,
            labels,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[Diagnosis]> {
        self.labels.as_deref()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.names.iter().map(|n| FeatureKind::of(n)).collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn vector(&self, i: usize) -> FeatureVector {
        FeatureVector {
            sample: self.samples[i].clone(),
            names: self.names.clone(),
            values: self.row(i),
        }
    }

    pub fn sample_index(&self, sample: &str) -> Option<usize> {
        self.samples.iter().position(|s| s == sample)
    }

    pub fn with_labels(self, labels: Vec<Diagnosis>) -> Result<Self> {
        FeatureDataset::new(self.names, self.samples, self.values, Some(labels))
    }

    /// Attach labels from a `{sample: "AD" | "nonAD"}` map covering every
    /// sample.
    pub fn with_label_map(self, map: &HashMap<String, Diagnosis>) -> Result<Self> {
        let labels = self
            .samples
            .iter()
            .map(|s| {
                map.get(s)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("no label for sample {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.with_labels(labels)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        FeatureDataset::new(
            self.names.clone(),
            idx.iter().map(|&i| self.samples[i].clone()).collect(),
            self.values.select_rows(idx.iter()),
            self.labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        )
    }

    /// Header `sample`, feature names, then `label` when labelled.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sample");
        for n in &self.names {
            out.push('\t');
            out.push_str(n);
        }
        if self.labels.is_some() {
            out.push_str("\tlabel");
        }
        out.push('\n');
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(s);
            for j in 0..self.names.len() {
                out.push('\t');
                out.push_str(&fmt_f64(self.values[(i, j)]));
            }
            if let Some(l) = &self.labels {
                out.push('\t');
                out.push_str(l[i].as_str());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut lines = tsv_lines(&text);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        if header.first() != Some(&"sample") {
            return Err(parse_err(1, "first column must be `sample`".into()));
        }
        let labelled = header.last() == Some(&"label");
        let end = if labelled {
            header.len() - 1
        } else {
            header.len()
        };
        let names: Vec<String> = header[1..end].iter().map(|s| s.to_string()).collect();
        let mut samples = Vec::new();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (ln, fields) in lines {
            if fields.len() != header.len() {
                return Err(parse_err(
                    ln,
                    format!("expected {} fields, found {}", header.len(), fields.len()),
                ));
            }
            samples.push(fields[0].to_string());
            for f in &fields[1..end] {
                data.push(parse_f64(path, ln, f)?);
            }
            if labelled {
                let l = Diagnosis::parse(fields[end]).ok_or_else(|| {
                    parse_err(ln, format!("label `{}` is not AD or nonAD", fields[end]))
                })?;
                labels.push(l);
            }
        }
        let values = DMatrix::from_row_slice(samples.len(), names.len(), &data);
        FeatureDataset::new(names, samples, values, labelled.then_some(labels))
    }
}

pub fn load_label_map(path: &Path) -> Result<HashMap<String, Diagnosis>> {
    read_json(path)
}

/// Effect size, standard error and p-value of one gene's eQTL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqtlRecord {
    pub beta: f64,
    pub se: f64,
    pub pval: f64,
}

impl EqtlRecord {
    pub fn new(beta: f64, se: f64, pval: f64) -> Result<Self> {
        if !beta.is_finite() || !(se > 0.0 && se.is_finite()) || !(0.0..=1.0).contains(&pval) {
            return Err(Error::Invalid(format!(
                "eQTL record needs finite beta, positive se and pval in [0, 1]; got {beta}, {se}, {pval}"
            )));
        }
        Ok(EqtlRecord { beta, se, pval })
    }
}

/// eQTL summaries, either one per gene shared by all samples or one per
/// (sample, gene). A per-sample record takes precedence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EqtlTable {
    pub shared: BTreeMap<String, EqtlRecord>,
    pub per_sample: BTreeMap<(String, String), EqtlRecord>,
}

impl EqtlTable {
    pub fn get(&self, sample: &str, gene: &str) -> Option<EqtlRecord> {
        self.per_sample
            .get(&(sample.to_string(), gene.to_string()))
            .or_else(|| self.shared.get(gene))
            .copied()
    }

    /// Columns `gene, beta, se, pval`, optionally preceded by `sample`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut lines = tsv_lines(&text);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?;
        let per_sample = match header.as_slice() {
            ["gene", "beta", "se", "pval"] => false,
            ["sample", "gene", "beta", "se", "pval"] => true,
            _ => {
                return Err(parse_err(
                    1,
                    "header must be `[sample\\t]gene\\tbeta\\tse\\tpval`".into(),
                ))
            }
        };
        let mut table = EqtlTable::default();
        for (ln, f) in lines {
            if f.len() != header.len() {
                return Err(parse_err(
                    ln,
                    format!("expected {} fields, found {}", header.len(), f.len()),
                ));
            }
            let o = usize::from(per_sample);
            let rec = EqtlRecord::new(
                parse_f64(path, ln, f[o + 1])?,
                parse_f64(path, ln, f[o + 2])?,
                parse_f64(path, ln, f[o + 3])?,
            )
            .map_err(|e| parse_err(ln, e.to_string()))?;
            let dup = if per_sample {
                table
                    .per_sample
                    .insert((f[0].to_string(), f[1].to_string()), rec)
                    .is_some()
            } else {
                table.shared.insert(f[0].to_string(), rec).is_some()
            };
            if dup {
                return Err(parse_err(ln, "duplicate eQTL record".into()));
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.shared.is_empty() && !self.per_sample.is_empty() {
            return Err(Error::Invalid(
                "a table file holds either shared or per-sample records".into(),
            ));
        }
        let mut out = String::new();
        if self.per_sample.is_empty() {
            out.push_str("gene\tbeta\tse\tpval\n");
            for (g, r) in &self.shared {
                out.push_str(&format!(
                    "{g}\t{}\t{}\t{}\n",
                    fmt_f64(r.beta),
                    fmt_f64(r.se),
                    fmt_f64(r.pval)
                ));
            }
        } else {
            out.push_str("sample\tgene\tbeta\tse\tpval\n");
            for ((s, g), r) in &self.per_sample {
                out.push_str(&format!(
                    "{s}\t{g}\t{}\t{}\t{}\n",
                    fmt_f64(r.beta),
                    fmt_f64(r.se),
                    fmt_f64(r.pval)
                ));
            }
        }
        write_atomic(path, out.as_bytes())
    }
}

/// Per-sample covariates such as age, sex and batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub samples: Vec<String>,
    pub names: Vec<String>,
    /// Samples by covariates.
    pub values: DMatrix<f64>,
}

impl CovariateTable {
    pub fn new(samples: Vec<String>, names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != samples.len() || values.ncols() != names.len() {
            return Err(Error::Dimension("covariate table shape".into()));
        }
        check_unique("sample", &samples)?;
        check_unique("covariate", &names)?;
        check_finite("covariates", values.iter())?;
        Ok(CovariateTable {
            samples,
            names,
            values,
        })
    }

    pub fn empty(samples: Vec<String>) -> Self {
        let n = samples.len();
        CovariateTable {
            samples,
            names: Vec::new(),
            values: DMatrix::zeros(n, 0),
        }
    }

    /// TSV with a `sample` column followed by one column per covariate.
    pub fn load(path: &Path) -> Result<Self> {
        let m = read_matrix_tsv(path)?;
        CovariateTable::new(m.rows, m.cols, m.values)
    }
}

/// Output of [`build_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBuild {
    pub dataset: FeatureDataset,
    /// Selected genes whose eQTL record is missing for some sample; their
    /// three eQTL features are left out.
    pub omitted_genes: Vec<String>,
}

/// Per sample: posterior means of the selected pairs (sorted), then beta,
/// se and pval of each selected gene (sorted), then covariates in table
/// order. Rows follow the tensor's sample order.
pub fn build_features(
    cts: &CtsTensor,
    selection: &PairSelection,
    eqtl: &EqtlTable,
    covariates: &CovariateTable,
) -> Result<FeatureBuild> {
    let samples = cts.samples();
    let cov_rows: Vec<usize> = samples
        .iter()
        .map(|s| {
            covariates
                .samples
                .iter()
                .position(|c| c == s)
                .ok_or_else(|| Error::Invalid(format!("sample {s} has no covariate row")))
        })
        .collect::<Result<_>>()?;
    if covariates.samples.len() != samples.len() {
        return Err(Error::Invalid(format!(
            "covariate table has {} samples, tensor has {}",
            covariates.samples.len(),
            samples.len()
        )));
    }

    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (gene, ct) in selection.pairs() {
        let g =
            cts.genes().iter().position(|x| x == gene).ok_or_else(|| {
                Error::Invalid(format!("selected gene {gene} is not in the tensor"))
            })?;
        let c = cts
            .cell_types()
            .iter()
            .position(|x| x == ct)
            .ok_or_else(|| {
                Error::Invalid(format!("selected cell type {ct} is not in the tensor"))
            })?;
        names.push(cts_feature(gene, ct));
        columns.push(cts.mean_over_samples(g, c).to_vec());
    }
    let mut omitted_genes = Vec::new();
    for gene in selection.genes() {
        let recs: Option<Vec<EqtlRecord>> = samples.iter().map(|s| eqtl.get(s, &gene)).collect();
        let Some(recs) = recs else {
            omitted_genes.push(gene);
            continue;
        };
        names.push(beta_feature(&gene));
        columns.push(recs.iter().map(|r| r.beta).collect());
        names.push(se_feature(&gene));
        columns.push(recs.iter().map(|r| r.se).collect());
        names.push(pval_feature(&gene));
        columns.push(recs.iter().map(|r| r.pval).collect());
    }
    for (k, name) in covariates.names.iter().enumerate() {
        names.push(name.clone());
        columns.push(
            cov_rows
                .iter()
                .map(|&r| covariates.values[(r, k)])
                .collect(),
        );
    }
    let values = DMatrix::from_fn(samples.len(), names.len(), |i, j| columns[j][i]);
    Ok(FeatureBuild {
        dataset: FeatureDataset::new(names, samples.to_vec(), values, None)?,
        omitted_genes,
    })
}
