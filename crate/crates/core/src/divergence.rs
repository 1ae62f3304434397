//! Diagnostic subsets on which a trained classifier and a language model
//! are compared: AD samples whose eQTL effect signs contradict a naive
//! sign rule, and samples far from the training distribution.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    default_baseline, integrated_gradients, top_k_features, Diagnosis, FeatureDataset, FeatureKind,
    MlpModel, Standardizer, DEFAULT_TOP_K,
};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::report::{
    build_prompt, parse_llm_decision, Audience, LlmClient, PromptInput, Strategy, TopFeature,
};

/// Subset size used when none is given.
pub const DEFAULT_SUBSET_SIZE: usize = 100;
/// Per-feature z-score beyond which a sample counts as out of distribution.
pub const DEFAULT_OOD_THRESHOLD: f64 = 1.0;
const IG_STEPS: usize = 200;

/// Rows of a dataset selected for a divergence comparison, with the
/// columns that put each row in the subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub name: String,
    pub rows: Vec<usize>,
    pub highlight: Vec<Vec<usize>>,
}

impl Subset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Heuristic stand-in for a reader who equates a positive eQTL effect with
/// disease: AD when the summed beta features are positive.
pub fn sign_rule_predict(dataset: &FeatureDataset, row: usize) -> Diagnosis {
    let total: f64 = dataset
        .kinds()
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == FeatureKind::EqtlBeta)
        .map(|(j, _)| dataset.values()[(row, j)])
        .sum();
    if total > 0.0 {
        Diagnosis::Ad
    } else {
        Diagnosis::NonAd
    }
}

fn gene_of(name: &str) -> &str {
    name.split_once(':').map_or(name, |(_, g)| g)
}

/// Up to `size` AD samples with at least one negative beta feature, in
/// dataset order. The highlighted columns are the beta, se and pval of each
/// gene with a negative beta.
pub fn symbolic_conflict_subset(dataset: &FeatureDataset, size: usize) -> Result<Subset> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Invalid("the symbolic-conflict subset needs labels".into()))?;
    let kinds = dataset.kinds();
    let names = dataset.names();
    let betas: Vec<usize> = (0..kinds.len())
        .filter(|&j| kinds[j] == FeatureKind::EqtlBeta)
        .collect();
    if betas.is_empty() {
        return Err(Error::Invalid("dataset has no beta features".into()));
    }
    let x = dataset.values();
    let mut rows = Vec::new();
    let mut highlight = Vec::new();
    for i in 0..dataset.n_samples() {
        if rows.len() == size {
            break;
        }
        if labels[i] != Diagnosis::Ad {
            continue;
        }
        let genes: Vec<&str> = betas
            .iter()
            .filter(|&&j| x[(i, j)] < 0.0)
            .map(|&j| gene_of(&names[j]))
            .collect();
        if genes.is_empty() {
            continue;
        }
        let cols = (0..names.len())
            .filter(|&j| {
                matches!(
                    kinds[j],
                    FeatureKind::EqtlBeta | FeatureKind::EqtlSe | FeatureKind::EqtlPval
                ) && genes.contains(&gene_of(&names[j]))
            })
            .collect();
        rows.push(i);
        highlight.push(cols);
    }
    if rows.is_empty() {
        return Err(Error::EmptySubset("symbolic-conflict".into()));
    }
    Ok(Subset {
        name: "symbolic-conflict".into(),
        rows,
        highlight,
    })
}

/// Up to `size` samples, in dataset order, with some kept feature more than
/// `threshold` training standard deviations from the training mean. The
/// highlighted columns are the features beyond the threshold.
pub fn ood_subset(
    dataset: &FeatureDataset,
    stats: &Standardizer,
    threshold: f64,
    size: usize,
) -> Result<Subset> {
    if stats.n_inputs() != dataset.n_features() {
        return Err(Error::Dimension(format!(
            "training statistics cover {} features, dataset has {}",
            stats.n_inputs(),
            dataset.n_features()
        )));
    }
    if !(threshold >= 0.0) {
        return Err(Error::Invalid(format!(
            "threshold must be non-negative, got {threshold}"
        )));
    }
    let x = dataset.values();
    let mut rows = Vec::new();
    let mut highlight = Vec::new();
    for i in 0..dataset.n_samples() {
        if rows.len() == size {
            break;
        }
        let cols: Vec<usize> = (0..stats.n_inputs())
            .filter(|&j| {
                stats.keep[j] && ((x[(i, j)] - stats.mean[j]) / stats.sd[j]).abs() > threshold
            })
            .collect();
        if !cols.is_empty() {
            rows.push(i);
            highlight.push(cols);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySubset("out-of-distribution".into()));
    }
    Ok(Subset {
        name: "out-of-distribution".into(),
        rows,
        highlight,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCase {
    pub sample: String,
    pub features: String,
    pub label: Diagnosis,
    pub mlp: Diagnosis,
    pub llm: Option<Diagnosis>,
    pub sign_rule: Diagnosis,
    #[serde(default)]
    pub insight: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub subset_name: String,
    pub subset_size: usize,
    pub mlp_accuracy: f64,
    /// Absent when no language model was queried or none answered.
    pub llm_accuracy: Option<f64>,
    /// Cases where the language model gave no parseable decision.
    pub llm_unanswered: usize,
    pub sign_rule_accuracy: f64,
    pub cases: Vec<DivergenceCase>,
}

fn shown_features(dataset: &FeatureDataset, row: usize, cols: &[usize]) -> String {
    cols.iter()
        .map(|&j| format!("{} = {}", dataset.names()[j], dataset.values()[(row, j)]))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Language-model decision for one sample from a blind Direct prompt over
/// the highlighted features and the top attributed ones. One retry.
fn llm_decision(client: &dyn LlmClient, input: &PromptInput) -> Result<Option<Diagnosis>> {
    let prompt = build_prompt(input)?;
    for _ in 0..2 {
        if let Ok(text) = client.complete(&prompt) {
            if let Some(d) = parse_llm_decision(&text) {
                return Ok(Some(d));
            }
        }
    }
    Ok(None)
}

fn prompt_for(
    model: &MlpModel,
    dataset: &FeatureDataset,
    row: usize,
    cols: &[usize],
) -> Result<PromptInput> {
    let x = dataset.row(row);
    let attr = integrated_gradients(model, &x, &default_baseline(model), IG_STEPS)?;
    let ranked = top_k_features(&attr, dataset.names(), &x, dataset.n_features())?;
    let mut top: Vec<TopFeature> = Vec::new();
    for (k, r) in ranked.iter().enumerate() {
        let j = dataset
            .names()
            .iter()
            .position(|n| *n == r.name)
            .expect("ranked name is a column");
        if k < DEFAULT_TOP_K || cols.contains(&j) {
            top.push(TopFeature {
                name: r.name.clone(),
                value: r.value,
                attribution: r.attribution,
                reference_range: None,
            });
        }
    }
    let p = model.predict_proba(&x)?;
    Ok(PromptInput {
        predicted_label: Diagnosis::from_probability(p),
        probability: p,
        top_features: top,
        domain_knowledge: BTreeMap::new(),
        audience: Audience::Clinician,
        strategy: Strategy::Direct,
        population_stats: None,
        blind: true,
    })
}

/// Accuracy of the classifier, the sign rule and (when `client` is given)
/// the language model on each subset. `insights` maps sample ids to
/// free-text notes carried into the case table.
pub fn run_divergence(
    model: &MlpModel,
    dataset: &FeatureDataset,
    subsets: &[Subset],
    client: Option<&dyn LlmClient>,
    insights: &BTreeMap<String, String>,
) -> Result<Vec<DivergenceReport>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Invalid("divergence needs labelled samples".into()))?;
    if model.n_inputs() != dataset.n_features() || model.feature_names != dataset.names() {
        return Err(Error::Dimension("model and dataset features differ".into()));
    }
    let mut reports = Vec::with_capacity(subsets.len());
    for subset in subsets {
        if subset.is_empty() {
            return Err(Error::EmptySubset(subset.name.clone()));
        }
        if subset.highlight.len() != subset.rows.len() {
            return Err(Error::Dimension(format!(
                "subset `{}` highlight rows",
                subset.name
            )));
        }
        let cases: Vec<DivergenceCase> = subset
            .rows
            .par_iter()
            .zip(subset.highlight.par_iter())
            .map(|(&i, cols)| -> Result<DivergenceCase> {
                if i >= dataset.n_samples() {
                    return Err(Error::Invalid(format!("subset row {i} out of range")));
                }
                let mlp = model.predict(&dataset.row(i))?;
                let llm = match client {
                    Some(c) => llm_decision(c, &prompt_for(model, dataset, i, cols)?)?,
                    None => None,
                };
                let sample = dataset.samples()[i].clone();
                Ok(DivergenceCase {
                    features: shown_features(dataset, i, cols),
                    label: labels[i],
                    mlp,
                    llm,
                    sign_rule: sign_rule_predict(dataset, i),
                    insight: insights.get(&sample).cloned().unwrap_or_default(),
                    sample,
                })
            })
            .collect::<Result<_>>()?;
        let n = cases.len() as f64;
        let hits =
            |f: &dyn Fn(&DivergenceCase) -> bool| cases.iter().filter(|c| f(c)).count() as f64;
        let answered = cases.iter().filter(|c| c.llm.is_some()).count();
        let llm_accuracy = (client.is_some() && answered > 0)
            .then(|| hits(&|c| c.llm == Some(c.label)) / answered as f64);
        reports.push(DivergenceReport {
            subset_name: subset.name.clone(),
            subset_size: cases.len(),
            mlp_accuracy: hits(&|c| c.mlp == c.label) / n,
            llm_accuracy,
            llm_unanswered: if client.is_some() {
                cases.len() - answered
            } else {
                0
            },
            sign_rule_accuracy: hits(&|c| c.sign_rule == c.label) / n,
            cases,
        });
    }
    Ok(reports)
}

fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

pub fn reports_to_markdown(reports: &[DivergenceReport]) -> String {
    let mut s = String::from("# Classifier and language-model divergence\n");
    for r in reports {
        s.push_str(&format!(
            "\n## {} ({} samples)\n\n",
            r.subset_name, r.subset_size
        ));
        s.push_str(&format!("- MLP accuracy: {:.4}\n", r.mlp_accuracy));
        match r.llm_accuracy {
            Some(a) => s.push_str(&format!(
                "- LLM accuracy: {a:.4} ({} unanswered)\n",
                r.llm_unanswered
            )),
            None => s.push_str("- LLM accuracy: not evaluated\n"),
        }
        s.push_str(&format!(
            "- Sign-rule accuracy: {:.4}\n\n",
            r.sign_rule_accuracy
        ));
        s.push_str("| Case | Features | Label | MLP | LLM | Key Insight |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for c in &r.cases {
            let llm = c.llm.map_or("n/a".to_string(), |d| d.to_string());
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                cell(&c.sample),
                cell(&c.features),
                c.label,
                c.mlp,
                llm,
                cell(&c.insight)
            ));
        }
    }
    s
}

/// Writes `divergence.json` and `divergence.md` into `dir`.
pub fn save_reports(dir: &Path, reports: &[DivergenceReport]) -> Result<()> {
    write_json(&dir.join("divergence.json"), reports)?;
    write_atomic(
        &dir.join("divergence.md"),
        reports_to_markdown(reports).as_bytes(),
    )
}

pub fn load_reports(path: &Path) -> Result<Vec<DivergenceReport>> {
    read_json(path)
}
