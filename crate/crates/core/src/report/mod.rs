//! Diagnostic reports from a classifier prediction and its top features:
//! prompt templates, a deterministic offline renderer and an LLM path.

mod llm;
mod offline;
mod prompt;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{Diagnosis, FeatureDataset, RankedFeature};
use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};

pub use llm::{
    generate_report, parse_completion, parse_llm_decision, HttpLlmClient, LlmClient,
    ParsedCompletion, DEFAULT_LLM_MODEL, ENV_LLM_KEY, ENV_LLM_URL,
};
pub use offline::{contains_blocked_term, patient_phrase, render_offline, PATIENT_BLOCKLIST};
pub use prompt::{build_prompt, population_section, ANSWER_STANZA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Audience {
    Clinician,
    Patient,
}

impl Audience {
    pub fn as_str(self) -> &'static str {
        match self {
            Audience::Clinician => "clinician",
            Audience::Patient => "patient",
        }
    }
}

impl FromStr for Audience {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clinician" => Ok(Audience::Clinician),
            "patient" => Ok(Audience::Patient),
            other => Err(Error::Invalid(format!("unknown audience `{other}`"))),
        }
    }
}

impl fmt::Display for Audience {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "step")]
    StepByStep,
    #[serde(rename = "step-domain")]
    StepByStepDomain,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::StepByStep => "step",
            Strategy::StepByStepDomain => "step-domain",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Strategy::Direct),
            "step" => Ok(Strategy::StepByStep),
            "step-domain" => Ok(Strategy::StepByStepDomain),
            other => Err(Error::Invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRange {
    pub low: f64,
    pub high: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopFeature {
    pub name: String,
    pub value: f64,
    pub attribution: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_range: Option<ReferenceRange>,
}

impl TopFeature {
    /// Attaches reference ranges by feature name.
    pub fn from_ranked(
        ranked: &[RankedFeature],
        ranges: &BTreeMap<String, ReferenceRange>,
    ) -> Vec<TopFeature> {
        ranked
            .iter()
            .map(|r| TopFeature {
                name: r.name.clone(),
                value: r.value,
                attribution: r.attribution,
                reference_range: ranges.get(&r.name).cloned(),
            })
            .collect()
    }

    /// Where the value sits relative to its reference range, if one is set.
    pub(crate) fn range_position(&self) -> Option<RangePosition> {
        let r = self.reference_range.as_ref()?;
        Some(if self.value < r.low {
            RangePosition::Below
        } else if self.value > r.high {
            RangePosition::Above
        } else {
            RangePosition::Within
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RangePosition {
    Below,
    Within,
    Above,
}

/// Per-feature class means and pooled standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationStat {
    pub mean_ad: f64,
    pub mean_non_ad: f64,
    pub sd: f64,
}

/// Class means and population sd of every feature of a labelled dataset.
pub fn population_stats(dataset: &FeatureDataset) -> Result<BTreeMap<String, PopulationStat>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Invalid("population statistics need labels".into()))?;
    let n_ad = labels.iter().filter(|l| **l == Diagnosis::Ad).count();
    let n_non = labels.len() - n_ad;
    if n_ad == 0 || n_non == 0 {
        return Err(Error::SingleClass);
    }
    let x = dataset.values();
    let mut out = BTreeMap::new();
    for (j, name) in dataset.names().iter().enumerate() {
        let col = x.column(j);
        let (mut sum_ad, mut sum_non) = (0.0, 0.0);
        for (v, l) in col.iter().zip(labels) {
            match l {
                Diagnosis::Ad => sum_ad += v,
                Diagnosis::NonAd => sum_non += v,
            }
        }
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        out.insert(
            name.clone(),
            PopulationStat {
                mean_ad: sum_ad / n_ad as f64,
                mean_non_ad: sum_non / n_non as f64,
                sd,
            },
        );
    }
    Ok(out)
}

/// Everything a report is generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInput {
    pub predicted_label: Diagnosis,
    pub probability: f64,
    pub top_features: Vec<TopFeature>,
    /// Snippets keyed by gene or biomarker.
    #[serde(default)]
    pub domain_knowledge: BTreeMap<String, String>,
    pub audience: Audience,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population_stats: Option<BTreeMap<String, PopulationStat>>,
    /// Leave the classifier's prediction out of the prompt so the model
    /// decides from the features alone.
    #[serde(default)]
    pub blind: bool,
}

impl PromptInput {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Invalid(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.top_features.is_empty() {
            return Err(Error::Empty("top features".into()));
        }
        for f in &self.top_features {
            if f.name.trim().is_empty() || f.name.contains('\n') {
                return Err(Error::Invalid(format!(
                    "feature name {:?} is blank or multi-line",
                    f.name
                )));
            }
            if !f.value.is_finite() || !f.attribution.is_finite() {
                return Err(Error::NonFinite(format!("feature `{}`", f.name)));
            }
            if let Some(r) = &f.reference_range {
                if !(r.low.is_finite() && r.high.is_finite() && r.low < r.high) {
                    return Err(Error::Invalid(format!(
                        "reference range for `{}` must satisfy low < high, got {} and {}",
                        f.name, r.low, r.high
                    )));
                }
            }
        }
        if let Some(stats) = &self.population_stats {
            for s in stats.values() {
                if !(s.mean_ad.is_finite()
                    && s.mean_non_ad.is_finite()
                    && s.sd.is_finite()
                    && s.sd >= 0.0)
                {
                    return Err(Error::Invalid(
                        "population statistics must be finite with sd >= 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Reads a knowledge file: a JSON object mapping gene or biomarker to a
/// snippet.
pub fn load_knowledge(path: &Path) -> Result<BTreeMap<String, String>> {
    read_json(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Llm,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub decision: Diagnosis,
    pub rationale: String,
    pub recommendations: Vec<String>,
    pub audience: Audience,
    pub source_probability: f64,
    pub generator: Generator,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DiagnosticReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("# Diagnostic report\n\n");
        s.push_str(&format!("- Decision: **{}**\n", self.decision));
        s.push_str(&format!("- Audience: {}\n", self.audience));
        s.push_str(&format!(
            "- Model probability of AD: {:.3}\n",
            self.source_probability
        ));
        let generator = match self.generator {
            Generator::Llm => "language model",
            Generator::Offline => "offline template",
        };
        s.push_str(&format!("- Written by: {generator}\n\n"));
        s.push_str("## Rationale\n\n");
        s.push_str(self.rationale.trim());
        s.push_str("\n\n## Recommendations\n\n");
        for r in &self.recommendations {
            s.push_str(&format!("1. {r}\n"));
        }
        if !self.warnings.is_empty() {
            s.push_str("\n## Warnings\n\n");
            for w in &self.warnings {
                s.push_str(&format!("- {w}\n"));
            }
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.md` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_json(&dir.join(format!("{stem}.json")), self)?;
        write_atomic(
            &dir.join(format!("{stem}.md")),
            self.to_markdown().as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
