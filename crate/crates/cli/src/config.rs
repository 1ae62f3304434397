use std::path::Path;

use diagno_core::classifier::{TrainConfig, DEFAULT_TOP_K};
use diagno_core::divergence::{DEFAULT_OOD_THRESHOLD, DEFAULT_SUBSET_SIZE};
use diagno_core::io::read_json;
use diagno_core::select::SelectionParams;
use diagno_core::simulate::Scenario;
use diagno_core::{RefinementConfig, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Numeric settings of every command. Any section or field may be left out
/// of the config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub synthetic: SyntheticConfig,
    pub selection: SelectionParams,
    pub refinement: RefinementConfig,
    pub train: TrainConfig,
    pub report: ReportConfig,
    pub divergence: DivergenceConfig,
}

/// Size of the labelled feature sets made by `simulate --kind clinical`
/// and `simulate --kind conflict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { samples: 500 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub top_k: usize,
    pub ig_steps: usize,
    /// Chat model name sent to the endpoint.
    pub llm_model: Option<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            top_k: DEFAULT_TOP_K,
            ig_steps: 200,
            llm_model: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    pub subset_size: usize,
    pub ood_threshold: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            subset_size: DEFAULT_SUBSET_SIZE,
            ood_threshold: DEFAULT_OOD_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// A seed given on the command line replaces the seeds in the file.
    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.scenario.seed = s;
            self.train.seed = s;
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON of the effective config.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
