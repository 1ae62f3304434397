//! Disease classification from cell-type expression, eQTL summaries and
//! covariates: feature construction, a small MLP, and Integrated Gradients.

mod attribution;
mod features;
mod mlp;
pub mod synthetic;

pub use attribution::{default_baseline, integrated_gradients, top_k_features, RankedFeature};
pub use features::{
    beta_feature, build_features, cts_feature, load_label_map, pval_feature, se_feature,
    CovariateTable, Diagnosis, EqtlRecord, EqtlTable, FeatureBuild, FeatureDataset, FeatureKind,
    FeatureVector,
};
pub use mlp::{
    accuracy, backprop_gradient, bce_from_logit, bce_loss, forward, train, EpochLog, Gradients,
    MlpModel, Params, Standardizer, TrainConfig, TrainOutcome, HIDDEN1, HIDDEN2,
};

/// Number of top features carried into reports by default.
pub const DEFAULT_TOP_K: usize = 5;
