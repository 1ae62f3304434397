mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diagno_core::report::{Audience, Strategy};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] diagno_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("cannot build thread pool: {0}")]
    Threads(String),
}

impl CliError {
    /// 1 for bad input, 2 for failures while running.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "diagno", version, about = "Cell-type deconvolution, eQTL-feature classification and diagnostic reports")]
struct Cli {
    /// JSON file with numeric settings; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides seeds in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the available cores. Results do not
    /// depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimKind {
    /// Bulk mixtures with ground truth and a single-cell reference.
    Mixture,
    /// Labelled 28-feature clinical-style dataset with planted signal.
    Clinical,
    /// Labelled eQTL dataset whose beta signs run against the labels.
    Conflict,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AudienceArg {
    Clinician,
    Patient,
}

impl From<AudienceArg> for Audience {
    fn from(a: AudienceArg) -> Self {
        match a {
            AudienceArg::Clinician => Audience::Clinician,
            AudienceArg::Patient => Audience::Patient,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Direct,
    Step,
    StepDomain,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Direct => Strategy::Direct,
            StrategyArg::Step => Strategy::StepByStep,
            StrategyArg::StepDomain => Strategy::StepByStepDomain,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    /// Genes-by-cells reference matrix TSV.
    #[arg(long)]
    reference: PathBuf,
    /// JSON map from cell id to cell type.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic data.
    Simulate {
        #[arg(long, value_enum, default_value = "mixture")]
        kind: SimKind,
    },
    /// Select (gene, cell type) pairs from a reference.
    SelectGenes {
        #[command(flatten)]
        reference: ReferenceArgs,
        /// JSON map from gene to marker cell types.
        #[arg(long)]
        markers: Option<PathBuf>,
    },
    /// Estimate cell-type expression from bulk profiles.
    Deconvolve {
        #[arg(long)]
        bulk: PathBuf,
        #[arg(long)]
        metas: PathBuf,
        #[command(flatten)]
        reference: ReferenceArgs,
        /// Selection JSON; every pair is inferred when absent.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Build a feature table from cell-type expression, eQTL records and covariates.
    BuildFeatures {
        /// Tensor prefix: reads `<prefix>.mean.tsv` and `<prefix>.variance.tsv`.
        #[arg(long)]
        cts: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        eqtl: PathBuf,
        /// Samples-by-covariates matrix TSV.
        #[arg(long)]
        covariates: Option<PathBuf>,
        /// JSON map from sample to AD or nonAD.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train the classifier on a labelled feature table.
    Train {
        #[arg(long)]
        features: PathBuf,
    },
    /// Integrated Gradients attributions for every sample.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Diagnostic report for one sample.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long, value_enum, default_value = "clinician")]
        audience: AudienceArg,
        #[arg(long, value_enum, default_value = "direct")]
        strategy: StrategyArg,
        /// Use the deterministic renderer instead of a language model.
        #[arg(long)]
        offline: bool,
        /// JSON map from gene or biomarker to a knowledge snippet.
        #[arg(long)]
        knowledge: Option<PathBuf>,
        /// JSON map from feature name to `{low, high, unit}`.
        #[arg(long)]
        ranges: Option<PathBuf>,
        /// Leave the classifier's prediction out of the prompt.
        #[arg(long)]
        blind: bool,
    },
    /// Score an estimated tensor against the truth.
    Eval {
        /// Prefix of the estimated tensor.
        #[arg(long)]
        estimate: PathBuf,
        /// Prefix of the true tensor.
        #[arg(long)]
        truth: PathBuf,
        /// Bulk matrix and metadata for scoring the per-gene OLS baseline too.
        #[arg(long, requires = "metas")]
        bulk: Option<PathBuf>,
        #[arg(long, requires = "bulk")]
        metas: Option<PathBuf>,
    },
    /// Compare classifier, sign rule and language model on diagnostic subsets.
    Diverge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// JSON map from sample to a free-text insight for the case table.
        #[arg(long)]
        insights: Option<PathBuf>,
        #[arg(long)]
        offline: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::SelectGenes { .. } => "select-genes",
            Command::Deconvolve { .. } => "deconvolve",
            Command::BuildFeatures { .. } => "build-features",
            Command::Train { .. } => "train",
            Command::Attribute { .. } => "attribute",
            Command::Report { .. } => "report",
            Command::Eval { .. } => "eval",
            Command::Diverge { .. } => "diverge",
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        let mut v: Vec<Option<&PathBuf>> = Vec::new();
        match self {
            Command::Simulate { .. } => {}
            Command::SelectGenes { reference, markers } => {
                v.extend([Some(&reference.reference), Some(&reference.labels), markers.as_ref()])
            }
            Command::Deconvolve {
                bulk,
                metas,
                reference,
                selection,
            } => v.extend([
                Some(bulk),
                Some(metas),
                Some(&reference.reference),
                Some(&reference.labels),
                selection.as_ref(),
            ]),
            Command::BuildFeatures {
                cts,
                selection,
                eqtl,
                covariates,
                labels,
            } => {
                let (mean, var) = diagno_core::io::cts_paths(cts);
                return [Some(mean), Some(var), Some(selection.clone()), Some(eqtl.clone()), covariates.clone(), labels.clone()]
                    .into_iter()
                    .flatten()
                    .collect();
            }
            Command::Train { features } => v.push(Some(features)),
            Command::Attribute { model, features } => v.extend([Some(model), Some(features)]),
            Command::Report {
                model,
                features,
                knowledge,
                ranges,
                ..
            } => v.extend([Some(model), Some(features), knowledge.as_ref(), ranges.as_ref()]),
            Command::Eval {
                estimate,
                truth,
                bulk,
                metas,
            } => {
                let (em, ev) = diagno_core::io::cts_paths(estimate);
                let (tm, tv) = diagno_core::io::cts_paths(truth);
                return [Some(em), Some(ev), Some(tm), Some(tv), bulk.clone(), metas.clone()]
                    .into_iter()
                    .flatten()
                    .collect();
            }
            Command::Diverge {
                model,
                features,
                insights,
                ..
            } => v.extend([Some(model), Some(features), insights.as_ref()]),
        }
        v.into_iter().flatten().cloned().collect()
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    let config = RunConfig::load(cli.config.as_deref()).map(|mut c| {
        c.apply_seed(cli.seed);
        c
    });
    let mut inputs = cli.command.inputs();
    if let Some(c) = &cli.config {
        inputs.insert(0, c.clone());
    }
    let (hash, value) = match &config {
        Ok(c) => (c.hash(), c.to_value()),
        Err(_) => (String::new(), serde_json::Value::Null),
    };
    let mut manifest = RunManifest::start(cli.command.name(), cli.seed, hash, value, &inputs);
    manifest.write(&cli.out)?;
    let result = config.map_err(CliError::from).and_then(|config| {
        let ctx = commands::Context {
            out: cli.out.clone(),
            config,
            seed: cli.seed.unwrap_or(0),
        };
        commands::dispatch(&ctx, &cli.command)
    });
    match result {
        Ok(outputs) => {
            manifest.succeed(&cli.out, &outputs)?;
            manifest.write(&cli.out)?;
            Ok(())
        }
        Err(e) => {
            manifest.fail(e.to_string());
            if let Err(w) = manifest.write(&cli.out) {
                log::error!("could not finalize manifest: {w}");
            }
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
