use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diagno_core::classifier::synthetic::{anti_correlated, planted_clinical};
use diagno_core::classifier::{
    build_features, default_baseline, integrated_gradients, load_label_map, top_k_features, train, CovariateTable,
    EqtlTable, FeatureDataset, MlpModel, RankedFeature,
};
use diagno_core::divergence::{ood_subset, run_divergence, save_reports, symbolic_conflict_subset, Subset};
use diagno_core::io::{
    load_bulk_matrix, load_cts_tensor, load_sample_metas, read_json, render_matrix_tsv, save_cts_tensor, write_atomic,
    write_json,
};
use diagno_core::reference::ReferenceDataset;
use diagno_core::report::{
    build_prompt, generate_report, load_knowledge, population_stats, HttpLlmClient, LlmClient, PromptInput,
    ReferenceRange, Strategy, TopFeature,
};
use diagno_core::select::{load_marker_list, select_pairs, PairSelection};
use diagno_core::simulate::{baseline_ols, evaluate_recovery, generate};
use diagno_core::unmix::{deconvolve, save_inferred_tsv, save_rhat_tsv};
use diagno_core::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::{CliError, Command, ReferenceArgs, SimKind};

pub struct Context {
    pub out: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

type Outputs = Vec<PathBuf>;

fn files(names: &[&str]) -> Outputs {
    names.iter().map(PathBuf::from).collect()
}

pub fn dispatch(ctx: &Context, command: &Command) -> std::result::Result<Outputs, CliError> {
    let outputs = match command {
        Command::Simulate { kind } => simulate(ctx, *kind)?,
        Command::SelectGenes { reference, markers } => select_genes(ctx, reference, markers.as_deref())?,
        Command::Deconvolve {
            bulk,
            metas,
            reference,
            selection,
        } => cmd_deconvolve(ctx, bulk, metas, reference, selection.as_deref())?,
        Command::BuildFeatures {
            cts,
            selection,
            eqtl,
            covariates,
            labels,
        } => cmd_build_features(ctx, cts, selection, eqtl, covariates.as_deref(), labels.as_deref())?,
        Command::Train { features } => cmd_train(ctx, features)?,
        Command::Attribute { model, features } => attribute(ctx, model, features)?,
        Command::Report {
            model,
            features,
            sample,
            audience,
            strategy,
            offline,
            knowledge,
            ranges,
            blind,
        } => {
            let opts = ReportOptions {
                sample,
                audience: (*audience).into(),
                strategy: (*strategy).into(),
                offline: *offline,
                knowledge: knowledge.as_deref(),
                ranges: ranges.as_deref(),
                blind: *blind,
            };
            report(ctx, model, features, &opts)?
        }
        Command::Eval {
            estimate,
            truth,
            bulk,
            metas,
        } => eval(ctx, estimate, truth, bulk.as_deref().zip(metas.as_deref()))?,
        Command::Diverge {
            model,
            features,
            insights,
            offline,
        } => diverge(ctx, model, features, insights.as_deref(), *offline)?,
    };
    Ok(outputs)
}

fn simulate(ctx: &Context, kind: SimKind) -> Result<Outputs> {
    match kind {
        SimKind::Mixture => {
            let bundle = generate(&ctx.config.scenario)?;
            bundle.save(&ctx.out)?;
            write_json(&ctx.path("scenario.json"), &ctx.config.scenario)?;
            Ok(files(&[
                "bulk.tsv",
                "metas.json",
                "truth.mean.tsv",
                "truth.variance.tsv",
                "reference.tsv",
                "reference_labels.json",
                "truth_params.json",
                "noise.tsv",
                "scenario.json",
            ]))
        }
        SimKind::Clinical | SimKind::Conflict => {
            let n = ctx.config.synthetic.samples;
            let data = match kind {
                SimKind::Clinical => planted_clinical(n, ctx.seed)?,
                _ => anti_correlated(n, ctx.seed)?,
            };
            data.save(&ctx.path("features.tsv"))?;
            Ok(files(&["features.tsv"]))
        }
    }
}

fn load_reference(args: &ReferenceArgs) -> Result<ReferenceDataset> {
    ReferenceDataset::load(&args.reference, &args.labels)
}

fn select_genes(ctx: &Context, reference: &ReferenceArgs, markers: Option<&Path>) -> Result<Outputs> {
    let reference = load_reference(reference)?;
    let markers = match markers {
        Some(p) => load_marker_list(p)?,
        None => Default::default(),
    };
    let selection = select_pairs(&reference, &markers, &ctx.config.selection)?;
    if selection.is_empty() {
        log::warn!("no (gene, cell type) pair was selected");
    }
    selection.save(&ctx.path("selection.json"))?;
    Ok(files(&["selection.json"]))
}

#[derive(Serialize)]
struct RoundDiagnostics {
    round: usize,
    converged: bool,
    max_rhat: Option<f64>,
    draws_per_chain: usize,
    diagnostics: Vec<String>,
}

#[derive(Serialize)]
struct DeconvolutionDiagnostics {
    converged: bool,
    max_rhat: Option<f64>,
    seed: u64,
    selected_pairs: usize,
    inferred_pairs: usize,
    genes_without_reference: Vec<String>,
    rounds: Vec<RoundDiagnostics>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn cmd_deconvolve(
    ctx: &Context,
    bulk: &Path,
    metas: &Path,
    reference: &ReferenceArgs,
    selection: Option<&Path>,
) -> Result<Outputs> {
    let bulk = load_bulk_matrix(bulk)?;
    let metas = load_sample_metas(metas)?;
    let reference = load_reference(reference)?;
    let selection = match selection {
        Some(p) => PairSelection::load(p)?,
        None => {
            let genes: Vec<String> = bulk
                .genes()
                .iter()
                .filter(|g| reference.gene_index(g).is_some())
                .cloned()
                .collect();
            PairSelection::all_pairs(&genes, metas.cell_types())
        }
    };
    let result = deconvolve(&bulk, &reference, &selection, &metas, &ctx.config.refinement, ctx.seed)?;
    save_cts_tensor(&result.tensor, &ctx.path("cts"))?;
    save_rhat_tsv(result.final_round(), &ctx.path("rhat.tsv"))?;
    save_inferred_tsv(&result, &ctx.path("inferred.tsv"))?;
    let last = result.final_round();
    let diagnostics = DeconvolutionDiagnostics {
        converged: result.converged(),
        max_rhat: finite(last.max_rhat),
        seed: ctx.seed,
        selected_pairs: selection.len(),
        inferred_pairs: result.inferred.iter().filter(|f| **f).count(),
        genes_without_reference: result.genes_without_reference.clone(),
        rounds: result
            .rounds
            .iter()
            .enumerate()
            .map(|(k, r)| RoundDiagnostics {
                round: k + 1,
                converged: r.converged,
                max_rhat: finite(r.max_rhat),
                draws_per_chain: r.draws_per_chain,
                diagnostics: r.diagnostics.clone(),
            })
            .collect(),
    };
    if !diagnostics.converged {
        log::warn!("sampler did not converge; max R-hat {:?}", diagnostics.max_rhat);
    }
    write_json(&ctx.path("diagnostics.json"), &diagnostics)?;
    Ok(files(&[
        "cts.mean.tsv",
        "cts.variance.tsv",
        "rhat.tsv",
        "inferred.tsv",
        "diagnostics.json",
    ]))
}

#[derive(Serialize)]
struct BuildSummary {
    samples: usize,
    features: usize,
    labelled: bool,
    omitted_genes: Vec<String>,
}

fn cmd_build_features(
    ctx: &Context,
    cts: &Path,
    selection: &Path,
    eqtl: &Path,
    covariates: Option<&Path>,
    labels: Option<&Path>,
) -> Result<Outputs> {
    let tensor = load_cts_tensor(cts)?;
    let selection = PairSelection::load(selection)?;
    let eqtl = EqtlTable::load(eqtl)?;
    let covariates = match covariates {
        Some(p) => CovariateTable::load(p)?,
        None => CovariateTable::empty(tensor.samples().to_vec()),
    };
    let built = build_features(&tensor, &selection, &eqtl, &covariates)?;
    let mut dataset = built.dataset;
    if let Some(p) = labels {
        dataset = dataset.with_label_map(&load_label_map(p)?)?;
    }
    for g in &built.omitted_genes {
        log::warn!("gene {g} has no eQTL record for some sample and was left out");
    }
    dataset.save(&ctx.path("features.tsv"))?;
    write_json(
        &ctx.path("feature_build.json"),
        &BuildSummary {
            samples: dataset.n_samples(),
            features: dataset.n_features(),
            labelled: dataset.labels().is_some(),
            omitted_genes: built.omitted_genes,
        },
    )?;
    Ok(files(&["features.tsv", "feature_build.json"]))
}

fn cmd_train(ctx: &Context, features: &Path) -> Result<Outputs> {
    let dataset = FeatureDataset::load(features)?;
    let outcome = train(&dataset, &ctx.config.train)?;
    outcome.model.save(&ctx.path("model.json"))?;
    write_json(
        &ctx.path("training_log.json"),
        &serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "stopped_early": outcome.stopped_early,
            "train_rows": outcome.train_rows.len(),
            "val_rows": outcome.val_rows.len(),
            "epochs": outcome.log,
        }),
    )?;
    Ok(files(&["model.json", "training_log.json"]))
}

fn check_features(model: &MlpModel, dataset: &FeatureDataset) -> Result<()> {
    if model.feature_names != dataset.names() {
        return Err(Error::Invalid("feature table columns differ from the model's features".into()));
    }
    Ok(())
}

fn attributions(model: &MlpModel, dataset: &FeatureDataset, steps: usize) -> Result<DMatrix<f64>> {
    let base = default_baseline(model);
    let rows: Vec<Vec<f64>> = (0..dataset.n_samples())
        .into_par_iter()
        .map(|i| integrated_gradients(model, &dataset.row(i), &base, steps))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(dataset.n_samples(), dataset.n_features(), |i, j| rows[i][j]))
}

fn attribute(ctx: &Context, model: &Path, features: &Path) -> Result<Outputs> {
    let model = MlpModel::load(model)?;
    let dataset = FeatureDataset::load(features)?;
    check_features(&model, &dataset)?;
    let attr = attributions(&model, &dataset, ctx.config.report.ig_steps)?;
    write_atomic(
        &ctx.path("attributions.tsv"),
        render_matrix_tsv("sample", dataset.samples(), dataset.names(), &attr).as_bytes(),
    )?;
    let mut top: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    for (i, sample) in dataset.samples().iter().enumerate() {
        let row: Vec<f64> = attr.row(i).iter().copied().collect();
        let ranked: Vec<RankedFeature> =
            top_k_features(&row, dataset.names(), &dataset.row(i), ctx.config.report.top_k)?;
        let p = model.predict_proba(&dataset.row(i))?;
        top.insert(
            sample.clone(),
            serde_json::json!({ "probability": p, "prediction": model.predict(&dataset.row(i))?, "top_features": ranked }),
        );
    }
    write_json(&ctx.path("top_features.json"), &top)?;
    Ok(files(&["attributions.tsv", "top_features.json"]))
}

pub struct ReportOptions<'a> {
    sample: &'a str,
    audience: diagno_core::report::Audience,
    strategy: Strategy,
    offline: bool,
    knowledge: Option<&'a Path>,
    ranges: Option<&'a Path>,
    blind: bool,
}

fn report(ctx: &Context, model: &Path, features: &Path, opts: &ReportOptions) -> Result<Outputs> {
    let model = MlpModel::load(model)?;
    let dataset = FeatureDataset::load(features)?;
    check_features(&model, &dataset)?;
    let i = dataset
        .sample_index(opts.sample)
        .ok_or_else(|| Error::Invalid(format!("sample `{}` is not in the feature table", opts.sample)))?;
    let x = dataset.row(i);
    let attr = integrated_gradients(&model, &x, &default_baseline(&model), ctx.config.report.ig_steps)?;
    let ranked = top_k_features(&attr, dataset.names(), &x, ctx.config.report.top_k)?;
    let ranges: BTreeMap<String, ReferenceRange> = match opts.ranges {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let knowledge = match opts.knowledge {
        Some(p) => load_knowledge(p)?,
        None => BTreeMap::new(),
    };
    let stats = match (opts.strategy, dataset.labels()) {
        (Strategy::Direct, _) | (_, None) => None,
        _ => Some(population_stats(&dataset)?),
    };
    let p = model.predict_proba(&x)?;
    let input = PromptInput {
        predicted_label: model.predict(&x)?,
        probability: p,
        top_features: TopFeature::from_ranked(&ranked, &ranges),
        domain_knowledge: knowledge,
        audience: opts.audience,
        strategy: opts.strategy,
        population_stats: stats,
        blind: opts.blind,
    };
    let prompt = build_prompt(&input)?;
    write_atomic(&ctx.path("prompt.txt"), prompt.as_bytes())?;
    let client = if opts.offline {
        None
    } else {
        HttpLlmClient::from_env(ctx.config.report.llm_model.as_deref())
    };
    let mut result = generate_report(&input, client.as_ref().map(|c| c as &dyn LlmClient))?;
    if !opts.offline && client.is_none() {
        result
            .warnings
            .insert(0, "no language-model endpoint configured; used the offline renderer".into());
    }
    result.save(&ctx.out, "report")?;
    Ok(files(&["prompt.txt", "report.json", "report.md"]))
}

fn eval(ctx: &Context, estimate: &Path, truth: &Path, baseline: Option<(&Path, &Path)>) -> Result<Outputs> {
    let est = load_cts_tensor(estimate)?;
    let truth = load_cts_tensor(truth)?;
    let report = evaluate_recovery(&est, &truth)?;
    write_json(&ctx.path("recovery.json"), &report)?;
    report.save_per_gene_tsv(&ctx.path("per_gene_pcc.tsv"))?;
    let mut out = files(&["recovery.json", "per_gene_pcc.tsv"]);
    if let Some((bulk, metas)) = baseline {
        let ols = baseline_ols(&load_bulk_matrix(bulk)?, &load_sample_metas(metas)?)?;
        let base = evaluate_recovery(&ols, &truth)?;
        write_json(&ctx.path("baseline_ols.json"), &base)?;
        out.push("baseline_ols.json".into());
    }
    Ok(out)
}

fn diverge(ctx: &Context, model: &Path, features: &Path, insights: Option<&Path>, offline: bool) -> Result<Outputs> {
    let model = MlpModel::load(model)?;
    let dataset = FeatureDataset::load(features)?;
    check_features(&model, &dataset)?;
    let cfg = &ctx.config.divergence;
    let mut subsets: Vec<Subset> = Vec::new();
    for s in [
        symbolic_conflict_subset(&dataset, cfg.subset_size),
        ood_subset(&dataset, &model.standardizer, cfg.ood_threshold, cfg.subset_size),
    ] {
        match s {
            Ok(s) => subsets.push(s),
            Err(Error::EmptySubset(name)) => log::warn!("subset {name} is empty and was skipped"),
            Err(Error::Invalid(m)) => log::warn!("subset skipped: {m}"),
            Err(e) => return Err(e),
        }
    }
    if subsets.is_empty() {
        return Err(Error::EmptySubset("symbolic-conflict and out-of-distribution".into()));
    }
    let insights: BTreeMap<String, String> = match insights {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let client = if offline {
        None
    } else {
        HttpLlmClient::from_env(ctx.config.report.llm_model.as_deref())
    };
    let reports = run_divergence(
        &model,
        &dataset,
        &subsets,
        client.as_ref().map(|c| c as &dyn LlmClient),
        &insights,
    )?;
    save_reports(&ctx.out, &reports)?;
    Ok(files(&["divergence.json", "divergence.md"]))
}
