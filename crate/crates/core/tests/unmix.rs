use diagno_core::reference::{estimate_priors, ReferenceDataset};
use diagno_core::select::PairSelection;
use diagno_core::simulate::{evaluate_recovery, generate, Scenario};
use diagno_core::unmix::{
    deconvolve, gibbs_sweep, run_mcmc, split_rhat, z_conditional, ChainState,
};
use diagno_core::{
    AdjustmentParams, BulkMatrix, GenePrior, Hyperpriors, RefinementConfig, SampleMeta,
    SampleMetaTable,
};
use nalgebra::{dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Batch-means standard error of a trace's mean.
fn mcse(trace: &[f64]) -> f64 {
    let batches = 50;
    let len = trace.len() / batches;
    let means: Vec<f64> = trace
        .chunks(len)
        .take(batches)
        .map(|b| b.iter().sum::<f64>() / len as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

fn fixture(c_n: usize) -> (GenePrior, Vec<SampleMeta>, BulkMatrix, AdjustmentParams) {
    let mu = DVector::from_fn(c_n, |c, _| 3.0 + c as f64);
    let a = DMatrix::from_fn(c_n, c_n, |i, j| if i == j { 1.0 } else { 0.3 });
    let sigma = &a * a.transpose();
    let prior = GenePrior::new("g".into(), mu, sigma, 0.4).unwrap();
    let metas: Vec<SampleMeta> = (0..5)
        .map(|i| {
            let raw = DVector::from_fn(c_n, |c, _| 1.0 + ((i + 2 * c) % 3) as f64);
            SampleMeta::new(
                format!("s{i}"),
                &raw / raw.sum(),
                dvector![0.5 - 0.2 * i as f64],
                dvector![0.1 * i as f64],
            )
            .unwrap()
        })
        .collect();
    let adj = AdjustmentParams::new(
        dvector![0.7],
        DMatrix::from_fn(c_n, 1, |c, _| 0.2 * c as f64 - 0.1),
    )
    .unwrap();
    let x = DMatrix::from_fn(1, 5, |_, i| 4.0 + 0.5 * i as f64);
    let bulk = BulkMatrix::new(
        vec!["g".into()],
        (0..5).map(|i| format!("s{i}")).collect(),
        x,
    )
    .unwrap();
    (prior, metas, bulk, adj)
}

#[test]
fn gibbs_mean_matches_conjugate_conditional() {
    for c_n in 1..=3 {
        let (prior, metas, bulk, adj) = fixture(c_n);
        let hyper = Hyperpriors {
            update_adjustment: false,
            update_noise: false,
            ..Hyperpriors::default()
        };
        let priors = std::slice::from_ref(&prior);
        let mut state = ChainState::initialize(priors, &metas, 17, 0).unwrap();
        state.genes[0].adjustment = adj.clone();
        state.genes[0].noise_var = prior.noise_var();
        for _ in 0..500 {
            gibbs_sweep(&mut state, &bulk, priors, &metas, &hyper).unwrap();
        }
        let mut traces = vec![vec![Vec::new(); c_n]; 5];
        for _ in 0..10_000 {
            gibbs_sweep(&mut state, &bulk, priors, &metas, &hyper).unwrap();
            for (i, z) in state.genes[0].z.iter().enumerate() {
                for c in 0..c_n {
                    traces[i][c].push(z[c]);
                }
            }
        }
        for (i, meta) in metas.iter().enumerate() {
            let (mean, _) = z_conditional(&prior, bulk.values()[(0, i)], meta, &adj).unwrap();
            for c in 0..c_n {
                let t = &traces[i][c];
                let est = t.iter().sum::<f64>() / t.len() as f64;
                let se = mcse(t);
                assert!(
                    (est - mean[c]).abs() < 3.0 * se,
                    "C={c_n} sample {i} type {c}: {est} vs {} (se {se})",
                    mean[c]
                );
            }
        }
    }
}

#[test]
fn split_rhat_separates_mixed_from_offset_chains() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let chain = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<f64> {
        (0..2000)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                shift + e
            })
            .collect()
    };
    let mixed: Vec<Vec<f64>> = (0..4).map(|_| chain(&mut rng, 0.0)).collect();
    assert!(split_rhat(&mixed).unwrap() < 1.05);
    let offset: Vec<Vec<f64>> = (0..4).map(|k| chain(&mut rng, 3.0 * k as f64)).collect();
    assert!(split_rhat(&offset).unwrap() > 1.5);
}

#[test]
fn split_rhat_hand_value() {
    // Halves [0,1],[2,3] and [0,1],[2,3]: W = 0.5, B/n = var(0.5, 2.5, 0.5, 2.5)
    // = 4/3, var+ = (1/2) W + 4/3, rhat = sqrt(var+ / W).
    let chains = vec![vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 1.0, 2.0, 3.0]];
    let w: f64 = 0.5;
    let b_over_n: f64 = 4.0 / 3.0;
    let expected = ((0.5 * w + b_over_n) / w).sqrt();
    assert!((split_rhat(&chains).unwrap() - expected).abs() < 1e-12);
}

fn small_bundle(seed: u64) -> diagno_core::simulate::GroundTruthBundle {
    generate(&Scenario {
        genes: 6,
        samples: 25,
        seed,
        ..Scenario::default()
    })
    .unwrap()
}

fn all_pairs(reference: &ReferenceDataset) -> PairSelection {
    PairSelection::all_pairs(reference.genes(), reference.cell_types())
}

#[test]
fn deconvolution_is_deterministic_and_converges() {
    let b = small_bundle(9);
    let cfg = RefinementConfig {
        iters: 600,
        ..RefinementConfig::default()
    };
    let sel = all_pairs(&b.reference);
    let run = || deconvolve(&b.bulk, &b.reference, &sel, &b.metas, &cfg, 9).unwrap();
    let (a, c) = (run(), run());
    assert_eq!(a.tensor, c.tensor);
    assert_eq!(a.rounds.len(), 2);
    assert!(a.converged());
    for r in &a.rounds {
        assert!(r.rhat.iter().all(|e| e.rhat > 0.8));
        assert_eq!(r.converged, r.max_rhat < cfg.rhat_threshold);
    }
    let rec = evaluate_recovery(&a.tensor, &b.true_z).unwrap();
    assert!(rec.median_per_gene.unwrap() > 0.0);
}

#[test]
fn unselected_pairs_keep_their_prior() {
    let b = small_bundle(2);
    let ct = b.reference.cell_types()[0].clone();
    let sel = PairSelection::from_entries([(
        ("gene00".to_string(), ct),
        diagno_core::select::Provenance::Marker,
        None,
    )]);
    let cfg = RefinementConfig {
        iters: 200,
        ..RefinementConfig::default()
    };
    let d = deconvolve(&b.bulk, &b.reference, &sel, &b.metas, &cfg, 2).unwrap();
    let priors = estimate_priors(
        &b.reference,
        cfg.shrinkage,
        diagno_core::unmix::prior_seed(2),
    )
    .unwrap();
    // gene01 is not selected at all: every entry is its reference prior.
    let g = 1;
    for c in 0..3 {
        for i in 0..b.bulk.n_samples() {
            assert_eq!(d.tensor.mean_at(g, c, i), priors[g].mu()[c]);
            assert_eq!(d.tensor.variance_at(g, c, i), priors[g].sigma()[(c, c)]);
        }
    }
    assert!(d.inferred[0]);
    assert!(!d.inferred[1]);
}

#[test]
fn run_mcmc_rejects_misaligned_priors() {
    let b = small_bundle(1);
    let priors = estimate_priors(&b.reference, 0.0, 1).unwrap();
    let metas: &SampleMetaTable = &b.metas;
    let mut swapped = priors.clone();
    swapped.swap(0, 1);
    let cfg = RefinementConfig {
        iters: 10,
        ..RefinementConfig::default()
    };
    assert!(run_mcmc(&b.bulk, &swapped, metas, &cfg, 1).is_err());
    assert!(run_mcmc(&b.bulk, &priors[..3], metas, &cfg, 1).is_err());
}

/// Matched-prior run on a 20-gene cohort and the exact-posterior oracle:
/// each sample's z conditional on the true mean, covariance, covariate
/// effects and noise variance.
fn matched_prior_run() -> (f64, f64, bool) {
    let b = generate(&Scenario {
        genes: 20,
        samples: 40,
        seed: 3,
        ..Scenario::default()
    })
    .unwrap();
    let noise_var = 0.25;
    let priors: Vec<GenePrior> = b
        .bulk
        .genes()
        .iter()
        .enumerate()
        .map(|(g, name)| GenePrior::new(name.clone(), b.true_means[g].clone(), b.true_covs[g].clone(), noise_var).unwrap())
        .collect();
    let cfg = RefinementConfig::default();
    let post = run_mcmc(&b.bulk, &priors, &b.metas, &cfg, 3).unwrap();
    let mcmc = evaluate_recovery(&post.cts, &b.true_z).unwrap().median_per_gene.unwrap();
    let (g_n, c_n, n) = b.true_z.shape();
    let mut oracle = vec![0.0; g_n * c_n * n];
    for g in 0..g_n {
        for (i, meta) in b.metas.metas().iter().enumerate() {
            let (m, _) = z_conditional(&priors[g], b.bulk.values()[(g, i)], meta, &b.true_params[g]).unwrap();
            for c in 0..c_n {
                oracle[(g * c_n + c) * n + i] = m[c];
            }
        }
    }
    let t = &b.true_z;
    let oracle = diagno_core::CtsTensor::new(
        t.genes().to_vec(),
        t.cell_types().to_vec(),
        t.samples().to_vec(),
        oracle,
        vec![0.0; g_n * c_n * n],
    )
    .unwrap();
    let best = evaluate_recovery(&oracle, t).unwrap().median_per_gene.unwrap();
    (mcmc, best, post.converged)
}

#[test]
fn matched_priors_converge_and_reach_the_oracle() {
    let (mcmc, oracle, converged) = matched_prior_run();
    assert!(converged);
    assert!(mcmc > oracle - 0.1, "sampler {mcmc}, oracle {oracle}");
}

#[test]
#[ignore = "a per-gene median PCC above 0.9 exceeds what the exact posterior reaches on this cohort (about 0.5)"]
fn matched_priors_reach_point_nine() {
    let (mcmc, oracle, converged) = matched_prior_run();
    assert!(converged);
    assert!(mcmc > 0.9, "sampler {mcmc}, oracle {oracle}");
}

#[test]
fn one_round_equals_a_single_run_with_reference_priors() {
    let b = small_bundle(6);
    let cfg = RefinementConfig {
        rounds: 1,
        iters: 300,
        ..RefinementConfig::default()
    };
    let sel = all_pairs(&b.reference);
    let d = deconvolve(&b.bulk, &b.reference, &sel, &b.metas, &cfg, 6).unwrap();
    let priors = estimate_priors(&b.reference, cfg.shrinkage, diagno_core::unmix::prior_seed(6)).unwrap();
    let s = run_mcmc(&b.bulk, &priors, &b.metas, &cfg, diagno_core::unmix::round_seed(6, 0)).unwrap();
    assert_eq!(d.tensor, s.cts);
}

#[test]
fn identity_mixing_returns_the_bulk() {
    let n = 6;
    let x = DMatrix::from_fn(1, n, |_, i| 2.0 + i as f64);
    let samples: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let bulk = BulkMatrix::new(vec!["g".into()], samples.clone(), x.clone()).unwrap();
    let metas = SampleMetaTable::new(
        vec!["only".into()],
        samples
            .iter()
            .map(|s| SampleMeta::new(s.clone(), dvector![1.0], dvector![], dvector![]).unwrap())
            .collect(),
    )
    .unwrap();
    let prior = GenePrior::new("g".into(), dvector![4.0], DMatrix::from_element(1, 1, 4.0), 1e-10).unwrap();
    let cfg = RefinementConfig {
        iters: 400,
        hyper: Hyperpriors {
            update_noise: false,
            ..Hyperpriors::default()
        },
        ..RefinementConfig::default()
    };
    let s = run_mcmc(&bulk, &[prior], &metas, &cfg, 1).unwrap();
    for i in 0..n {
        assert!((s.cts.mean_at(0, 0, i) - x[(0, i)]).abs() < 1e-6);
        assert!(s.cts.variance_at(0, 0, i) < 1e-6);
    }
}
