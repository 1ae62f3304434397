use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use diagno_core::classifier::Diagnosis;
use diagno_core::report::Strategy;
use diagno_core::report::*;
use diagno_core::{Error, Result};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

fn feature(name: &str, value: f64, attribution: f64) -> TopFeature {
    TopFeature {
        name: name.into(),
        value,
        attribution,
        reference_range: None,
    }
}

fn input(strategy: Strategy, audience: Audience, p: f64) -> PromptInput {
    let features = vec![
        feature("cts:APOE:microglia", 6.2, 0.41),
        feature("ldl", 162.0, 0.3),
        feature("age", 74.0, -0.05),
    ];
    let stats = features
        .iter()
        .map(|f| {
            (
                f.name.clone(),
                PopulationStat {
                    mean_ad: f.value + 1.0,
                    mean_non_ad: f.value - 1.0,
                    sd: 2.0,
                },
            )
        })
        .collect();
    PromptInput {
        predicted_label: Diagnosis::from_probability(p),
        probability: p,
        top_features: features,
        domain_knowledge: BTreeMap::from([(
            "APOE".to_string(),
            "APOE e4 carriers have higher amyloid burden and altered lipid transport.".to_string(),
        )]),
        audience,
        strategy,
        population_stats: Some(stats),
        blind: false,
    }
}

#[test]
fn direct_prompt_lists_each_feature_once() {
    let p = build_prompt(&input(Strategy::Direct, Audience::Clinician, 0.7)).unwrap();
    assert_eq!(p.lines().filter(|l| l.starts_with("- ")).count(), 3);
    assert!(!p.contains("Population summary"));
    assert!(p.ends_with("DECISION: <AD|nonAD>\n"));
}

#[test]
fn domain_prompt_nests_the_population_section() {
    let step = input(Strategy::StepByStep, Audience::Clinician, 0.7);
    let domain = input(Strategy::StepByStepDomain, Audience::Clinician, 0.7);
    let section = population_section(&step).unwrap();
    assert!(build_prompt(&step).unwrap().contains(&section));
    let text = build_prompt(&domain).unwrap();
    assert!(text.contains(&section));
    assert!(text.contains("Domain knowledge:"));
    assert!(
        text.contains("APOE e4 carriers have higher amyloid burden and altered lipid transport.")
    );
    assert!(!build_prompt(&step).unwrap().contains("Domain knowledge:"));
}

#[test]
fn prompts_are_byte_deterministic() {
    for s in [
        Strategy::Direct,
        Strategy::StepByStep,
        Strategy::StepByStepDomain,
    ] {
        let i = input(s, Audience::Patient, 0.4);
        assert_eq!(build_prompt(&i).unwrap(), build_prompt(&i.clone()).unwrap());
    }
}

#[test]
fn missing_stats_and_knowledge_are_errors() {
    let mut i = input(Strategy::StepByStep, Audience::Clinician, 0.7);
    i.population_stats = None;
    assert!(matches!(build_prompt(&i), Err(Error::MissingStats(_))));
    let mut i = input(Strategy::StepByStepDomain, Audience::Clinician, 0.7);
    i.domain_knowledge.clear();
    assert!(matches!(build_prompt(&i), Err(Error::MissingKnowledge(_))));
}

#[test]
fn blind_prompt_hides_the_prediction() {
    let mut i = input(Strategy::Direct, Audience::Clinician, 0.83);
    i.blind = true;
    let p = build_prompt(&i).unwrap();
    assert!(!p.contains("0.830"));
    assert!(!p.contains("predicted"));
}

#[test]
fn invalid_inputs_are_rejected() {
    let mut i = input(Strategy::Direct, Audience::Clinician, 1.2);
    assert!(i.validate().is_err());
    i.probability = 0.5;
    i.top_features[0].reference_range = Some(ReferenceRange {
        low: 5.0,
        high: 5.0,
        unit: String::new(),
    });
    assert!(i.validate().is_err());
    i.top_features.clear();
    assert!(i.validate().is_err());
}

#[test]
fn decision_threshold_is_inclusive() {
    let i = input(Strategy::Direct, Audience::Clinician, 0.5);
    assert_eq!(render_offline(&i).decision, Diagnosis::Ad);
    let i = input(Strategy::Direct, Audience::Clinician, 0.5 - 1e-12);
    assert_eq!(render_offline(&i).decision, Diagnosis::NonAd);
}

#[test]
fn lipid_features_lead_to_lipid_management() {
    for a in [Audience::Clinician, Audience::Patient] {
        let r = render_offline(&input(Strategy::Direct, a, 0.83));
        assert_eq!(r.decision, Diagnosis::Ad);
        assert!(r
            .recommendations
            .iter()
            .any(|s| s.contains("lipid management")));
    }
}

#[test]
fn low_probability_leads_to_monitoring() {
    for a in [Audience::Clinician, Audience::Patient] {
        let r = render_offline(&input(Strategy::Direct, a, 0.10));
        assert_eq!(r.decision, Diagnosis::NonAd);
        assert!(r.recommendations.iter().any(|s| s.contains("monitoring")));
    }
}

#[test]
fn patient_report_avoids_jargon() {
    let r = render_offline(&input(Strategy::Direct, Audience::Patient, 0.83));
    assert!(!contains_blocked_term(&r.rationale));
    assert!(r.recommendations.iter().all(|s| !contains_blocked_term(s)));
    assert!(r.rationale.contains("cts:APOE:microglia"));
    assert!(r.rationale.contains("your cholesterol level"));
}

#[test]
fn unmapped_patient_names_are_flagged() {
    let mut i = input(Strategy::Direct, Audience::Patient, 0.2);
    i.top_features = vec![feature("tau_pet_suvr", 1.3, 0.2)];
    let r = render_offline(&i);
    assert!(r.rationale.contains("tau_pet_suvr"));
    assert!(r.warnings.iter().any(|w| w.contains("tau_pet_suvr")));
}

#[test]
fn clinician_rationale_cites_magnitudes() {
    let r = render_offline(&input(Strategy::Direct, Audience::Clinician, 0.83));
    assert!(r.rationale.contains("attribution +0.4100"));
    assert!(r.rationale.contains("raised the AD score"));
    assert!(r.rationale.contains("lowered the AD score"));
}

#[test]
fn decision_parsing() {
    assert_eq!(
        parse_llm_decision("reasoning...\nDECISION: AD"),
        Some(Diagnosis::Ad)
    );
    assert_eq!(
        parse_llm_decision("DECISION: nonAD\nmore\nDECISION: AD"),
        Some(Diagnosis::Ad)
    );
    assert_eq!(
        parse_llm_decision("decision: NONAD"),
        Some(Diagnosis::NonAd)
    );
    assert_eq!(parse_llm_decision("**Decision:** AD."), Some(Diagnosis::Ad));
    assert_eq!(parse_llm_decision("no decision here"), None);
    assert_eq!(parse_llm_decision("DECISION: <AD|nonAD>"), None);
    assert_eq!(parse_llm_decision("DECISION: maybe"), None);
}

struct Scripted {
    replies: Vec<Result<String>>,
    calls: AtomicUsize,
}

impl Scripted {
    fn new(replies: Vec<Result<String>>) -> Self {
        Scripted {
            replies,
            calls: AtomicUsize::new(0),
        }
    }
}

impl LlmClient for Scripted {
    fn complete(&self, _prompt: &str) -> Result<String> {
        let k = self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.replies[k.min(self.replies.len() - 1)] {
            Ok(s) => Ok(s.clone()),
            Err(e) => Err(Error::Transport(e.to_string())),
        }
    }
}

const GOOD: &str = "RATIONALE: High cts:APOE:microglia and ldl point to AD.\nRECOMMENDATIONS:\n* Lipid panel\n* Memory clinic referral\nDECISION: AD\n";

#[test]
fn offline_flag_matches_render_offline() {
    let i = input(Strategy::StepByStep, Audience::Patient, 0.3);
    assert_eq!(generate_report(&i, None).unwrap(), render_offline(&i));
}

#[test]
fn well_formed_completion_is_parsed() {
    let client = Scripted::new(vec![Ok(GOOD.into())]);
    let i = input(Strategy::Direct, Audience::Clinician, 0.2);
    let r = generate_report(&i, Some(&client)).unwrap();
    assert_eq!(r.generator, Generator::Llm);
    assert_eq!(r.decision, Diagnosis::Ad);
    assert_eq!(
        r.recommendations,
        vec!["Lipid panel", "Memory clinic referral"]
    );
    assert_eq!(client.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn second_attempt_can_succeed() {
    let client = Scripted::new(vec![Ok("I think AD".into()), Ok(GOOD.into())]);
    let r = generate_report(
        &input(Strategy::Direct, Audience::Clinician, 0.2),
        Some(&client),
    )
    .unwrap();
    assert_eq!(r.generator, Generator::Llm);
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn garbage_twice_falls_back() {
    let client = Scripted::new(vec![Ok("garbage".into()), Ok("more garbage".into())]);
    let i = input(Strategy::Direct, Audience::Clinician, 0.83);
    let r = generate_report(&i, Some(&client)).unwrap();
    assert_eq!(r.generator, Generator::Offline);
    assert_eq!(r.decision, Diagnosis::Ad);
    assert!(r.warnings.iter().any(|w| w.contains("offline")));
    assert_eq!(client.calls.load(Ordering::SeqCst), 2);
}

#[test]
fn transport_failure_falls_back() {
    let client = Scripted::new(vec![Err(Error::Transport("connection refused".into()))]);
    let r = generate_report(
        &input(Strategy::Direct, Audience::Patient, 0.1),
        Some(&client),
    )
    .unwrap();
    assert_eq!(r.generator, Generator::Offline);
    assert!(r.warnings.iter().any(|w| w.contains("connection refused")));
}

#[test]
fn completion_without_a_feature_name_is_rejected() {
    let text = "RATIONALE: looks bad\nRECOMMENDATIONS:\n* rest\nDECISION: AD";
    assert!(parse_completion(text, &["ldl".into()]).is_none());
    assert!(parse_completion(GOOD, &["ldl".into()]).is_some());
}

#[test]
fn report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = render_offline(&input(Strategy::Direct, Audience::Patient, 0.83));
    r.save(dir.path(), "report").unwrap();
    assert_eq!(
        DiagnosticReport::load(&dir.path().join("report.json")).unwrap(),
        r
    );
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("Decision: **AD**"));
}

const NAME_POOL: [&str; 14] = [
    "cts:APOE:microglia",
    "cts:LDLR:astrocyte",
    "beta:TREM2",
    "se:CLU",
    "pval:BIN1",
    "age",
    "sex",
    "ldl",
    "homocysteine",
    "bmi",
    "apoe4_count",
    "eqtl_score",
    "mystery_marker",
    "hdl",
];

fn arb_feature() -> impl proptest::strategy::Strategy<Value = TopFeature> {
    (
        0..NAME_POOL.len(),
        -1e3f64..1e3,
        -5.0f64..5.0,
        prop::option::of((-100.0f64..100.0, 0.01f64..50.0)),
    )
        .prop_map(|(k, value, attribution, range)| TopFeature {
            name: NAME_POOL[k].to_string(),
            value,
            attribution,
            reference_range: range.map(|(low, w)| ReferenceRange {
                low,
                high: low + w,
                unit: "mg/dL".into(),
            }),
        })
}

fn arb_input() -> impl proptest::strategy::Strategy<Value = PromptInput> {
    (
        0.0f64..=1.0,
        prop::collection::vec(arb_feature(), 1..6),
        any::<bool>(),
        0usize..3,
    )
        .prop_map(|(p, top_features, patient, s)| PromptInput {
            predicted_label: Diagnosis::from_probability(p),
            probability: p,
            top_features,
            domain_knowledge: BTreeMap::from([("APOE".to_string(), "lipid transport".to_string())]),
            audience: if patient {
                Audience::Patient
            } else {
                Audience::Clinician
            },
            strategy: [
                Strategy::Direct,
                Strategy::StepByStep,
                Strategy::StepByStepDomain,
            ][s],
            population_stats: None,
            blind: false,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn offline_reports_keep_their_contract(i in arb_input()) {
        let r = render_offline(&i);
        prop_assert_eq!(r.decision, Diagnosis::from_probability(i.probability));
        prop_assert!(!r.recommendations.is_empty());
        let named = i.top_features.iter().any(|f| r.rationale.contains(&f.name));
        if i.audience == Audience::Patient {
            prop_assert!(!contains_blocked_term(&r.rationale));
            prop_assert!(r.recommendations.iter().all(|s| !contains_blocked_term(s)));
            let all_blocked = i.top_features.iter().all(|f| contains_blocked_term(&f.name));
            prop_assert!(named || all_blocked);
        } else {
            prop_assert!(named);
        }
        prop_assert_eq!(r.generator, Generator::Offline);
    }
}
