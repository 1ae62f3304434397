use super::{Audience, DiagnosticReport, Generator, PromptInput, RangePosition, TopFeature};
use crate::classifier::{Diagnosis, FeatureKind};

/// Technical terms that must not appear in patient reports. Matching is
/// case-insensitive on substrings.
pub const PATIENT_BLOCKLIST: [&str; 12] = [
    "eqtl",
    "logit",
    "sigmoid",
    "attribution",
    "integrated gradients",
    "posterior",
    "z-score",
    "standardized",
    "mcmc",
    "deconvolution",
    "ldl",
    "homocysteine",
];

/// Phrase used when a feature has no safe plain-language wording.
const GENERIC_RESULT: &str = "one of your test results";

pub fn contains_blocked_term(text: &str) -> bool {
    let lower = text.to_lowercase();
    PATIENT_BLOCKLIST.iter().any(|t| lower.contains(t))
}

fn covariate_phrase(name: &str) -> Option<&'static str> {
    Some(match name.to_lowercase().as_str() {
        "age" => "your age",
        "sex" => "your sex",
        "bmi" => "your body weight for your height",
        "ldl" | "cholesterol" | "total_cholesterol" => "your cholesterol level",
        "hdl" => "your 'good' cholesterol level",
        "triglycerides" | "triglyceride" => "the level of fats in your blood",
        "homocysteine" => "a blood marker linked to B vitamins",
        "apoe4_count" => "how many copies of the APOE4 gene variant you carry",
        "education_years" => "your years of schooling",
        "batch" => "a laboratory processing detail",
        "glucose" => "your blood sugar",
        "systolic_bp" | "blood_pressure" => "your blood pressure",
        "mmse" | "moca" => "your memory test score",
        _ => return None,
    })
}

/// Plain-language wording of a feature name. The flag is true when the
/// name had no lexicon entry and is passed through or replaced.
pub fn patient_phrase(name: &str) -> (String, bool) {
    let (phrase, unmapped) = match FeatureKind::of(name) {
        FeatureKind::Cts => {
            let mut parts = name.splitn(3, ':').skip(1);
            match (parts.next(), parts.next()) {
                (Some(g), Some(c)) if !g.is_empty() && !c.is_empty() => (
                    format!("how active the {g} gene is in your {c} brain cells"),
                    false,
                ),
                _ => (name.to_string(), true),
            }
        }
        FeatureKind::EqtlBeta | FeatureKind::EqtlSe | FeatureKind::EqtlPval => {
            let gene = name.split_once(':').map_or("", |(_, g)| g);
            let what = match FeatureKind::of(name) {
                FeatureKind::EqtlBeta => "a genetic marker that affects",
                _ => "how certain we are about a genetic marker that affects",
            };
            (format!("{what} the {gene} gene"), false)
        }
        FeatureKind::Covariate => match covariate_phrase(name) {
            Some(p) => (p.to_string(), false),
            None => (name.to_string(), true),
        },
    };
    if contains_blocked_term(&phrase) {
        (GENERIC_RESULT.to_string(), true)
    } else {
        (phrase, unmapped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Lipid,
    Homocysteine,
    Genetic,
}

fn tags(name: &str) -> Vec<Tag> {
    let lower = name.to_lowercase();
    let mut out = Vec::new();
    if ["ldl", "hdl", "cholesterol", "triglyceride", "lipid", "apoe"]
        .iter()
        .any(|k| lower.contains(k))
    {
        out.push(Tag::Lipid);
    }
    if lower.contains("homocysteine") {
        out.push(Tag::Homocysteine);
    }
    if lower.contains("apoe4")
        || matches!(
            FeatureKind::of(name),
            FeatureKind::EqtlBeta | FeatureKind::EqtlSe | FeatureKind::EqtlPval
        )
    {
        out.push(Tag::Genetic);
    }
    out
}

fn recommendation(tag: Tag, audience: Audience) -> &'static str {
    match (tag, audience) {
        (Tag::Lipid, Audience::Clinician) => {
            "Order a fasting lipid panel and review lipid management, given the APOE and lipid findings."
        }
        (Tag::Lipid, Audience::Patient) => {
            "Ask your doctor about checking your cholesterol and about lipid management through diet, exercise or medicine."
        }
        (Tag::Homocysteine, Audience::Clinician) => {
            "Measure plasma homocysteine with vitamin B12 and folate and correct any deficiency."
        }
        (Tag::Homocysteine, Audience::Patient) => "Ask your doctor whether you need a blood test for B vitamins.",
        (Tag::Genetic, Audience::Clinician) => {
            "Offer genetic counselling to discuss APOE genotype and eQTL findings."
        }
        (Tag::Genetic, Audience::Patient) => {
            "Consider talking with a genetic counsellor about what your genes mean for you and your family."
        }
    }
}

fn decision_recommendation(decision: Diagnosis, audience: Audience) -> &'static str {
    match (decision, audience) {
        (Diagnosis::Ad, Audience::Clinician) => {
            "Refer for specialist cognitive assessment with neuropsychological testing and amyloid or tau biomarkers."
        }
        (Diagnosis::Ad, Audience::Patient) => "Book a follow-up visit with a memory specialist.",
        (Diagnosis::NonAd, Audience::Clinician) => {
            "Continue routine monitoring with repeat cognitive screening in 12 months."
        }
        (Diagnosis::NonAd, Audience::Patient) => {
            "Keep up regular check-ups for monitoring, with a memory check again in about a year."
        }
    }
}

fn recommendations(input: &PromptInput, decision: Diagnosis) -> Vec<String> {
    let mut seen = Vec::new();
    for f in &input.top_features {
        for t in tags(&f.name) {
            if !seen.contains(&t) {
                seen.push(t);
            }
        }
    }
    let mut out = vec![decision_recommendation(decision, input.audience).to_string()];
    for t in [Tag::Lipid, Tag::Homocysteine, Tag::Genetic] {
        if seen.contains(&t) {
            out.push(recommendation(t, input.audience).to_string());
        }
    }
    out
}

fn clinician_line(f: &TopFeature) -> String {
    let direction = if f.attribution > 0.0 {
        "raised the AD score"
    } else if f.attribution < 0.0 {
        "lowered the AD score"
    } else {
        "left the AD score unchanged"
    };
    let range = match (&f.reference_range, f.range_position()) {
        (Some(r), Some(pos)) => {
            let where_ = match pos {
                RangePosition::Below => "below",
                RangePosition::Within => "within",
                RangePosition::Above => "above",
            };
            let unit = if r.unit.is_empty() {
                String::new()
            } else {
                format!(" {}", r.unit)
            };
            format!(
                ", {where_} the reference range {} to {}{unit}",
                r.low, r.high
            )
        }
        _ => String::new(),
    };
    format!(
        "{} = {}{range} {direction} (attribution {:+.4}, magnitude {:.4})",
        f.name,
        f.value,
        f.attribution,
        f.attribution.abs()
    )
}

fn patient_line(f: &TopFeature, warnings: &mut Vec<String>) -> (String, bool) {
    let (phrase, flagged) = patient_phrase(&f.name);
    if flagged {
        warnings.push(format!(
            "no plain-language wording for feature `{}`",
            f.name
        ));
    }
    let named = !contains_blocked_term(&f.name) && phrase != f.name;
    let label = if named {
        format!("{phrase} (recorded as {})", f.name)
    } else {
        phrase.clone()
    };
    let range = match f.range_position() {
        Some(RangePosition::Below) => ", which is below the usual range,",
        Some(RangePosition::Above) => ", which is above the usual range,",
        Some(RangePosition::Within) => ", which is in the usual range,",
        None => "",
    };
    let direction = if f.attribution > 0.0 {
        "points toward a higher chance of Alzheimer's disease"
    } else if f.attribution < 0.0 {
        "points toward a lower chance of Alzheimer's disease"
    } else {
        "did not change the result"
    };
    let mentions_name = named || phrase == f.name;
    (format!("{label}{range} {direction}"), mentions_name)
}

/// Deterministic report from the input alone. The decision is AD when the
/// probability is at least 0.5.
///
/// Patient rationales quote a feature name only when it is free of
/// blocklisted terms; if no top feature qualifies, a warning says so.
fn odds_phrase(p: f64) -> String {
    match (p * 100.0).round() as u32 {
        0 => "fewer than 1 in 100".into(),
        100 => "more than 99 in 100".into(),
        n => format!("about {n} in 100"),
    }
}

pub fn render_offline(input: &PromptInput) -> DiagnosticReport {
    let decision = Diagnosis::from_probability(input.probability);
    let mut warnings = Vec::new();
    let rationale = match input.audience {
        Audience::Clinician => {
            let lines: Vec<String> = input.top_features.iter().map(clinician_line).collect();
            format!(
                "Classifier probability of AD is {:.3} against a decision threshold of 0.5, giving {}. \
                 Leading contributors by attribution magnitude: {}.",
                input.probability,
                decision,
                lines.join("; ")
            )
        }
        Audience::Patient => {
            let outlook = match decision {
                Diagnosis::Ad => "a higher",
                Diagnosis::NonAd => "a lower",
            };
            let mut any_named = false;
            let mut lines = Vec::new();
            for f in &input.top_features {
                let (line, named) = patient_line(f, &mut warnings);
                any_named |= named;
                lines.push(line);
            }
            if !any_named {
                warnings.push("every top feature name contains a technical term and is described without its name".into());
            }
            format!(
                "Your results suggest {outlook} chance of Alzheimer's disease ({}). \
                 The results that mattered most: {}.",
                odds_phrase(input.probability),
                lines.join("; ")
            )
        }
    };
    DiagnosticReport {
        decision,
        rationale,
        recommendations: recommendations(input, decision),
        audience: input.audience,
        source_probability: input.probability,
        generator: Generator::Offline,
        warnings,
    }
}
