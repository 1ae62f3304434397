use super::{Audience, PromptInput, RangePosition, Strategy, TopFeature};
use crate::error::{Error, Result};

/// Closing lines of every prompt. Completions are parsed against this
/// format.
pub const ANSWER_STANZA: &str = "Answer in exactly this format:\n\
RATIONALE: <your reasoning, naming at least one of the features above>\n\
RECOMMENDATIONS:\n\
* <one next step per line>\n\
DECISION: <AD|nonAD>\n";

fn preamble(input: &PromptInput) -> String {
    let mut s = String::new();
    match input.audience {
        Audience::Clinician => s.push_str(
            "You are assisting a clinician with an Alzheimer's disease (AD) assessment. \
             Use precise biomarker terminology and frame findings as differential risk.\n",
        ),
        Audience::Patient => s.push_str(
            "You are writing for a patient with no medical training about their Alzheimer's disease (AD) \
             assessment. Use plain language, avoid technical terms and give practical next steps.\n",
        ),
    }
    if !input.blind {
        s.push_str(&format!(
            "A neural network classifier predicted {} with probability of AD {:.3}.\n",
            input.predicted_label, input.probability
        ));
    }
    s.push_str(
        "Each feature below is listed with its value and its attribution: the signed contribution to the \
         classifier's AD score.\n",
    );
    s
}

fn range_text(f: &TopFeature) -> String {
    match (&f.reference_range, f.range_position()) {
        (Some(r), Some(pos)) => {
            let where_ = match pos {
                RangePosition::Below => "below range",
                RangePosition::Within => "within range",
                RangePosition::Above => "above range",
            };
            let unit = if r.unit.is_empty() {
                String::new()
            } else {
                format!(" {}", r.unit)
            };
            format!("; reference {} to {}{unit}, {where_}", r.low, r.high)
        }
        _ => String::new(),
    }
}

fn feature_line(f: &TopFeature) -> String {
    format!(
        "{} = {}; attribution {:+.4}{}",
        f.name,
        f.value,
        f.attribution,
        range_text(f)
    )
}

/// Step 1 of the step-by-step templates: AD and non-AD population means of
/// each top feature.
pub fn population_section(input: &PromptInput) -> Result<String> {
    let stats = input
        .population_stats
        .as_ref()
        .ok_or(Error::MissingStats(input.strategy.as_str()))?;
    let mut s = String::from(
        "Step 1. Population summary of each feature (mean in AD, mean in nonAD, sd):\n",
    );
    for f in &input.top_features {
        let p = stats.get(&f.name).ok_or_else(|| {
            Error::Invalid(format!("no population statistics for feature `{}`", f.name))
        })?;
        s.push_str(&format!(
            "  {}: AD {:.4}, nonAD {:.4}, sd {:.4}\n",
            f.name, p.mean_ad, p.mean_non_ad, p.sd
        ));
    }
    Ok(s)
}

/// Renders the prompt for `input.strategy`. The output is a pure function
/// of the input.
pub fn build_prompt(input: &PromptInput) -> Result<String> {
    input.validate()?;
    let mut s = preamble(input);
    s.push('\n');
    match input.strategy {
        Strategy::Direct => {
            s.push_str("Features ranked by contribution:\n");
            for f in &input.top_features {
                s.push_str(&format!("- {}\n", feature_line(f)));
            }
            s.push_str("\nDecide whether this case is AD or nonAD.\n");
        }
        Strategy::StepByStep | Strategy::StepByStepDomain => {
            if input.strategy == Strategy::StepByStepDomain {
                if input.domain_knowledge.is_empty() {
                    return Err(Error::MissingKnowledge(input.strategy.as_str()));
                }
                s.push_str("Domain knowledge:\n");
                for (key, snippet) in &input.domain_knowledge {
                    s.push_str(&format!("  [{key}] {snippet}\n"));
                }
                s.push('\n');
            }
            s.push_str(&population_section(input)?);
            s.push_str("\nStep 2. Compare this case with both groups, feature by feature:\n");
            for f in &input.top_features {
                s.push_str(&format!("  {}\n", feature_line(f)));
            }
            s.push_str(
                "\nStep 3. Weigh the comparisons and decide whether this case is AD or nonAD.\n",
            );
        }
    }
    s.push('\n');
    s.push_str(ANSWER_STANZA);
    Ok(s)
}
