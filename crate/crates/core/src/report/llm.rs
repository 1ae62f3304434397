use std::time::Duration;

use serde_json::json;

use super::offline::{contains_blocked_term, render_offline};
use super::prompt::build_prompt;
use super::{Audience, DiagnosticReport, Generator, PromptInput};
use crate::classifier::Diagnosis;
use crate::error::{Error, Result};

pub const ENV_LLM_URL: &str = "DIAGNO_LLM_URL";
pub const ENV_LLM_KEY: &str = "DIAGNO_LLM_KEY";
pub const DEFAULT_LLM_MODEL: &str = "gpt-4o-mini";
const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const STRICT_REMINDER: &str = "Your previous answer could not be parsed. Reply using exactly the answer format \
at the end of this message. Name at least one listed feature verbatim in the rationale, give at least one \
recommendation line starting with `* `, and make the last line `DECISION: AD` or `DECISION: nonAD`.\n\n";

/// Text completion backend. Implementations hold no mutable state shared
/// between requests.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Chat-completion client for an OpenAI-compatible HTTPS endpoint.
#[derive(Debug, Clone)]
pub struct HttpLlmClient {
    url: String,
    key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl HttpLlmClient {
    pub fn new(
        url: impl Into<String>,
        key: Option<String>,
        model: impl Into<String>,
        timeout: Duration,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpLlmClient {
            url: url.into(),
            key,
            model: model.into(),
            agent,
        }
    }

    /// Client configured from `DIAGNO_LLM_URL` and `DIAGNO_LLM_KEY`, or
    /// `None` when no endpoint is set.
    pub fn from_env(model: Option<&str>) -> Option<Self> {
        let url = std::env::var(ENV_LLM_URL)
            .ok()
            .filter(|u| !u.trim().is_empty())?;
        let key = std::env::var(ENV_LLM_KEY).ok().filter(|k| !k.is_empty());
        Some(Self::new(
            url,
            key,
            model.unwrap_or(DEFAULT_LLM_MODEL),
            DEFAULT_TIMEOUT,
        ))
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
    }
}

/// Decision from the last `DECISION:` stanza of a completion. Matching is
/// case-insensitive. `None` when there is no stanza or its answer is not
/// exactly one of AD or nonAD.
pub fn parse_llm_decision(completion: &str) -> Option<Diagnosis> {
    let lower = completion.to_ascii_lowercase();
    let at = lower.rfind("decision:")?;
    let rest = &completion[at + "decision:".len()..];
    let answer = rest.lines().next().unwrap_or("");
    let token = answer
        .trim()
        .trim_matches(|c: char| "*_`'\".,;:!()[]".contains(c))
        .trim();
    Diagnosis::parse(token).filter(|_| !token.chars().all(|c| c.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCompletion {
    pub rationale: String,
    pub recommendations: Vec<String>,
    pub decision: Diagnosis,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Rationale,
    Recommendations,
}

/// Splits a completion into rationale, recommendations and decision.
/// Fails unless all three are present and the rationale names one of
/// `feature_names` verbatim.
pub fn parse_completion(completion: &str, feature_names: &[String]) -> Option<ParsedCompletion> {
    let decision = parse_llm_decision(completion)?;
    let mut section = Section::None;
    let mut rationale = Vec::new();
    let mut recommendations = Vec::new();
    for line in completion.lines() {
        let trimmed = line.trim().trim_start_matches(['*', '#', '_']).trim();
        let upper = trimmed.to_ascii_uppercase();
        if let Some(rest) = upper
            .strip_prefix("RATIONALE:")
            .map(|_| &trimmed["RATIONALE:".len()..])
        {
            section = Section::Rationale;
            rationale.push(rest.trim().to_string());
        } else if upper.starts_with("RECOMMENDATIONS:") {
            section = Section::Recommendations;
            let rest = trimmed["RECOMMENDATIONS:".len()..].trim();
            if !rest.is_empty() {
                recommendations.push(rest.to_string());
            }
        } else if upper.starts_with("DECISION:") {
            section = Section::None;
        } else {
            match section {
                Section::Rationale => rationale.push(line.trim().to_string()),
                Section::Recommendations => {
                    let item = line
                        .trim()
                        .trim_start_matches(|c: char| {
                            c == '*' || c == '-' || c == '.' || c == ')' || c.is_ascii_digit()
                        })
                        .trim();
                    if !item.is_empty() {
                        recommendations.push(item.to_string());
                    }
                }
                Section::None => {}
            }
        }
    }
    let rationale = rationale.join("\n").trim().to_string();
    if rationale.is_empty() || recommendations.is_empty() {
        return None;
    }
    if !feature_names.iter().any(|n| rationale.contains(n.as_str())) {
        return None;
    }
    Some(ParsedCompletion {
        rationale,
        recommendations,
        decision,
    })
}

/// Report for `input`. Without a client this is the offline rendering.
/// With one, a failed request or unparseable completion is retried once
/// with a stricter format reminder, after which the offline rendering is
/// returned with the failures listed as warnings. Only invalid input is an
/// error.
pub fn generate_report(
    input: &PromptInput,
    client: Option<&dyn LlmClient>,
) -> Result<DiagnosticReport> {
    input.validate()?;
    let Some(client) = client else {
        return Ok(render_offline(input));
    };
    let prompt = build_prompt(input)?;
    let names: Vec<String> = input.top_features.iter().map(|f| f.name.clone()).collect();
    let mut warnings = Vec::new();
    for attempt in 1..=2 {
        let text = if attempt == 1 {
            prompt.clone()
        } else {
            format!("{STRICT_REMINDER}{prompt}")
        };
        match client.complete(&text) {
            Ok(completion) => match parse_completion(&completion, &names) {
                Some(parsed) => {
                    if input.audience == Audience::Patient
                        && (contains_blocked_term(&parsed.rationale)
                            || parsed
                                .recommendations
                                .iter()
                                .any(|r| contains_blocked_term(r)))
                    {
                        warnings.push("patient report contains technical terms".to_string());
                    }
                    return Ok(DiagnosticReport {
                        decision: parsed.decision,
                        rationale: parsed.rationale,
                        recommendations: parsed.recommendations,
                        audience: input.audience,
                        source_probability: input.probability,
                        generator: Generator::Llm,
                        warnings,
                    });
                }
                None => warnings.push(format!(
                    "attempt {attempt}: completion did not follow the answer format"
                )),
            },
            Err(e) => warnings.push(format!("attempt {attempt}: {e}")),
        }
    }
    log::warn!("LLM report failed twice, using the offline renderer");
    let mut report = render_offline(input);
    warnings.push("fell back to the offline renderer".to_string());
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok(report)
}
