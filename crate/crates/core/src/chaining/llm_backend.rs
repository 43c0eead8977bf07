use std::sync::OnceLock;

use regex::Regex;

use super::{ChainError, ChainingBackend, PredictionResult};
use crate::llm::LlmClient;
use crate::skill_kb::{normalize_verb, SkillId};

/// Renders the next-action prompt. The answer is constrained to the
/// vocabulary with the same wording as the extraction guardrail.
pub fn render_next_action_prompt(history: &[SkillId], task_label: &str, vocabulary: &[SkillId]) -> String {
    let join = |v: &[SkillId]| v.iter().map(SkillId::as_str).collect::<Vec<_>>().join(", ");
    format!(
        "The robot is performing the task: {task_label}. \
The actions completed so far, in order, are: {}. \
Reply with the single action word that should come next and nothing else. \
The action word must be from the action word list provided; do not display any action words that are not in the \
action word list provided. Here are the action words you can choose from: {}",
        join(history),
        join(vocabulary)
    )
}

fn reply_noise_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^\s*(?:\d+\s*[.):-]|[-*•])?\s*["'`*]*|["'`*.!]*\s*$"#).unwrap())
}

/// Asks the client for the next token. Replies that are not exactly one
/// vocabulary token are errors, never substitutes.
pub fn llm_predict_next(
    history: &[SkillId],
    task_label: &str,
    vocabulary: &[SkillId],
    client: &dyn LlmClient,
) -> Result<PredictionResult, ChainError> {
    if vocabulary.is_empty() {
        return Err(ChainError::InvalidConfig("vocabulary is empty".into()));
    }
    let reply = client.complete(&render_next_action_prompt(history, task_label, vocabulary))?;
    let lines: Vec<&str> = reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let line = match lines.as_slice() {
        [one] => *one,
        [] => return Err(ChainError::MalformedResponse("empty reply".into())),
        _ => return Err(ChainError::MalformedResponse(format!("expected one line, got {}", lines.len()))),
    };
    let word = normalize_verb(&reply_noise_re().replace_all(line, ""));
    if word.is_empty() {
        return Err(ChainError::MalformedResponse(format!("no token in `{line}`")));
    }
    match vocabulary.iter().find(|v| normalize_verb(v.as_str()) == word) {
        Some(tok) => Ok(PredictionResult::point_mass(vocabulary, tok)),
        None => Err(ChainError::HallucinatedToken(word)),
    }
}

/// Language-model next-action backend.
pub struct LlmChainer<C> {
    client: C,
    vocabulary: Vec<SkillId>,
    task_label: String,
}

impl<C: LlmClient> LlmChainer<C> {
    pub fn new(client: C, vocabulary: Vec<SkillId>, task_label: impl Into<String>) -> Self {
        LlmChainer { client, vocabulary, task_label: task_label.into() }
    }
}

impl<C: LlmClient> ChainingBackend for LlmChainer<C> {
    fn name(&self) -> &str {
        "llm"
    }

    fn vocabulary(&self) -> &[SkillId] {
        &self.vocabulary
    }

    fn predict_next(&self, history: &[SkillId]) -> Result<PredictionResult, ChainError> {
        llm_predict_next(history, &self.task_label, &self.vocabulary, &self.client)
    }
}
