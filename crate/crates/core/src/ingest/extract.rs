use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::clean::{parse_verb_list, split_steps, CleanConfig};
use super::{ActionSequence, IngestError, Transcript};
use crate::llm::LlmClient;
use crate::skill_kb::{canonicalize, normalize_verb, SkillLibrary};

/// Action-extraction prompt. `[ACTION_LIST]` and `[STEP_LIST]` are
/// substituted at render time.
pub const EXTRACTION_PROMPT: &str = "Process the following text by breaking it down into only action words. \
Map the instructions in the text to action words provided and display one action word per numbered step \
that summarizes that step. These action words should only be from the action word list provided. \
If you cannot map a given step to an action word found in the list, try to map synonyms of the instruction \
to an action word from the list. Either way, do not display any action words that are not in the action \
word list provided. Only assign one action word per step. Do not display headings for each step, only the \
action word. Here are the action words you can map to: [ACTION_LIST] Here is the text to process: [STEP_LIST]";

/// Largest tolerated relative difference between response lines and steps.
pub const DEFAULT_LINE_TOLERANCE: f64 = 0.2;

/// A backend's verdict for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Proposal {
    /// A verb the backend claims is in the action list.
    Verb(String),
    /// Output the backend produced but its own guardrail rejected.
    Rejected(String),
    /// No verb for this step.
    Missing,
}

/// Proposes one verb per step.
pub trait ExtractorBackend {
    fn propose(&self, steps: &[String], lib: &SkillLibrary) -> Result<Vec<Proposal>, IngestError>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unmapped {
    pub step_index: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub from: String,
    pub to: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub total_steps: usize,
    pub mapped_steps: usize,
    pub in_list_fraction: f64,
    pub unmapped: Vec<Unmapped>,
    pub synonym_substitutions: Vec<Substitution>,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub clean: CleanConfig,
    /// Collapse runs of the same skill (one step split across lines, or a
    /// synonym repeated) into one token.
    pub merge_repeats: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { clean: CleanConfig::default(), merge_repeats: true }
    }
}

pub fn extract_actions(
    transcript: &Transcript,
    backend: &dyn ExtractorBackend,
    lib: &SkillLibrary,
) -> Result<(ActionSequence, ExtractionReport), IngestError> {
    extract_actions_with(transcript, backend, lib, &IngestOptions::default())
}

/// Cleans the transcript, splits it into steps, asks the backend for one
/// verb per step and canonicalizes the verbs against the library. Verbs
/// that do not canonicalize to a non-sentinel skill are reported as
/// unmapped whatever the backend claims.
pub fn extract_actions_with(
    transcript: &Transcript,
    backend: &dyn ExtractorBackend,
    lib: &SkillLibrary,
    opts: &IngestOptions,
) -> Result<(ActionSequence, ExtractionReport), IngestError> {
    let cleaned = opts.clean.clean(&transcript.text)?;
    let steps = split_steps(&cleaned);
    let proposals = backend.propose(&steps, lib)?;
    if proposals.len() != steps.len() {
        return Err(IngestError::MalformedResponse(format!(
            "backend returned {} proposals for {} steps",
            proposals.len(),
            steps.len()
        )));
    }

    let mut tokens = Vec::new();
    let mut raw_verbs = Vec::new();
    let mut unmapped = Vec::new();
    let mut substitutions: Vec<Substitution> = Vec::new();
    let mut mapped = 0;
    for (i, (step, proposal)) in steps.iter().zip(proposals).enumerate() {
        let verb = match proposal {
            Proposal::Verb(v) => v,
            Proposal::Rejected(text) => {
                unmapped.push(Unmapped { step_index: i, text });
                continue;
            }
            Proposal::Missing => {
                unmapped.push(Unmapped { step_index: i, text: step.clone() });
                continue;
            }
        };
        let skill = canonicalize(&verb, lib).and_then(|id| lib.get(&id)).filter(|s| !s.is_sentinel);
        let Some(skill) = skill else {
            unmapped.push(Unmapped { step_index: i, text: verb });
            continue;
        };
        mapped += 1;
        let normalized = normalize_verb(&verb);
        if normalized != skill.canonical_name {
            let sub = Substitution { from: normalized.clone(), to: skill.canonical_name.clone() };
            if !substitutions.contains(&sub) {
                substitutions.push(sub);
            }
        }
        if opts.merge_repeats && tokens.last() == Some(&skill.id) {
            continue;
        }
        tokens.push(skill.id.clone());
        raw_verbs.push(normalized);
    }

    let total = steps.len();
    let report = ExtractionReport {
        total_steps: total,
        mapped_steps: mapped,
        in_list_fraction: if total == 0 { 0.0 } else { mapped as f64 / total as f64 },
        unmapped,
        synonym_substitutions: substitutions,
    };
    if tokens.is_empty() {
        return Err(IngestError::EmptySequence { unmapped: report.unmapped });
    }
    let seq = ActionSequence::new(tokens, raw_verbs, &transcript.source_id, &transcript.task_label)?;
    Ok((seq, report))
}

/// Keyword scan over canonical names and synonyms. Per step, the earliest
/// occurrence wins; at equal positions the longest term wins.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleBased;

fn word_pattern(term: &str) -> String {
    let mut words = term.split_whitespace();
    let first = words.next().unwrap_or_default();
    let inflected = match first.strip_suffix('e') {
        Some(stem) if !stem.is_empty() => format!("{}(?:e|es|ed|ing)", regex::escape(stem)),
        _ => {
            let last = first.chars().last().map(|c| regex::escape(&c.to_string())).unwrap_or_default();
            format!("{}(?:s|es|ed|ing|{last}ed|{last}ing)?", regex::escape(first))
        }
    };
    let rest: Vec<String> = words.map(regex::escape).collect();
    if rest.is_empty() {
        format!(r"\b{inflected}\b")
    } else {
        format!(r"\b{inflected}\s+{}\b", rest.join(r"\s+"))
    }
}

impl RuleBased {
    /// First in-list term in `step`, as the dictionary form.
    pub fn first_term(step: &str, terms: &[(String, Regex)]) -> Option<String> {
        terms
            .iter()
            .filter_map(|(term, re)| re.find(step).map(|m| (m.start(), std::cmp::Reverse(term.len()), term)))
            .min()
            .map(|(_, _, term)| term.clone())
    }

    pub fn matchers(lib: &SkillLibrary) -> Vec<(String, Regex)> {
        lib.action_words()
            .into_iter()
            .map(|term| {
                let re = Regex::new(&format!("(?i){}", word_pattern(&term))).expect("escaped pattern");
                (term, re)
            })
            .collect()
    }
}

impl ExtractorBackend for RuleBased {
    fn propose(&self, steps: &[String], lib: &SkillLibrary) -> Result<Vec<Proposal>, IngestError> {
        let terms = Self::matchers(lib);
        Ok(steps
            .iter()
            .map(|step| Self::first_term(step, &terms).map_or(Proposal::Missing, Proposal::Verb))
            .collect())
    }
}

/// Fills the extraction prompt template.
pub fn render_extraction_prompt(action_list: &[String], steps: &[String]) -> String {
    let actions = action_list.join(", ");
    let numbered = steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n");
    EXTRACTION_PROMPT.replace("[ACTION_LIST]", &actions).replace("[STEP_LIST]", &numbered)
}

fn list_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+\s*[.):-]|[-*•])\s*").unwrap())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LlmExtraction {
    /// One entry per step; `None` when the step produced no in-list verb.
    pub verbs: Vec<Option<String>>,
    /// Steps whose output was filtered out, with the offending text.
    pub unmapped: Vec<Unmapped>,
}

/// Sends the extraction prompt once and filters the reply against
/// `action_list` locally. A reply whose line count differs from the step
/// count by more than `tolerance` (relative) is rejected.
pub fn llm_extract(
    step_texts: &[String],
    action_list: &[String],
    client: &dyn LlmClient,
    tolerance: f64,
) -> Result<LlmExtraction, IngestError> {
    if action_list.is_empty() {
        return Err(IngestError::EmptyActionList);
    }
    if step_texts.is_empty() {
        return Ok(LlmExtraction { verbs: Vec::new(), unmapped: Vec::new() });
    }
    let reply = client.complete(&render_extraction_prompt(action_list, step_texts))?;
    let mut lines: Vec<String> = reply
        .lines()
        .map(|l| list_marker_re().replace(l, "").trim().to_owned())
        .filter(|l| !l.is_empty())
        .collect();
    if lines.len() == 1 && step_texts.len() > 1 {
        if let Ok(items) = parse_verb_list(&lines[0], None) {
            lines = items;
        }
    }
    let steps = step_texts.len();
    let mismatch = lines.len().abs_diff(steps) as f64 / steps as f64;
    if mismatch > tolerance {
        return Err(IngestError::MalformedResponse(format!(
            "{} lines for {} steps exceeds tolerance {tolerance}",
            lines.len(),
            steps
        )));
    }

    let allowed: BTreeSet<String> = action_list.iter().map(|a| normalize_verb(a)).collect();
    let mut verbs = Vec::with_capacity(steps);
    let mut unmapped = Vec::new();
    for (i, step) in step_texts.iter().enumerate() {
        match lines.get(i) {
            Some(line) => {
                let v = normalize_verb(line.trim_end_matches(['.', ',', ';']));
                if allowed.contains(&v) {
                    verbs.push(Some(v));
                } else {
                    verbs.push(None);
                    unmapped.push(Unmapped { step_index: i, text: line.clone() });
                }
            }
            None => {
                verbs.push(None);
                unmapped.push(Unmapped { step_index: i, text: step.clone() });
            }
        }
    }
    Ok(LlmExtraction { verbs, unmapped })
}

/// Extraction through a chat model with the library's action words.
pub struct LlmExtractor<C> {
    pub client: C,
    pub tolerance: f64,
}

impl<C: LlmClient> LlmExtractor<C> {
    pub fn new(client: C) -> Self {
        LlmExtractor { client, tolerance: DEFAULT_LINE_TOLERANCE }
    }
}

impl<C: LlmClient> ExtractorBackend for LlmExtractor<C> {
    fn propose(&self, steps: &[String], lib: &SkillLibrary) -> Result<Vec<Proposal>, IngestError> {
        let out = llm_extract(steps, &lib.action_words(), &self.client, self.tolerance)?;
        let mut proposals: Vec<Proposal> =
            out.verbs.into_iter().map(|v| v.map_or(Proposal::Missing, Proposal::Verb)).collect();
        for u in out.unmapped {
            proposals[u.step_index] = Proposal::Rejected(u.text);
        }
        Ok(proposals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Origin;
    use crate::llm::LlmError;
    use std::sync::Mutex;

    fn drywall() -> SkillLibrary {
        SkillLibrary::from_json(include_str!("../../fixtures/drywall.json")).unwrap()
    }

    fn transcript(text: &str) -> Transcript {
        Transcript {
            source_id: "t".into(),
            task_label: "drywall installation".into(),
            text: text.into(),
            origin: Origin::Article,
        }
    }

    struct Canned {
        reply: Result<String, ()>,
        prompts: Mutex<Vec<String>>,
    }

    impl Canned {
        fn new(reply: &str) -> Self {
            Canned { reply: Ok(reply.into()), prompts: Mutex::new(vec![]) }
        }
    }

    impl LlmClient for Canned {
        fn complete(&self, prompt: &str) -> Result<String, LlmError> {
            self.prompts.lock().unwrap().push(prompt.into());
            self.reply.clone().map_err(|_| LlmError::Unavailable("down".into()))
        }
    }

    #[test]
    fn drywall_fixture_maps_every_step() {
        let t = transcript(include_str!("../../fixtures/drywall_tutorial.txt"));
        let (seq, report) = extract_actions(&t, &RuleBased, &drywall()).unwrap();
        let tokens: Vec<&str> = seq.tokens.iter().map(|s| s.as_str()).collect();
        assert_eq!(tokens, ["prepare", "plan", "cut", "connect"]);
        // hand count: six numbered steps, each containing one library verb
        assert_eq!((report.total_steps, report.mapped_steps), (6, 6));
        assert_eq!(report.in_list_fraction, 1.0);
        assert!(report.unmapped.is_empty());
        assert_eq!(report.synonym_substitutions, vec![Substitution { from: "score".into(), to: "cut".into() }]);
        assert_eq!(seq.raw_verbs.len(), seq.tokens.len());
    }

    #[test]
    fn canonical_names_give_identity_sequence() {
        let (seq, report) = extract_actions(&transcript("prepare\nplan\ncut\nconnect"), &RuleBased, &drywall()).unwrap();
        assert_eq!(seq.tokens, ["prepare", "plan", "cut", "connect"].map(Into::into));
        assert_eq!(report.in_list_fraction, 1.0);
    }

    #[test]
    fn out_of_vocabulary_transcript_is_empty_sequence() {
        let err = extract_actions(&transcript("admire the wall"), &RuleBased, &drywall()).unwrap_err();
        match err {
            IngestError::EmptySequence { unmapped } => {
                assert_eq!(unmapped, vec![Unmapped { step_index: 0, text: "admire the wall".into() }]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rule_based_prefers_earliest_then_longest() {
        let lib = SkillLibrary::from_json(include_str!("../../fixtures/install_library.json")).unwrap();
        let terms = RuleBased::matchers(&lib);
        assert_eq!(RuleBased::first_term("Picking up the sheet, then install", &terms).as_deref(), Some("pick up"));
        assert_eq!(RuleBased::first_term("then installing and aligning", &terms).as_deref(), Some("install"));
        assert_eq!(RuleBased::first_term("hand over", &terms), None);
        let dw = RuleBased::matchers(&drywall());
        assert_eq!(RuleBased::first_term("Cutting the board", &dw).as_deref(), Some("cut"));
        assert_eq!(RuleBased::first_term("planning", &dw).as_deref(), Some("plan"));
        assert_eq!(RuleBased::first_term("prepared panels", &dw).as_deref(), Some("prepare"));
        assert_eq!(RuleBased::first_term("cutter", &dw), None);
    }

    #[test]
    fn prompt_contains_template_and_substitutions() {
        let p = render_extraction_prompt(&["cut".into(), "install".into()], &["Cut it".into(), "Hang it".into()]);
        assert!(p.contains("Only assign one action word per step"));
        assert!(p.contains("Here are the action words you can map to: cut, install Here is the text to process: 1. Cut it\n2. Hang it"));
        assert!(!p.contains("[ACTION_LIST]") && !p.contains("[STEP_LIST]"));
    }

    #[test]
    fn in_list_verbs_pass_unchanged() {
        let client = Canned::new("1. cut\n2. install");
        let out = llm_extract(&["a".into(), "b".into()], &["cut".into(), "install".into()], &client, 0.2).unwrap();
        assert_eq!(out.verbs, vec![Some("cut".to_string()), Some("install".to_string())]);
        assert!(out.unmapped.is_empty());
        assert_eq!(client.prompts.lock().unwrap().len(), 1);
    }

    #[test]
    fn hallucinated_verb_is_filtered() {
        let client = Canned::new("cut\nteleport\ninstall");
        let out = llm_extract(&["a".into(), "b".into(), "c".into()], &["cut".into(), "install".into()], &client, 0.2)
            .unwrap();
        assert_eq!(out.verbs[1], None);
        assert_eq!(out.unmapped, vec![Unmapped { step_index: 1, text: "teleport".into() }]);
    }

    #[test]
    fn delimited_single_line_reply_is_split() {
        let client = Canned::new("cut | install");
        let out = llm_extract(&["a".into(), "b".into()], &["cut".into(), "install".into()], &client, 0.2).unwrap();
        assert_eq!(out.verbs, vec![Some("cut".to_string()), Some("install".to_string())]);
    }

    #[test]
    fn line_count_mismatch_beyond_tolerance_is_malformed() {
        let steps: Vec<String> = (0..5).map(|i| format!("s{i}")).collect();
        let ok = Canned::new("cut\ncut\ncut\ncut");
        let out = llm_extract(&steps, &["cut".into()], &ok, 0.2).unwrap();
        assert_eq!(out.unmapped, vec![Unmapped { step_index: 4, text: "s4".into() }]);
        let bad = Canned::new("cut\ncut\ncut");
        assert!(matches!(llm_extract(&steps, &["cut".into()], &bad, 0.2), Err(IngestError::MalformedResponse(_))));
        assert!(matches!(llm_extract(&steps, &[], &bad, 0.2), Err(IngestError::EmptyActionList)));
    }

    #[test]
    fn unreachable_backend_surfaces() {
        let client = Canned { reply: Err(()), prompts: Mutex::new(vec![]) };
        let err = extract_actions(&transcript("cut it"), &LlmExtractor::new(&client), &drywall()).unwrap_err();
        assert!(matches!(err, IngestError::BackendUnavailable(_)));
    }

    #[test]
    fn llm_backend_substitutes_synonyms_and_reports_rejections() {
        let client = Canned::new("prepare\nscore\nteleport\ninstall");
        let t = transcript("1. get ready\n2. trim it\n3. beam it up\n4. hang it");
        let (seq, report) = extract_actions(&t, &LlmExtractor::new(&client), &drywall()).unwrap();
        assert_eq!(seq.tokens, ["prepare", "cut", "connect"].map(Into::into));
        assert_eq!(report.mapped_steps, 3);
        assert_eq!(report.in_list_fraction, 0.75);
        assert_eq!(report.unmapped, vec![Unmapped { step_index: 2, text: "teleport".into() }]);
        let prompt = &client.prompts.lock().unwrap()[0];
        assert!(prompt.contains("1. get ready\n2. trim it"));
        assert!(!prompt.contains("start,"));
    }
}
