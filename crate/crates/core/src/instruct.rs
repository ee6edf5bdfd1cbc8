//! Instruction-data generation: conversation, detailed description, complex
//! reasoning and the two-agent iterative abductive dialogue.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caption::CaptionRecord;
use crate::error::{Error, Result};
use crate::llm::{complete_parsed, fnv1a, splitmix64, CompletionClient, CompletionParams};
use crate::prompts::{self, detailed_questions, fill, EXHAUSTED_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    #[serde(rename = "human")]
    Human,
    #[serde(rename = "gpt")]
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "from")]
    pub speaker: Speaker,
    #[serde(rename = "value")]
    pub text: String,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Human,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaType {
    Conversation,
    DetailedDescription,
    ComplexReasoning,
    IterativeAbductive,
}

impl QaType {
    pub const ALL: [QaType; 4] = [
        QaType::Conversation,
        QaType::DetailedDescription,
        QaType::ComplexReasoning,
        QaType::IterativeAbductive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QaType::Conversation => "conversation",
            QaType::DetailedDescription => "detailed_description",
            QaType::ComplexReasoning => "complex_reasoning",
            QaType::IterativeAbductive => "iterative_abductive",
        }
    }

    pub fn needs_context(self) -> bool {
        matches!(self, QaType::ComplexReasoning | QaType::IterativeAbductive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructRecord {
    pub id: String,
    pub image: String,
    pub qa_type: QaType,
    pub conversations: Vec<Turn>,
}

impl InstructRecord {
    pub fn validate(&self) -> Result<()> {
        if self.conversations.is_empty() || self.conversations.len() % 2 != 0 {
            return Err(Error::Validation(format!(
                "record {} must hold complete human/gpt pairs",
                self.id
            )));
        }
        for (i, t) in self.conversations.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Assistant };
            if t.speaker != expected {
                return Err(Error::Validation(format!(
                    "record {}: turn {i} breaks human/gpt alternation",
                    self.id
                )));
            }
        }
        let pairs = self.conversations.len() / 2;
        if self.qa_type == QaType::Conversation && !(3..=4).contains(&pairs) {
            return Err(Error::Validation(format!(
                "conversation record {} has {pairs} pairs, expected 3 or 4",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseContext {
    pub video_id: String,
    pub diagnosis: String,
    #[serde(default)]
    pub facts: Vec<String>,
    pub single_wsi: bool,
}

/// One captioned image to generate from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructSource {
    pub id: String,
    pub video_id: String,
    pub image: String,
    /// Grounded caption when available, the plain caption otherwise.
    pub caption: String,
}

impl From<&CaptionRecord> for InstructSource {
    fn from(r: &CaptionRecord) -> Self {
        InstructSource {
            id: r.chunk_id.clone(),
            video_id: r.video_id.clone(),
            image: r.image.clone(),
            caption: r
                .grounded_caption
                .clone()
                .filter(|g| !g.trim().is_empty())
                .unwrap_or_else(|| r.caption.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Conversation,
    DetailedDescription,
    ComplexReasoning,
    AbductiveStudent,
    AbductiveAssistant,
}

impl PromptKind {
    fn needs_context(self) -> bool {
        matches!(self, PromptKind::ComplexReasoning | PromptKind::AbductiveAssistant)
    }
}

#[derive(Deserialize)]
struct CaseContextReply {
    diagnosis: String,
    #[serde(default)]
    facts: Vec<String>,
}

fn parse_case_context(raw: &str) -> Result<CaseContextReply> {
    let (Some(a), Some(b)) = (raw.find('{'), raw.rfind('}')) else {
        return Err(Error::llm_format("no JSON object in case-context reply", raw));
    };
    if b < a {
        return Err(Error::llm_format("no JSON object in case-context reply", raw));
    }
    let reply: CaseContextReply = serde_json::from_str(&raw[a..=b])
        .map_err(|e| Error::llm_format(format!("case-context JSON: {e}"), raw))?;
    if reply.diagnosis.trim().is_empty() {
        return Err(Error::llm_format("case-context reply has an empty diagnosis", raw));
    }
    Ok(reply)
}

/// Ask the client for the case-level diagnosis and supporting facts.
pub fn extract_case_context(
    video_id: &str,
    transcript: &str,
    single_wsi: bool,
    client: &dyn CompletionClient,
    params: &CompletionParams,
) -> Result<CaseContext> {
    let prompt = fill(prompts::CASE_CONTEXT, &[("transcript", transcript)]);
    let reply = complete_parsed(client, &prompt, params, parse_case_context)?;
    Ok(CaseContext {
        video_id: video_id.to_string(),
        diagnosis: reply.diagnosis.trim().to_string(),
        facts: reply.facts.into_iter().map(|f| f.trim().to_string()).collect(),
        single_wsi,
    })
}

/// Index into the detailed-description question list for a given seed.
pub fn detailed_question_index(seed: u64, n_questions: usize) -> usize {
    (splitmix64(seed) % n_questions as u64) as usize
}

fn bullet_list(items: &[String]) -> String {
    if items.is_empty() {
        "(none)".into()
    } else {
        items.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n")
    }
}

/// Dialogue history as it is shown to the agents.
pub fn render_history(history: &[Turn]) -> String {
    if history.is_empty() {
        return "(none)".into();
    }
    history
        .iter()
        .map(|t| match t.speaker {
            Speaker::Human => format!("User: {}", t.text),
            Speaker::Assistant => format!("GPT: {}", t.text),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_prompt(
    kind: PromptKind,
    source: &InstructSource,
    context: Option<&CaseContext>,
    history: &[Turn],
    seed: u64,
) -> Result<String> {
    let ctx = match (kind.needs_context(), context) {
        (true, None) => {
            return Err(Error::Config(format!(
                "{kind:?} prompt for {} needs a case context",
                source.id
            )))
        }
        (true, Some(c)) if !c.single_wsi => {
            return Err(Error::Config(format!(
                "{kind:?} prompt for {}: video {} is not flagged single_wsi",
                source.id, c.video_id
            )))
        }
        (_, c) => c,
    };
    let caption = source.caption.as_str();
    Ok(match kind {
        PromptKind::Conversation => fill(prompts::CONVERSATION, &[("caption", caption)]),
        PromptKind::DetailedDescription => {
            let questions = detailed_questions();
            let q = questions[detailed_question_index(seed, questions.len())];
            fill(
                prompts::DETAILED_DESCRIPTION,
                &[("question", q), ("caption", caption)],
            )
        }
        PromptKind::ComplexReasoning => {
            let ctx = ctx.expect("checked above");
            fill(
                prompts::COMPLEX_REASONING,
                &[
                    ("diagnosis", &ctx.diagnosis),
                    ("facts", &bullet_list(&ctx.facts)),
                    ("caption", caption),
                ],
            )
        }
        PromptKind::AbductiveStudent => fill(
            prompts::ABDUCTIVE_STUDENT,
            &[("caption", caption), ("history", &render_history(history))],
        ),
        PromptKind::AbductiveAssistant => {
            let ctx = ctx.expect("checked above");
            fill(
                prompts::ABDUCTIVE_ASSISTANT,
                &[
                    ("sentinel", EXHAUSTED_SENTINEL),
                    ("diagnosis", &ctx.diagnosis),
                    ("facts", &bullet_list(&ctx.facts)),
                    ("caption", caption),
                    ("history", &render_history(history)),
                ],
            )
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedReply {
    QaPairs(Vec<(String, String)>),
    Description(String),
    Student { abduction: String, facts_used: String },
    Assistant { comments: String, hint: String, exhausted: bool },
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let head = line.get(..label.len())?;
    head.eq_ignore_ascii_case(label).then(|| line[label.len()..].trim())
}

fn parse_qa_pairs(raw: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut question: Option<String> = None;
    let mut in_answer = false;
    for line in raw.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(q) = strip_label(line, "question:") {
            if question.is_some() {
                return Err(Error::llm_format("question without an answer", raw));
            }
            question = Some(q.to_string());
            in_answer = false;
        } else if let Some(a) = strip_label(line, "answer:") {
            let q = question
                .take()
                .ok_or_else(|| Error::llm_format("answer without a question", raw))?;
            pairs.push((q, a.to_string()));
            in_answer = true;
        } else if let Some(q) = question.as_mut() {
            q.push(' ');
            q.push_str(line);
        } else if in_answer {
            let last = pairs.last_mut().expect("in_answer implies a pair");
            last.1.push(' ');
            last.1.push_str(line);
        }
    }
    if question.is_some() {
        return Err(Error::llm_format("trailing question without an answer", raw));
    }
    if pairs.iter().any(|(q, a)| q.is_empty() || a.is_empty()) {
        return Err(Error::llm_format("empty question or answer", raw));
    }
    Ok(pairs)
}

/// Value of a `{Name: value}` field, matched case-insensitively. The value
/// runs to the first `}` that closes the field (followed by `,`, `]` or end).
fn bracket_field(raw: &str, name: &str) -> Option<String> {
    let lower = raw.to_ascii_lowercase();
    let key = format!("{{{}:", name.to_ascii_lowercase());
    let start = lower.find(&key)? + key.len();
    let body = &raw[start..];
    let end = body.char_indices().find_map(|(i, c)| {
        (c == '}'
            && body[i + 1..]
                .trim_start()
                .chars()
                .next()
                .is_none_or(|n| n == ',' || n == ']' || n == '{'))
        .then_some(i)
    })?;
    let value = body[..end].trim();
    (!value.is_empty()).then(|| value.to_string())
}

pub fn parse_llm_reply(kind: PromptKind, raw: &str) -> Result<ParsedReply> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(Error::llm_format("empty reply", raw));
    }
    match kind {
        PromptKind::Conversation => {
            let pairs = parse_qa_pairs(text)?;
            if !(3..=4).contains(&pairs.len()) {
                return Err(Error::llm_format(
                    format!("conversation needs 3 to 4 pairs, got {}", pairs.len()),
                    raw,
                ));
            }
            Ok(ParsedReply::QaPairs(pairs))
        }
        PromptKind::ComplexReasoning => {
            let mut pairs = parse_qa_pairs(text)?;
            if pairs.is_empty() {
                return Err(Error::llm_format("no question/answer pair", raw));
            }
            pairs.truncate(1);
            Ok(ParsedReply::QaPairs(pairs))
        }
        PromptKind::DetailedDescription => Ok(ParsedReply::Description(text.to_string())),
        PromptKind::AbductiveStudent => {
            let abduction = bracket_field(text, "Abduction")
                .ok_or_else(|| Error::llm_format("missing {Abduction: ...}", raw))?;
            let facts_used = bracket_field(text, "Facts Used")
                .ok_or_else(|| Error::llm_format("missing {Facts Used: ...}", raw))?;
            Ok(ParsedReply::Student {
                abduction,
                facts_used,
            })
        }
        PromptKind::AbductiveAssistant => {
            let exhausted = text.contains(EXHAUSTED_SENTINEL);
            let clean = text.replace(EXHAUSTED_SENTINEL, "");
            let comments = bracket_field(&clean, "Comments")
                .ok_or_else(|| Error::llm_format("missing {Comments: ...}", raw))?;
            let hint = bracket_field(&clean, "Hint")
                .ok_or_else(|| Error::llm_format("missing {Hint: ...}", raw))?;
            Ok(ParsedReply::Assistant {
                comments,
                hint,
                exhausted,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    DiagnosisReached,
    EvidenceExhausted,
    CapReached,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub record: InstructRecord,
    pub cap: usize,
    pub exchanges: usize,
    pub stop: StopReason,
}

pub fn diagnosis_matches(abduction: &str, diagnosis: &str) -> bool {
    let d = diagnosis.trim().to_lowercase();
    !d.is_empty() && abduction.to_lowercase().contains(&d)
}

fn dialogue_turn(
    kind: PromptKind,
    source: &InstructSource,
    context: &CaseContext,
    history: &[Turn],
    client: &dyn CompletionClient,
    params: &CompletionParams,
) -> std::result::Result<ParsedReply, String> {
    let prompt = build_prompt(kind, source, Some(context), history, 0).map_err(|e| e.to_string())?;
    complete_parsed(client, &prompt, params, |raw| parse_llm_reply(kind, raw))
        .map_err(|e| e.to_string())
}

/// Student and assistant agents take turns until the student names the
/// diagnosis, the assistant reports the patch exhausted, or the drawn cap of
/// 2 to 4 exchanges is reached.
pub fn run_abductive_dialogue<R: Rng + ?Sized>(
    source: &InstructSource,
    context: &CaseContext,
    client: &dyn CompletionClient,
    params: &CompletionParams,
    rng: &mut R,
) -> Result<Dialogue> {
    if !context.single_wsi {
        return Err(Error::Config(format!(
            "video {} is not flagged single_wsi",
            context.video_id
        )));
    }
    let cap = rng.gen_range(2..=4usize);
    let mut turns: Vec<Turn> = Vec::with_capacity(cap * 2);
    let mut stop = StopReason::CapReached;
    let mut exchanges = 0;
    while exchanges < cap {
        let student = dialogue_turn(PromptKind::AbductiveStudent, source, context, &turns, client, params)
            .map_err(|reason| Error::DialogueAborted {
                reason,
                partial: turns.clone(),
            })?;
        let ParsedReply::Student { abduction, facts_used } = student else {
            unreachable!("student prompt parses to a student reply")
        };
        let solved = diagnosis_matches(&abduction, &context.diagnosis);
        turns.push(Turn::human(format!(
            "[{{Abduction: {abduction}}}, {{Facts Used: {facts_used}}}]"
        )));

        let assistant = dialogue_turn(PromptKind::AbductiveAssistant, source, context, &turns, client, params)
            .map_err(|reason| Error::DialogueAborted {
                reason,
                partial: turns.clone(),
            })?;
        let ParsedReply::Assistant { comments, hint, exhausted } = assistant else {
            unreachable!("assistant prompt parses to an assistant reply")
        };
        turns.push(Turn::assistant(format!(
            "[{{Comments: {comments}}}, {{Hint: {hint}}}]"
        )));
        exchanges += 1;

        if solved {
            stop = StopReason::DiagnosisReached;
            break;
        }
        if exhausted {
            stop = StopReason::EvidenceExhausted;
            break;
        }
    }
    Ok(Dialogue {
        record: InstructRecord {
            id: record_id(&source.id, QaType::IterativeAbductive),
            image: source.image.clone(),
            qa_type: QaType::IterativeAbductive,
            conversations: turns,
        },
        cap,
        exchanges,
        stop,
    })
}

pub fn record_id(source_id: &str, qa_type: QaType) -> String {
    format!("{source_id}_{}", qa_type.name())
}

/// Seed for one (record type, source) job, independent of scheduling.
pub fn job_seed(seed: u64, source_id: &str, qa_type: QaType) -> u64 {
    splitmix64(seed ^ fnv1a(record_id(source_id, qa_type).as_bytes()))
}

fn pairs_to_turns(pairs: Vec<(String, String)>) -> Vec<Turn> {
    pairs
        .into_iter()
        .flat_map(|(q, a)| [Turn::human(q), Turn::assistant(a)])
        .collect()
}

/// Generate one record of the given type for one source.
pub fn generate_one(
    qa_type: QaType,
    source: &InstructSource,
    context: Option<&CaseContext>,
    client: &dyn CompletionClient,
    params: &CompletionParams,
    seed: u64,
) -> Result<InstructRecord> {
    let seed = job_seed(seed, &source.id, qa_type);
    let single = |kind: PromptKind| -> Result<(String, ParsedReply)> {
        let prompt = build_prompt(kind, source, context, &[], seed)?;
        let parsed = complete_parsed(client, &prompt, params, |raw| parse_llm_reply(kind, raw))?;
        Ok((prompt, parsed))
    };
    let conversations = match qa_type {
        QaType::Conversation | QaType::ComplexReasoning => {
            let kind = if qa_type == QaType::Conversation {
                PromptKind::Conversation
            } else {
                PromptKind::ComplexReasoning
            };
            match single(kind)?.1 {
                ParsedReply::QaPairs(p) => pairs_to_turns(p),
                other => unreachable!("unexpected reply {other:?}"),
            }
        }
        QaType::DetailedDescription => {
            let (prompt, reply) = single(PromptKind::DetailedDescription)?;
            let ParsedReply::Description(d) = reply else {
                unreachable!("description prompt parses to a description")
            };
            let question = prompts::section(&prompt, "request").unwrap_or_default();
            vec![Turn::human(question.trim()), Turn::assistant(d)]
        }
        QaType::IterativeAbductive => {
            let ctx = context.ok_or_else(|| {
                Error::Config(format!("abductive dialogue for {} needs a case context", source.id))
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_abductive_dialogue(source, ctx, client, params, &mut rng)?
                .record
                .conversations
        }
    };
    let record = InstructRecord {
        id: record_id(&source.id, qa_type),
        image: source.image.clone(),
        qa_type,
        conversations,
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Quotas {
    pub conversation: usize,
    pub detailed_description: usize,
    pub complex_reasoning: usize,
    pub iterative_abductive: usize,
}

impl Default for Quotas {
    fn default() -> Self {
        Quotas {
            conversation: 1000,
            detailed_description: 1000,
            complex_reasoning: 1000,
            iterative_abductive: 1000,
        }
    }
}

impl Quotas {
    pub fn zero() -> Self {
        Quotas {
            conversation: 0,
            detailed_description: 0,
            complex_reasoning: 0,
            iterative_abductive: 0,
        }
    }

    pub fn get(&self, t: QaType) -> usize {
        match t {
            QaType::Conversation => self.conversation,
            QaType::DetailedDescription => self.detailed_description,
            QaType::ComplexReasoning => self.complex_reasoning,
            QaType::IterativeAbductive => self.iterative_abductive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub source_id: String,
    pub qa_type: QaType,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub records: Vec<InstructRecord>,
    pub skipped: Vec<Skip>,
    /// Sources left out of reasoning types for lack of a single-WSI context.
    pub ineligible: usize,
}

/// Fill each type's quota by walking the sources in order. Completion calls
/// run `in_flight` at a time; results are taken in source order, so the
/// output depends only on the inputs and the seed.
pub fn generate_records(
    sources: &[InstructSource],
    contexts: &HashMap<String, CaseContext>,
    client: &dyn CompletionClient,
    params: &CompletionParams,
    quotas: &Quotas,
    seed: u64,
    in_flight: usize,
) -> Result<GenerationReport> {
    let in_flight = in_flight.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(in_flight)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut report = GenerationReport::default();
    for qa_type in QaType::ALL {
        let quota = quotas.get(qa_type);
        if quota == 0 {
            continue;
        }
        let eligible: Vec<(&InstructSource, Option<&CaseContext>)> = sources
            .iter()
            .filter_map(|s| {
                let ctx = contexts.get(&s.video_id).filter(|c| c.single_wsi);
                if qa_type.needs_context() && ctx.is_none() {
                    report.ineligible += 1;
                    None
                } else {
                    Some((s, ctx))
                }
            })
            .collect();
        let mut produced = 0;
        for batch in eligible.chunks(in_flight) {
            if produced >= quota {
                break;
            }
            let results: Vec<Result<InstructRecord>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|(s, ctx)| generate_one(qa_type, s, *ctx, client, params, seed))
                    .collect()
            });
            for ((s, _), result) in batch.iter().zip(results) {
                if produced >= quota {
                    break;
                }
                match result {
                    Ok(r) => {
                        report.records.push(r);
                        produced += 1;
                    }
                    Err(e) => {
                        log::warn!("skipping {} for {}: {e}", qa_type.name(), s.id);
                        report.skipped.push(Skip {
                            source_id: s.id.clone(),
                            qa_type,
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
    }
    report.records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{FnClient, StubClient};
    use crate::prompts::{section, task_of, Task};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn source(id: &str) -> InstructSource {
        InstructSource {
            id: id.into(),
            video_id: "vid".into(),
            image: format!("{id}.png"),
            caption: "the epidermis shows [0.10, 0.20, 0.30, 0.40] atypical melanocytes".into(),
        }
    }

    fn ctx() -> CaseContext {
        CaseContext {
            video_id: "vid".into(),
            diagnosis: "melanoma".into(),
            facts: vec!["atypical melanocytes".into(), "pagetoid spread".into()],
            single_wsi: true,
        }
    }

    fn params() -> CompletionParams {
        CompletionParams::default()
    }

    #[test]
    fn case_context_parses() {
        let c = FnClient(|_: &str| Ok(r#"Sure: {"diagnosis":"X","facts":["a","b"]}"#.to_string()));
        let ctx = extract_case_context("v", "text", true, &c, &params()).unwrap();
        assert_eq!(ctx.diagnosis, "X");
        assert_eq!(ctx.facts, vec!["a", "b"]);
        let c = FnClient(|_: &str| Ok(r#"{"diagnosis":"X","facts":[]}"#.to_string()));
        assert!(extract_case_context("v", "t", true, &c, &params()).unwrap().facts.is_empty());
    }

    #[test]
    fn case_context_prose_is_format_error_after_retry() {
        let calls = AtomicUsize::new(0);
        let c = FnClient(|_: &str| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("I think it is melanoma.".to_string())
        });
        let err = extract_case_context("v", "t", true, &c, &params()).unwrap_err();
        assert!(matches!(err, Error::LlmFormat { ref raw, .. } if raw.contains("melanoma")));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn prompts_are_deterministic_and_need_context() {
        let s = source("c1");
        let a = build_prompt(PromptKind::DetailedDescription, &s, None, &[], 9).unwrap();
        let b = build_prompt(PromptKind::DetailedDescription, &s, None, &[], 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            build_prompt(PromptKind::ComplexReasoning, &s, None, &[], 0),
            Err(Error::Config(_))
        ));
        let p = build_prompt(PromptKind::ComplexReasoning, &s, Some(&ctx()), &[], 0).unwrap();
        assert_eq!(task_of(&p), Some(Task::ComplexReasoning));
        assert_eq!(section(&p, "diagnosis").unwrap(), "melanoma");
        assert!(section(&p, "facts").unwrap().contains("- pagetoid spread"));
        let mut multi = ctx();
        multi.single_wsi = false;
        assert!(build_prompt(PromptKind::AbductiveAssistant, &s, Some(&multi), &[], 0).is_err());
    }

    #[test]
    fn detailed_question_follows_seed_hash() {
        let qs = detailed_questions();
        for seed in [0u64, 1, 7, 12345] {
            // splitmix64(0) = 0xe220a8397b1dcdaf, so seed 0 picks index 0xe220a8397b1dcdaf % 10
            let expected = (splitmix64(seed) % qs.len() as u64) as usize;
            let p = build_prompt(PromptKind::DetailedDescription, &source("c"), None, &[], seed).unwrap();
            assert_eq!(section(&p, "request").unwrap(), qs[expected]);
        }
        assert_eq!(detailed_question_index(0, 10), (0xe220_a839_7b1d_cdafu64 % 10) as usize);
        assert_eq!(detailed_question_index(0, 10), 5);
    }

    #[test]
    fn student_and_assistant_formats() {
        assert_eq!(
            parse_llm_reply(
                PromptKind::AbductiveStudent,
                "User: [{Abduction: melanoma}, {Facts Used: atypical melanocytes}]"
            )
            .unwrap(),
            ParsedReply::Student {
                abduction: "melanoma".into(),
                facts_used: "atypical melanocytes".into()
            }
        );
        assert_eq!(
            parse_llm_reply(
                PromptKind::AbductiveAssistant,
                "  GPT: [{comments: plausible}, {HINT: check margins}]\n"
            )
            .unwrap(),
            ParsedReply::Assistant {
                comments: "plausible".into(),
                hint: "check margins".into(),
                exhausted: false
            }
        );
        let r = parse_llm_reply(
            PromptKind::AbductiveAssistant,
            &format!("GPT: [{{Comments: ok}}, {{Hint: look elsewhere {EXHAUSTED_SENTINEL}}}]"),
        )
        .unwrap();
        assert!(matches!(r, ParsedReply::Assistant { exhausted: true, ref hint, .. } if hint == "look elsewhere"));
        assert!(parse_llm_reply(PromptKind::AbductiveStudent, "User: [{Abduction: x}]").is_err());
        assert!(parse_llm_reply(PromptKind::Conversation, "").is_err());
    }

    #[test]
    fn conversation_pair_count_enforced() {
        let two = "Question: a?\nAnswer: b\nQuestion: c?\nAnswer: d";
        assert!(parse_llm_reply(PromptKind::Conversation, two).is_err());
        let three = format!("{two}\nQuestion: e?\nAnswer: f\ncontinued");
        let ParsedReply::QaPairs(p) = parse_llm_reply(PromptKind::Conversation, &three).unwrap() else {
            panic!()
        };
        assert_eq!(p[2], ("e?".to_string(), "f continued".to_string()));
    }

    fn scripted(solve_on: usize, exhaust_on: usize) -> impl CompletionClient {
        let student_calls = AtomicUsize::new(0);
        let assistant_calls = AtomicUsize::new(0);
        FnClient(move |p: &str| {
            Ok(match task_of(p) {
                Some(Task::AbductiveStudent) => {
                    let n = student_calls.fetch_add(1, Ordering::SeqCst) + 1;
                    let guess = if n == solve_on { "Malignant MELANOMA" } else { "a nevus" };
                    format!("User: [{{Abduction: {guess}}}, {{Facts Used: cells}}]")
                }
                _ => {
                    let n = assistant_calls.fetch_add(1, Ordering::SeqCst) + 1;
                    let tail = if n == exhaust_on { EXHAUSTED_SENTINEL } else { "" };
                    format!("GPT: [{{Comments: fine}}, {{Hint: look {tail}}}]")
                }
            })
        })
    }

    #[test]
    fn dialogue_stops_on_diagnosis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = run_abductive_dialogue(&source("c"), &ctx(), &scripted(1, 0), &params(), &mut rng).unwrap();
        assert_eq!(d.exchanges, 1);
        assert_eq!(d.stop, StopReason::DiagnosisReached);
        assert_eq!(d.record.conversations.len(), 2);
    }

    #[test]
    fn dialogue_stops_on_exhaustion() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = run_abductive_dialogue(&source("c"), &ctx(), &scripted(0, 2), &params(), &mut rng)
                .unwrap();
            assert_eq!(d.exchanges, 2);
            assert_eq!(d.stop, StopReason::EvidenceExhausted);
        }
    }

    #[test]
    fn dialogue_runs_to_replayed_cap() {
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = run_abductive_dialogue(&source("c"), &ctx(), &scripted(0, 0), &params(), &mut rng)
                .unwrap();
            let mut replay = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(d.cap, replay.gen_range(2..=4usize));
            assert_eq!(d.exchanges, d.cap);
            d.record.validate().unwrap();
        }
    }

    #[test]
    fn history_reaches_next_prompt() {
        let seen = std::sync::Mutex::new(Vec::new());
        let c = FnClient(|p: &str| {
            seen.lock().unwrap().push(section(p, "history").unwrap());
            Ok(match task_of(p) {
                Some(Task::AbductiveStudent) => "User: [{Abduction: nevus}, {Facts Used: x}]".to_string(),
                _ => "GPT: [{Comments: c}, {Hint: h}]".to_string(),
            })
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        run_abductive_dialogue(&source("c"), &ctx(), &c, &params(), &mut rng).unwrap();
        let seen = seen.into_inner().unwrap();
        assert_eq!(seen[0], "(none)");
        assert!(seen[1].starts_with("User: [{Abduction: nevus}"));
        assert!(seen[2].contains("GPT: [{Comments: c}, {Hint: h}]"));
    }

    #[test]
    fn dialogue_abort_keeps_partial() {
        let calls = AtomicUsize::new(0);
        let c = FnClient(|p: &str| {
            let n = calls.fetch_add(1, Ordering::SeqCst);
            if n >= 2 {
                return Err(Error::Client("down".into()));
            }
            Ok(match task_of(p) {
                Some(Task::AbductiveStudent) => "User: [{Abduction: nevus}, {Facts Used: x}]".to_string(),
                _ => "GPT: [{Comments: c}, {Hint: h}]".to_string(),
            })
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match run_abductive_dialogue(&source("c"), &ctx(), &c, &params(), &mut rng) {
            Err(Error::DialogueAborted { partial, .. }) => assert_eq!(partial.len(), 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 4, "one retry for the failing turn");
    }

    #[test]
    fn quota_and_skips() {
        let sources: Vec<_> = (1..=5).map(|i| source(&format!("c{i}"))).collect();
        let contexts = HashMap::from([("vid".to_string(), ctx())]);
        let quotas = Quotas {
            conversation: 2,
            ..Quotas::zero()
        };
        let stub = StubClient::new(3);
        let r = generate_records(&sources, &contexts, &stub, &params(), &quotas, 3, 2).unwrap();
        assert_eq!(r.records.len(), 2);
        assert!(r.records.iter().all(|x| x.qa_type == QaType::Conversation));

        let failing = FnClient(|p: &str| {
            if section(p, "caption").unwrap().contains("third") {
                Err(Error::Client("boom".into()))
            } else {
                StubClient::new(3).complete(p, &CompletionParams::default())
            }
        });
        let mut sources = sources;
        sources[2].caption = "the third patch".into();
        let quotas = Quotas {
            conversation: 10,
            ..Quotas::zero()
        };
        let r = generate_records(&sources, &contexts, &failing, &params(), &quotas, 3, 4).unwrap();
        assert_eq!(r.records.len(), 4);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].source_id, "c3");
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let sources: Vec<_> = (0..6).map(|i| source(&format!("c{i}"))).collect();
        let contexts = HashMap::from([("vid".to_string(), ctx())]);
        let run = |jobs| {
            generate_records(&sources, &contexts, &StubClient::new(7), &params(), &Quotas::default(), 7, jobs)
                .unwrap()
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 24);
        for r in &a.records {
            let line = serde_json::to_string(r).unwrap();
            let back: InstructRecord = serde_json::from_str(&line).unwrap();
            assert_eq!(&back, r);
            assert_eq!(serde_json::to_string(&back).unwrap(), line);
        }
        assert!(serde_json::to_string(&a.records[0]).unwrap().contains(r#""from":"human""#));
    }

    #[test]
    fn reasoning_needs_single_wsi_context() {
        let sources = vec![source("c0")];
        let mut c = ctx();
        c.single_wsi = false;
        let contexts = HashMap::from([("vid".to_string(), c)]);
        let r = generate_records(&sources, &contexts, &StubClient::new(1), &params(), &Quotas::default(), 1, 1)
            .unwrap();
        assert!(r.records.iter().all(|x| !x.qa_type.needs_context()));
        assert_eq!(r.ineligible, 2);
    }

    #[test]
    fn caps_are_uniform_over_1000_dialogues() {
        let stub = StubClient::new(11);
        let mut bins = [0usize; 5];
        for i in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let d = run_abductive_dialogue(&source(&format!("c{i}")), &ctx(), &stub, &params(), &mut rng)
                .unwrap();
            assert!((1..=4).contains(&d.exchanges));
            assert!(d.exchanges <= d.cap);
            bins[d.cap] += 1;
        }
        for cap in 2..=4 {
            let share = bins[cap] as f64 / 1000.0;
            assert!((share - 1.0 / 3.0).abs() <= 0.05, "cap {cap}: {share}");
        }
    }
}
