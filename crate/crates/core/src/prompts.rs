//! Prompt templates shipped as text assets under `assets/prompts/`.
//!
//! Every template starts with a `### task: <name>` line and lays its inputs
//! out in `### <section>` blocks closed by `### end`, which lets replies be
//! routed and lets the offline stub read its inputs back. Editing a template
//! changes generated bytes; bump its `### version:` line and refresh the
//! golden outputs.

use std::collections::HashMap;

pub const CONVERSATION: &str = include_str!("../assets/prompts/conversation.txt");
pub const DETAILED_DESCRIPTION: &str = include_str!("../assets/prompts/detailed_description.txt");
pub const COMPLEX_REASONING: &str = include_str!("../assets/prompts/complex_reasoning.txt");
pub const ABDUCTIVE_STUDENT: &str = include_str!("../assets/prompts/abductive_student.txt");
pub const ABDUCTIVE_ASSISTANT: &str = include_str!("../assets/prompts/abductive_assistant.txt");
pub const CASE_CONTEXT: &str = include_str!("../assets/prompts/case_context.txt");
pub const VQA_EXTRACT: &str = include_str!("../assets/prompts/vqa_extract.txt");
pub const VQA_CATEGORY: &str = include_str!("../assets/prompts/vqa_category.txt");
pub const JUDGE: &str = include_str!("../assets/prompts/judge.txt");

const DETAILED_QUESTIONS_RAW: &str = include_str!("../assets/prompts/detailed_questions.txt");

/// Marker the assistant agent appends once the patch has nothing more to give.
pub const EXHAUSTED_SENTINEL: &str = "<<EVIDENCE_EXHAUSTED>>";

/// Pre-compiled requests for detailed descriptions.
pub fn detailed_questions() -> Vec<&'static str> {
    DETAILED_QUESTIONS_RAW
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Conversation,
    DetailedDescription,
    ComplexReasoning,
    AbductiveStudent,
    AbductiveAssistant,
    CaseContext,
    VqaExtract,
    VqaCategory,
    Judge,
}

impl Task {
    pub const ALL: [Task; 9] = [
        Task::Conversation,
        Task::DetailedDescription,
        Task::ComplexReasoning,
        Task::AbductiveStudent,
        Task::AbductiveAssistant,
        Task::CaseContext,
        Task::VqaExtract,
        Task::VqaCategory,
        Task::Judge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Conversation => "conversation",
            Task::DetailedDescription => "detailed_description",
            Task::ComplexReasoning => "complex_reasoning",
            Task::AbductiveStudent => "abductive_student",
            Task::AbductiveAssistant => "abductive_assistant",
            Task::CaseContext => "case_context",
            Task::VqaExtract => "vqa_extract",
            Task::VqaCategory => "vqa_category",
            Task::Judge => "judge",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            Task::Conversation => CONVERSATION,
            Task::DetailedDescription => DETAILED_DESCRIPTION,
            Task::ComplexReasoning => COMPLEX_REASONING,
            Task::AbductiveStudent => ABDUCTIVE_STUDENT,
            Task::AbductiveAssistant => ABDUCTIVE_ASSISTANT,
            Task::CaseContext => CASE_CONTEXT,
            Task::VqaExtract => VQA_EXTRACT,
            Task::VqaCategory => VQA_CATEGORY,
            Task::Judge => JUDGE,
        }
    }
}

pub fn task_of(prompt: &str) -> Option<Task> {
    let first = prompt.lines().next()?.trim();
    let name = first.strip_prefix("### task:")?.trim();
    Task::ALL.into_iter().find(|t| t.name() == name)
}

/// Body of a `### <name>` block, up to the next `### ` line.
pub fn section(prompt: &str, name: &str) -> Option<String> {
    let header = format!("### {name}");
    let mut lines = prompt.lines();
    lines.find(|l| l.trim_end() == header)?;
    let body: Vec<&str> = lines.take_while(|l| !l.starts_with("### ")).collect();
    Some(body.join("\n"))
}

/// Replace `{name}` placeholders in one pass over the template. Braces in
/// substituted values are never re-expanded; unknown names stay literal.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let map: HashMap<&str, &str> = values.iter().copied().collect();
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        match close.map(|c| &after[..c]) {
            Some(name)
                if !name.is_empty()
                    && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
                    && map.contains_key(name) =>
            {
                out.push_str(map[name]);
                rest = &after[name.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
