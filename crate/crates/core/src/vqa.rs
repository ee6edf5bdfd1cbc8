//! Harvesting the narrator's own questions and answers.
//!
//! Every `?` in the transcript is tied to the nearest stable chunk within
//! 45 s, the chunk caption is widened to cover the full question sentence,
//! and a completion client pulls out the answer the narrator gave.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::caption::{normalize_tokens, TimedWord};
use crate::error::{Error, Result};
use crate::llm::{complete_parsed, complete_with_retry, CompletionClient, CompletionParams};
use crate::prompts::{self, fill};

/// Maximum distance between a question mark and the chunk it is tied to.
pub const QUESTION_WINDOW_MS: f64 = 45_000.0;

/// Minimum Jaccard overlap for a returned question to count as one of ours.
pub const QUESTION_MATCH_JACCARD: f64 = 0.8;

pub const DEICTIC_TOKENS: &[&str] = &["this", "here", "image", "seen"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ImageDependent,
    GeneralKnowledge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaPair {
    pub id: String,
    pub chunk_id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
    pub category: Category,
    pub qtype: QType,
    #[serde(default)]
    pub verified: bool,
}

impl VqaPair {
    pub fn validate(&self) -> Result<()> {
        if !self.question.trim_end().ends_with('?') {
            return Err(Error::Validation(format!(
                "pair {}: question does not end with '?'",
                self.id
            )));
        }
        if self.answer.trim().is_empty() {
            return Err(Error::Validation(format!("pair {}: empty answer", self.id)));
        }
        Ok(())
    }
}

/// A sentence as a range of word indices into the transcript timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub words: Range<usize>,
    pub end_ms: f64,
    pub text: String,
}

impl Sentence {
    pub fn is_question(&self) -> bool {
        self.text.ends_with('?')
    }
}

/// Split at words ending in `.`, `?` or `!`; the words are whitespace
/// separated, so such a terminator is always followed by whitespace or the
/// end of the text.
pub fn split_sentences(timeline: &[TimedWord]) -> Vec<Sentence> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, w) in timeline.iter().enumerate() {
        let last = i + 1 == timeline.len();
        if w.word.ends_with(['.', '?', '!']) || last {
            out.push(Sentence {
                words: start..i + 1,
                end_ms: w.t_ms,
                text: join(&timeline[start..=i]),
            });
            start = i + 1;
        }
    }
    out
}

fn join(words: &[TimedWord]) -> String {
    words.iter().map(|w| w.word.as_str()).collect::<Vec<_>>().join(" ")
}

/// A chunk as seen by the question mapper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRef {
    pub chunk_id: String,
    pub image: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl ChunkRef {
    /// Distance from `t` to the chunk interval, zero inside it.
    pub fn distance_ms(&self, t: f64) -> f64 {
        let (s, e) = (self.start_ms as f64, self.end_ms as f64);
        if t < s {
            s - t
        } else if t > e {
            t - e
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionAssignment {
    pub question: String,
    /// Word-index range of the question sentence in the transcript.
    pub words: [usize; 2],
    pub t_ms: f64,
    pub chunk_id: String,
}

/// Tie each question mark to the nearest chunk within the window; exact ties
/// go to the earlier chunk. Question marks inside one sentence share it.
pub fn map_questions_to_chunks(timeline: &[TimedWord], chunks: &[ChunkRef]) -> Vec<QuestionAssignment> {
    let mut out = Vec::new();
    for s in split_sentences(timeline) {
        let marks = timeline[s.words.clone()]
            .iter()
            .map(|w| w.word.matches('?').count())
            .sum::<usize>();
        if marks == 0 || !s.is_question() {
            continue;
        }
        let best = chunks
            .iter()
            .map(|c| (c.distance_ms(s.end_ms), c))
            .filter(|(d, _)| *d <= QUESTION_WINDOW_MS)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.start_ms.cmp(&b.1.start_ms)));
        if let Some((_, c)) = best {
            out.push(QuestionAssignment {
                question: s.text.clone(),
                words: [s.words.start, s.words.end],
                t_ms: s.end_ms,
                chunk_id: c.chunk_id.clone(),
            });
        }
    }
    out
}

/// Word indices of the chunk's own caption, i.e. words timed in `[start, end)`.
pub fn caption_word_indices(timeline: &[TimedWord], chunk: &ChunkRef) -> BTreeSet<usize> {
    timeline
        .iter()
        .enumerate()
        .filter(|(_, w)| w.t_ms >= chunk.start_ms as f64 && w.t_ms < chunk.end_ms as f64)
        .map(|(i, _)| i)
        .collect()
}

/// Union the caption's words with the full sentences holding its questions.
pub fn expand_caption(
    timeline: &[TimedWord],
    caption_words: &BTreeSet<usize>,
    question_sentences: &[Range<usize>],
) -> String {
    let mut all = caption_words.clone();
    for s in question_sentences {
        all.extend(s.clone());
    }
    all.into_iter()
        .filter_map(|i| timeline.get(i))
        .map(|w| w.word.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = normalize_tokens(a).into_iter().collect();
    let b: BTreeSet<String> = normalize_tokens(b).into_iter().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

#[derive(Debug, Deserialize)]
struct ExtractedPair {
    question: String,
    answer: String,
}

fn parse_extracted(raw: &str) -> Result<Vec<ExtractedPair>> {
    let (Some(a), Some(b)) = (raw.find('['), raw.rfind(']')) else {
        return Err(Error::llm_format("no JSON array in extraction reply", raw));
    };
    if b < a {
        return Err(Error::llm_format("no JSON array in extraction reply", raw));
    }
    serde_json::from_str(&raw[a..=b]).map_err(|e| Error::llm_format(format!("extraction JSON: {e}"), raw))
}

pub fn qtype_of(answer: &str) -> QType {
    match normalize_tokens(answer).first().map(String::as_str) {
        Some("yes" | "no") => QType::Closed,
        _ => QType::Open,
    }
}

/// Ask the client for the narrator's answers. Returned questions that do not
/// match one of `questions` are dropped; kept pairs carry the transcript's
/// wording of the question.
pub fn extract_vqa_pairs(
    chunk: &ChunkRef,
    expanded_text: &str,
    questions: &[String],
    client: &dyn CompletionClient,
    params: &CompletionParams,
) -> Result<Vec<VqaPair>> {
    if questions.is_empty() {
        return Err(Error::EmptyInput("question sentences"));
    }
    let listed = questions.iter().map(|q| format!("- {q}")).collect::<Vec<_>>().join("\n");
    let prompt = fill(prompts::VQA_EXTRACT, &[("text", expanded_text), ("questions", &listed)]);
    let extracted = complete_parsed(client, &prompt, params, parse_extracted)?;

    let mut taken = vec![false; questions.len()];
    let mut out = Vec::new();
    for p in extracted {
        let answer = p.answer.trim();
        if answer.is_empty() {
            continue;
        }
        let best = questions
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, q)| (jaccard(&p.question, q), i))
            .filter(|(j, _)| *j >= QUESTION_MATCH_JACCARD)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        let Some((_, i)) = best else {
            log::debug!("dropping unlisted question {:?}", p.question);
            continue;
        };
        taken[i] = true;
        out.push(VqaPair {
            id: format!("{}_q{}", chunk.chunk_id, out.len()),
            chunk_id: chunk.chunk_id.clone(),
            image: chunk.image.clone(),
            question: questions[i].clone(),
            answer: answer.to_string(),
            category: fallback_category(&questions[i]),
            qtype: qtype_of(answer),
            verified: false,
        });
    }
    Ok(out)
}

pub fn fallback_category(question: &str) -> Category {
    if normalize_tokens(question).iter().any(|t| DEICTIC_TOKENS.contains(&t.as_str())) {
        Category::ImageDependent
    } else {
        Category::GeneralKnowledge
    }
}

fn parse_category(raw: &str) -> Option<Category> {
    let lower = raw.to_ascii_lowercase();
    let img = lower.find("image_dependent");
    let gen = lower.find("general_knowledge");
    match (img, gen) {
        (Some(a), Some(b)) => Some(if a < b { Category::ImageDependent } else { Category::GeneralKnowledge }),
        (Some(_), None) => Some(Category::ImageDependent),
        (None, Some(_)) => Some(Category::GeneralKnowledge),
        (None, None) => None,
    }
}

/// Client label when one is available and legible, keyword rule otherwise.
pub fn categorize_pair(
    pair: &VqaPair,
    client: Option<&dyn CompletionClient>,
    params: &CompletionParams,
) -> Category {
    let fallback = fallback_category(&pair.question);
    let Some(client) = client else {
        return fallback;
    };
    let prompt = fill(
        prompts::VQA_CATEGORY,
        &[("question", &pair.question), ("answer", &pair.answer)],
    );
    match complete_with_retry(client, &prompt, params) {
        Ok(raw) => parse_category(&raw).unwrap_or(fallback),
        Err(e) => {
            log::warn!("category client failed for {}: {e}; using keyword rule", pair.id);
            fallback
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VqaHarvest {
    pub assignments: Vec<QuestionAssignment>,
    pub pairs: Vec<VqaPair>,
    /// Chunks whose extraction reply could not be parsed.
    pub failed_chunks: Vec<String>,
}

/// Run the whole harvest for one video.
pub fn harvest_video(
    timeline: &[TimedWord],
    chunks: &[ChunkRef],
    client: &dyn CompletionClient,
    params: &CompletionParams,
) -> VqaHarvest {
    let assignments = map_questions_to_chunks(timeline, chunks);
    let mut pairs = Vec::new();
    let mut failed_chunks = Vec::new();
    for chunk in chunks {
        let mine: Vec<&QuestionAssignment> =
            assignments.iter().filter(|a| a.chunk_id == chunk.chunk_id).collect();
        if mine.is_empty() {
            continue;
        }
        let sentences: Vec<Range<usize>> = mine.iter().map(|a| a.words[0]..a.words[1]).collect();
        let text = expand_caption(timeline, &caption_word_indices(timeline, chunk), &sentences);
        let questions: Vec<String> = mine.iter().map(|a| a.question.clone()).collect();
        match extract_vqa_pairs(chunk, &text, &questions, client, params) {
            Ok(found) => pairs.extend(found.into_iter().map(|mut p| {
                p.category = categorize_pair(&p, Some(client), params);
                p
            })),
            Err(e) => {
                log::warn!("vqa extraction failed for {}: {e}", chunk.chunk_id);
                failed_chunks.push(chunk.chunk_id.clone());
            }
        }
    }
    VqaHarvest {
        assignments,
        pairs,
        failed_chunks,
    }
}
