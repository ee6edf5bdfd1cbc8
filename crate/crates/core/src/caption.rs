//! Transcript alignment: per-word timestamps, per-chunk captions and the
//! caption length filter.

use serde::{Deserialize, Serialize};

use crate::chunk::StableChunk;

/// Shortest and longest caption (in words) kept by [`filter_captions`].
pub const MIN_CAPTION_WORDS: usize = 20;
pub const MAX_CAPTION_WORDS: usize = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub video_id: String,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub word: String,
    pub t_ms: f64,
}

/// The one tokenizer used for captions, cluster word counts and VQA.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_ascii_whitespace()
}

/// Lowercased tokens with punctuation stripped; tokens left empty are dropped.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .map(|t| {
            t.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn word_count(text: &str) -> usize {
    tokenize(text).count()
}

/// Word `i` of `n` in a segment lands at `start + (i + 0.5)·(end − start)/n`.
pub fn word_timeline(segments: &[Segment]) -> Vec<TimedWord> {
    let mut out = Vec::new();
    for seg in segments {
        let words: Vec<&str> = tokenize(&seg.text).collect();
        let n = words.len() as f64;
        let span = seg.end_ms.saturating_sub(seg.start_ms) as f64;
        for (i, w) in words.into_iter().enumerate() {
            out.push(TimedWord {
                word: w.to_string(),
                t_ms: seg.start_ms as f64 + (i as f64 + 0.5) * span / n,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedChunk {
    pub chunk: StableChunk,
    pub caption: String,
    pub word_timeline: Vec<TimedWord>,
}

impl CaptionedChunk {
    pub fn word_count(&self) -> usize {
        self.word_timeline.len()
    }
}

/// Words timed inside `[start_ms, end_ms)`.
pub fn words_in_window(timeline: &[TimedWord], start_ms: u64, end_ms: u64) -> Vec<TimedWord> {
    timeline
        .iter()
        .filter(|w| w.t_ms >= start_ms as f64 && w.t_ms < end_ms as f64)
        .cloned()
        .collect()
}

pub fn caption_for_chunk(transcript: &Transcript, chunk: &StableChunk) -> CaptionedChunk {
    let words = words_in_window(
        &word_timeline(&transcript.segments),
        chunk.start_ms,
        chunk.end_ms,
    );
    CaptionedChunk {
        chunk: chunk.clone(),
        caption: join_words(&words),
        word_timeline: words,
    }
}

pub fn join_words(words: &[TimedWord]) -> String {
    words
        .iter()
        .map(|w| w.word.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn caption_length_ok(words: usize) -> bool {
    (MIN_CAPTION_WORDS..=MAX_CAPTION_WORDS).contains(&words)
}

pub fn filter_captions(pairs: Vec<CaptionedChunk>) -> Vec<CaptionedChunk> {
    pairs
        .into_iter()
        .filter(|p| caption_length_ok(p.word_count()))
        .collect()
}

/// One line of the caption JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub chunk_id: String,
    pub video_id: String,
    pub image: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounded_caption: Option<String>,
    pub word_count: usize,
}
