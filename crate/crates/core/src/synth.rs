//! Scripted synthetic videos with exact ground truth.
//!
//! A [`FixtureScript`] lays out static backgrounds, motion bursts, cursor
//! gestures and distractor regions on a timeline, plus the narration spoken
//! over it. Rendering is a pure function of the script, and the ground truth
//! is derived from the script alone, never from pipeline code.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caption::{tokenize, Segment, Transcript};
use crate::chunk::{chunk_id, ChunkRecord};
use crate::cluster::{BBox, GroundedCaption};
use crate::cursor::{Rect, TraceRecord};
use crate::error::{Error, Result};
use crate::frame::{frame_file_name, write_frame_meta, Frame, FrameMeta, FrameRate, FrameStream};
use crate::llm::splitmix64;
use crate::vqa::QuestionAssignment;

/// Static segments at least this long are expected to become chunks.
pub const MIN_CHUNK_MS: u64 = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum CursorPath {
    /// Full turns of `period_frames` frames, starting at angle zero.
    Circle { cx: f64, cy: f64, radius: f64, period_frames: u32 },
    /// One straight pass over the event's frames.
    Line { x1: f64, y1: f64, x2: f64, y2: f64 },
}

impl CursorPath {
    /// Position at frame `j` of an `n`-frame event.
    pub fn position(&self, j: u64, n: u64) -> (u32, u32) {
        let (x, y) = match *self {
            CursorPath::Circle { cx, cy, radius, period_frames } => {
                let a = std::f64::consts::TAU * (j % period_frames.max(1) as u64) as f64
                    / period_frames.max(1) as f64;
                (cx + radius * a.cos(), cy + radius * a.sin())
            }
            CursorPath::Line { x1, y1, x2, y2 } => {
                let f = if n <= 1 { 0.0 } else { j as f64 / (n - 1) as f64 };
                (x1 + (x2 - x1) * f, y1 + (y2 - y1) * f)
            }
        };
        (x.round().max(0.0) as u32, y.round().max(0.0) as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "snake_case")]
pub enum DistractorStyle {
    /// Checkerboard of ±amplitude that flips every frame.
    Flicker { amplitude: u8 },
    /// Black and white 4-px checkerboard that flips every frame.
    Face,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    StaticBg { seed: u64 },
    MotionBurst { seed: u64 },
    CursorPath {
        path: CursorPath,
        /// Narration sentences (indices into the transcript plan) that
        /// describe this gesture.
        #[serde(default)]
        sentences: Vec<usize>,
    },
    Distractor { rect: [u32; 4], #[serde(flatten)] style: DistractorStyle },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedSentence {
    pub text: String,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    pub has_question_mark: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureScript {
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub duration_ms: u64,
    pub events: Vec<Event>,
    pub transcript_plan: Vec<PlannedSentence>,
}

const CURSOR_CENTER: u8 = 255;
const CURSOR_RING: u8 = 220;

fn sentence(text: &str, t_start_ms: u64, t_end_ms: u64) -> PlannedSentence {
    PlannedSentence {
        text: text.into(),
        t_start_ms,
        t_end_ms,
        has_question_mark: text.contains('?'),
    }
}

fn ev(t_start_ms: u64, t_end_ms: u64, kind: EventKind) -> Event {
    Event {
        t_start_ms,
        t_end_ms,
        kind,
    }
}

fn circle(cx: f64, cy: f64, radius: f64, period_frames: u32, sentences: Vec<usize>) -> EventKind {
    EventKind::CursorPath {
        path: CursorPath::Circle { cx, cy, radius, period_frames },
        sentences,
    }
}

fn line(x1: f64, y1: f64, x2: f64, y2: f64, sentences: Vec<usize>) -> EventKind {
    EventKind::CursorPath {
        path: CursorPath::Line { x1, y1, x2, y2 },
        sentences,
    }
}

impl FixtureScript {
    /// 60 s at 640×360, 30 fps: static segments of 5, 3, 2 and 8 s between
    /// motion bursts, cursor gestures in the three long segments (three
    /// separate gestures in the last one) and narration with questions.
    pub fn bundled() -> Self {
        use EventKind::{MotionBurst, StaticBg};
        FixtureScript {
            video_id: "fixture".into(),
            width: 640,
            height: 360,
            fps: 30.0,
            duration_ms: 60_000,
            events: vec![
                ev(0, 5_000, StaticBg { seed: 1 }),
                ev(5_000, 15_000, MotionBurst { seed: 2 }),
                ev(15_000, 18_000, StaticBg { seed: 3 }),
                ev(18_000, 28_000, MotionBurst { seed: 4 }),
                ev(28_000, 30_000, StaticBg { seed: 5 }),
                ev(30_000, 40_000, MotionBurst { seed: 6 }),
                ev(40_000, 48_000, StaticBg { seed: 7 }),
                ev(48_000, 60_000, MotionBurst { seed: 8 }),
                ev(0, 5_000, circle(320.0, 180.0, 50.0, 120, vec![0, 1])),
                ev(15_000, 18_000, line(200.0, 250.0, 440.0, 250.0, vec![2])),
                ev(40_200, 42_600, circle(150.0, 100.0, 40.0, 72, vec![7])),
                ev(42_800, 45_200, circle(320.0, 200.0, 60.0, 72, vec![8])),
                ev(45_400, 47_800, line(420.0, 250.0, 560.0, 320.0, vec![9])),
            ],
            transcript_plan: vec![
                sentence("Here we are looking at skin with nests of basaloid cells below.", 0, 2_600),
                sentence("What do we see at the periphery of these nests?", 2_600, 4_800),
                sentence(
                    "Moving to the right the stroma around the tumor shows retraction artifact and scattered chronic inflammatory cells with some mucin.",
                    15_000,
                    17_800,
                ),
                sentence("Is this pattern typical of basal cell carcinoma?", 21_000, 23_000),
                sentence("Yes, the palisading and retraction are classic features.", 23_000, 26_000),
                sentence("Now let us zoom out to see the whole lesion.", 31_000, 34_000),
                sentence("The slide is scanned at low power first.", 35_000, 37_000),
                sentence(
                    "On the upper left the epidermis is intact with a thin layer of surface keratin.",
                    40_200,
                    42_600,
                ),
                sentence(
                    "In the middle large tumor islands push into the dermis with clear peripheral nuclear palisading.",
                    42_800,
                    45_200,
                ),
                sentence(
                    "At the bottom right you can see the deep margin which looks free of tumor.",
                    45_400,
                    47_800,
                ),
                sentence("Do you know what this lesion is called?", 52_000, 55_000),
                sentence("It is a nodular basal cell carcinoma.", 55_000, 58_000),
            ],
        }
    }

    /// 10 s static scene with a circling cursor, a faint flicker patch and a
    /// high-contrast animated "face" region that must be masked out.
    pub fn cursor_with_distractors() -> Self {
        FixtureScript {
            video_id: "cursor".into(),
            width: 640,
            height: 360,
            fps: 30.0,
            duration_ms: 10_000,
            events: vec![
                ev(0, 10_000, EventKind::StaticBg { seed: 11 }),
                ev(0, 10_000, circle(300.0, 200.0, 80.0, 120, vec![])),
                ev(
                    0,
                    10_000,
                    EventKind::Distractor {
                        rect: [40, 40, 120, 120],
                        style: DistractorStyle::Flicker { amplitude: 8 },
                    },
                ),
                ev(
                    0,
                    10_000,
                    EventKind::Distractor {
                        rect: [480, 40, 600, 160],
                        style: DistractorStyle::Face,
                    },
                ),
            ],
            transcript_plan: vec![],
        }
    }

    pub fn frame_rate(&self) -> Result<FrameRate> {
        FrameRate::from_fps(self.fps)
    }

    pub fn n_frames(&self) -> Result<u64> {
        Ok(self.frame_rate()?.index_at(self.duration_ms))
    }

    /// Frame index range `[first, end)` covered by `[t_start, t_end)`.
    fn frame_span(rate: FrameRate, t_start_ms: u64, t_end_ms: u64) -> (u64, u64) {
        (rate.index_at(t_start_ms), rate.index_at(t_end_ms))
    }

    pub fn validate(&self) -> Result<()> {
        let rate = self.frame_rate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("fixture frame size must be positive".into()));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.t_start_ms >= e.t_end_ms || e.t_end_ms > self.duration_ms {
                return Err(Error::Validation(format!(
                    "event {i} [{}, {}) lies outside the {} ms video",
                    e.t_start_ms, e.t_end_ms, self.duration_ms
                )));
            }
            match &e.kind {
                EventKind::CursorPath { path, sentences } => {
                    let (a, b) = Self::frame_span(rate, e.t_start_ms, e.t_end_ms);
                    for j in 0..b - a {
                        let (x, y) = path.position(j, b - a);
                        if x < 1 || y < 1 || x + 1 >= self.width || y + 1 >= self.height {
                            return Err(Error::Validation(format!(
                                "event {i}: cursor at ({x}, {y}) leaves the frame"
                            )));
                        }
                    }
                    if let Some(s) = sentences.iter().find(|&&s| s >= self.transcript_plan.len()) {
                        return Err(Error::Validation(format!("event {i}: unknown sentence {s}")));
                    }
                }
                EventKind::Distractor { rect, .. } => {
                    if rect[0] >= rect[2] || rect[1] >= rect[3] || rect[2] > self.width || rect[3] > self.height {
                        return Err(Error::Validation(format!("event {i}: bad distractor rect {rect:?}")));
                    }
                }
                _ => {}
            }
        }
        for (i, s) in self.transcript_plan.iter().enumerate() {
            if s.t_start_ms >= s.t_end_ms || s.t_end_ms > self.duration_ms {
                return Err(Error::Validation(format!("sentence {i} lies outside the video")));
            }
            if s.has_question_mark != s.text.contains('?') {
                return Err(Error::Validation(format!(
                    "sentence {i}: has_question_mark disagrees with its text"
                )));
            }
        }
        Ok(())
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            video_id: self.video_id.clone(),
            segments: self
                .transcript_plan
                .iter()
                .map(|s| Segment {
                    text: s.text.clone(),
                    start_ms: s.t_start_ms,
                    end_ms: s.t_end_ms,
                })
                .collect(),
        }
    }
}

/// Lazily renders the frames of a script.
#[derive(Debug, Clone)]
pub struct FixtureRenderer {
    script: FixtureScript,
    rate: FrameRate,
    n_frames: u64,
    backgrounds: HashMap<u64, Vec<u8>>,
}

/// Tinted texture around mid gray: two low-frequency sinusoids plus a fine
/// cell-like grain so every SSIM patch carries real structure.
fn texture(width: u32, height: u32, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f1: f64 = rng.gen_range(0.03..0.07);
    let f2: f64 = rng.gen_range(0.03..0.07);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let p1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let p2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let g1: f64 = rng.gen_range(0.6..0.8);
    let g2: f64 = rng.gen_range(0.6..0.8);
    let tint = [rng.gen_range(-8i32..8), rng.gen_range(-8i32..8), rng.gen_range(-8i32..8)];
    let (c, s) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(width as usize * height as usize * 3);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let v = 128.0
                + 15.0 * (f1 * (c * xf + s * yf) + p1).sin()
                + 15.0 * (f2 * (c * yf - s * xf) + p2).sin()
                + 45.0 * (g1 * xf + p1).sin() * (g2 * yf + p2).sin();
            for t in tint {
                out.push((v.round() as i32 + t).clamp(0, 255) as u8);
            }
        }
    }
    out
}

impl FixtureRenderer {
    pub fn new(script: FixtureScript) -> Result<Self> {
        script.validate()?;
        let rate = script.frame_rate()?;
        let n_frames = script.n_frames()?;
        let mut seeds: Vec<u64> = script
            .events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::StaticBg { seed } => Some(seed),
                _ => None,
            })
            .collect();
        seeds.push(0);
        let backgrounds = seeds
            .into_iter()
            .map(|s| (s, texture(script.width, script.height, s)))
            .collect();
        Ok(FixtureRenderer {
            script,
            rate,
            n_frames,
            backgrounds,
        })
    }

    pub fn script(&self) -> &FixtureScript {
        &self.script
    }

    pub fn frame_rate(&self) -> FrameRate {
        self.rate
    }

    pub fn n_frames(&self) -> u64 {
        self.n_frames
    }

    fn active(&self, index: u64) -> impl Iterator<Item = (&Event, u64, u64)> {
        let rate = self.rate;
        self.script.events.iter().filter_map(move |e| {
            let (a, b) = FixtureScript::frame_span(rate, e.t_start_ms, e.t_end_ms);
            (a..b).contains(&index).then(|| (e, index - a, b - a))
        })
    }

    /// Scripted cursor position on a frame, if a gesture is running.
    pub fn cursor_at(&self, index: u64) -> Option<(u32, u32)> {
        self.active(index).find_map(|(e, j, n)| match &e.kind {
            EventKind::CursorPath { path, .. } => Some(path.position(j, n)),
            _ => None,
        })
    }

    pub fn frame(&self, index: u64) -> Frame {
        let (w, h) = (self.script.width, self.script.height);
        let stride = w as usize * 3;
        let mut data: Option<Vec<u8>> = None;
        for (e, _, _) in self.active(index) {
            match e.kind {
                EventKind::StaticBg { seed } => data = Some(self.backgrounds[&seed].clone()),
                EventKind::MotionBurst { seed } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ index.wrapping_mul(0x9e37_79b9)));
                    let (bw, bh) = (w.div_ceil(8) as usize, h.div_ceil(8) as usize);
                    let blocks: Vec<u8> = (0..bw * bh).map(|_| rng.gen()).collect();
                    let mut buf = vec![0u8; stride * h as usize];
                    for y in 0..h as usize {
                        for x in 0..w as usize {
                            let v = blocks[(y / 8) * bw + x / 8];
                            buf[y * stride + x * 3..y * stride + x * 3 + 3].fill(v);
                        }
                    }
                    data = Some(buf);
                }
                _ => {}
            }
        }
        let mut data = data.unwrap_or_else(|| self.backgrounds[&0].clone());

        for (e, _, _) in self.active(index) {
            if let EventKind::Distractor { rect, style } = e.kind {
                let odd = index % 2 == 1;
                for y in rect[1]..rect[3] {
                    for x in rect[0]..rect[2] {
                        let i = y as usize * stride + x as usize * 3;
                        match style {
                            DistractorStyle::Flicker { amplitude } => {
                                let up = ((x + y) % 2 == 0) ^ odd;
                                for c in &mut data[i..i + 3] {
                                    *c = if up { c.saturating_add(amplitude) } else { c.saturating_sub(amplitude) };
                                }
                            }
                            DistractorStyle::Face => {
                                let white = ((x / 4 + y / 4) % 2 == 0) ^ odd;
                                data[i..i + 3].fill(if white { 255 } else { 0 });
                            }
                        }
                    }
                }
            }
        }

        if let Some((cx, cy)) = self.cursor_at(index) {
            for y in cy - 1..=cy + 1 {
                for x in cx - 1..=cx + 1 {
                    let v = if (x, y) == (cx, cy) { CURSOR_CENTER } else { CURSOR_RING };
                    let i = y as usize * stride + x as usize * 3;
                    data[i..i + 3].fill(v);
                }
            }
        }
        Frame::new(w, h, 3, data)
            .expect("fixture buffer matches its size")
            .with_position(index, self.rate.timestamp_ms(index))
    }

    /// In-memory stream over every frame of the script.
    pub fn stream(&self) -> FrameStream {
        let me = self.clone();
        FrameStream::from_source(
            format!("fixture:{}", self.script.video_id),
            self.rate,
            (0..self.n_frames).map(move |i| Ok(me.frame(i))),
        )
    }

    /// Frames `[first, last]`, inclusive.
    pub fn frames(&self, first: u64, last: u64) -> Vec<Frame> {
        (first..=last.min(self.n_frames.saturating_sub(1)))
            .into_par_iter()
            .map(|i| self.frame(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthChunk {
    pub chunk_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub first_frame: u64,
    pub last_frame: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthCursor {
    pub chunk_id: Option<String>,
    pub frame: u64,
    pub t_ms: u64,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthGesture {
    pub chunk_id: String,
    /// Pixel extent `[x1, y1, x2, y2]`, inclusive.
    pub bbox_px: [u32; 4],
    /// Extent divided by frame width and height.
    pub bbox: BBox,
    /// Word span within the chunk caption.
    pub word_span: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthQuestion {
    pub question: String,
    pub t_ms: f64,
    pub chunk_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    pub chunks: Vec<TruthChunk>,
    pub cursor: Vec<TruthCursor>,
    pub gestures: Vec<TruthGesture>,
    pub questions: Vec<TruthQuestion>,
    /// Regions a mask provider should hide (the "face" distractors).
    #[serde(default)]
    pub mask: Vec<Rect>,
}

/// Word times exactly as the caption aligner spaces them.
fn planned_word_times(s: &PlannedSentence) -> Vec<f64> {
    let n = tokenize(&s.text).count();
    let span = (s.t_end_ms - s.t_start_ms) as f64;
    (0..n)
        .map(|i| s.t_start_ms as f64 + (i as f64 + 0.5) * span / n as f64)
        .collect()
}

pub fn ground_truth(script: &FixtureScript) -> Result<GroundTruth> {
    script.validate()?;
    let rate = script.frame_rate()?;
    let n_frames = script.n_frames()?;

    let chunks: Vec<TruthChunk> = script
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::StaticBg { .. }))
        .filter_map(|e| {
            let (a, b) = FixtureScript::frame_span(rate, e.t_start_ms, e.t_end_ms);
            let (start_ms, end_ms) = (rate.timestamp_ms(a), rate.timestamp_ms(b));
            (b > a && end_ms - start_ms >= MIN_CHUNK_MS).then(|| TruthChunk {
                chunk_id: chunk_id(&script.video_id, start_ms),
                start_ms,
                end_ms,
                first_frame: a,
                last_frame: b - 1,
            })
        })
        .collect();
    let chunk_of_frame =
        |i: u64| chunks.iter().find(|c| (c.first_frame..=c.last_frame).contains(&i)).map(|c| c.chunk_id.clone());

    let mut cursor = Vec::new();
    let mut gestures = Vec::new();
    for e in &script.events {
        let EventKind::CursorPath { path, sentences } = &e.kind else {
            continue;
        };
        let (a, b) = FixtureScript::frame_span(rate, e.t_start_ms, e.t_end_ms);
        let b = b.min(n_frames);
        let mut ext = [u32::MAX, u32::MAX, 0, 0];
        for i in a..b {
            let (x, y) = path.position(i - a, b - a);
            ext = [ext[0].min(x), ext[1].min(y), ext[2].max(x), ext[3].max(y)];
            cursor.push(TruthCursor {
                chunk_id: chunk_of_frame(i),
                frame: i,
                t_ms: rate.timestamp_ms(i),
                x,
                y,
            });
        }
        let Some(chunk) = chunk_of_frame(a).and_then(|id| chunks.iter().find(|c| c.chunk_id == id)) else {
            continue;
        };
        // caption words are those timed inside the chunk window
        let in_chunk = |t: f64| t >= chunk.start_ms as f64 && t < chunk.end_ms as f64;
        let caption_times: Vec<f64> = script
            .transcript_plan
            .iter()
            .flat_map(planned_word_times)
            .filter(|&t| in_chunk(t))
            .collect();
        let mine: Vec<f64> = sentences
            .iter()
            .flat_map(|&s| planned_word_times(&script.transcript_plan[s]))
            .filter(|&t| in_chunk(t))
            .collect();
        let span = match (mine.first(), mine.last()) {
            (Some(&lo), Some(&hi)) => [
                caption_times.iter().position(|&t| t == lo).unwrap_or(0),
                caption_times.iter().position(|&t| t == hi).map_or(0, |p| p + 1),
            ],
            _ => [0, 0],
        };
        let (w, h) = (script.width as f64, script.height as f64);
        gestures.push(TruthGesture {
            chunk_id: chunk.chunk_id.clone(),
            bbox_px: ext,
            bbox: [ext[0] as f64 / w, ext[1] as f64 / h, ext[2] as f64 / w, ext[3] as f64 / h],
            word_span: span,
        });
    }

    let questions = script
        .transcript_plan
        .iter()
        .filter(|s| s.has_question_mark)
        .map(|s| {
            let t = *planned_word_times(s).last().unwrap_or(&(s.t_end_ms as f64));
            let distance = |c: &TruthChunk| {
                if t < c.start_ms as f64 {
                    c.start_ms as f64 - t
                } else if t > c.end_ms as f64 {
                    t - c.end_ms as f64
                } else {
                    0.0
                }
            };
            let mut best: Option<(&TruthChunk, f64)> = None;
            for c in &chunks {
                let d = distance(c);
                if d <= 45_000.0 && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((c, d));
                }
            }
            TruthQuestion {
                question: s.text.clone(),
                t_ms: t,
                chunk_id: best.map(|(c, _)| c.chunk_id.clone()),
            }
        })
        .collect();

    let mask = script
        .events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::Distractor { rect, style: DistractorStyle::Face } => {
                Some(Rect::new(rect[0], rect[1], rect[2], rect[3]))
            }
            _ => None,
        })
        .collect();

    Ok(GroundTruth {
        video_id: script.video_id.clone(),
        width: script.width,
        height: script.height,
        fps: script.fps,
        chunks,
        cursor,
        gestures,
        questions,
        mask,
    })
}

/// One line of a video manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub frames_dir: PathBuf,
    pub transcript_path: PathBuf,
    #[serde(default)]
    pub single_wsi: bool,
}

pub const FRAMES_DIR: &str = "frames";
pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const SCRIPT_FILE: &str = "script.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFixture {
    pub frames_dir: PathBuf,
    pub transcript_path: PathBuf,
    pub truth_path: PathBuf,
    pub manifest_path: PathBuf,
    pub truth: GroundTruth,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Write frames (PNG directory), transcript, ground truth, the script and a
/// one-line manifest under `out_dir`.
pub fn render_fixture(script: &FixtureScript, out_dir: &Path) -> Result<RenderedFixture> {
    let renderer = FixtureRenderer::new(script.clone())?;
    let truth = ground_truth(script)?;
    let frames_dir = out_dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    write_frame_meta(
        &frames_dir,
        &FrameMeta {
            fps: script.fps,
            width: script.width,
            height: script.height,
        },
    )?;
    (0..renderer.n_frames())
        .into_par_iter()
        .try_for_each(|i| renderer.frame(i).save_png(&frames_dir.join(frame_file_name(i))))?;

    let transcript_path = out_dir.join(TRANSCRIPT_FILE);
    write_json(&transcript_path, &script.transcript())?;
    let truth_path = out_dir.join(TRUTH_FILE);
    write_json(&truth_path, &truth)?;
    write_json(&out_dir.join(SCRIPT_FILE), script)?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let entry = ManifestEntry {
        video_id: script.video_id.clone(),
        frames_dir: PathBuf::from(FRAMES_DIR),
        transcript_path: PathBuf::from(TRANSCRIPT_FILE),
        single_wsi: true,
    };
    fs::write(&manifest_path, serde_json::to_string(&entry)? + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(RenderedFixture {
        frames_dir,
        transcript_path,
        truth_path,
        manifest_path,
        truth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub chunk_frames: u64,
    pub cursor_px: f64,
    pub cursor_coverage: f64,
    pub bbox: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            chunk_frames: 2,
            cursor_px: 1.0,
            cursor_coverage: 0.95,
            bbox: 0.01,
        }
    }
}

/// Whatever stage outputs are available; missing stages are not checked.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutputs {
    pub chunks: Option<Vec<ChunkRecord>>,
    pub traces: Option<Vec<TraceRecord>>,
    pub grounded: Option<Vec<GroundedCaption>>,
    pub questions: Option<Vec<QuestionAssignment>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn render(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Compare pipeline outputs with the fixture's ground truth.
pub fn verify_against_truth(out: &PipelineOutputs, truth: &GroundTruth, tol: &Tolerances) -> Result<VerifyReport> {
    let rate = FrameRate::from_fps(truth.fps)?;
    let mut report = VerifyReport::default();
    // truth chunk id -> detected chunk id
    let mut matched: HashMap<String, String> = HashMap::new();

    if let Some(chunks) = &out.chunks {
        let spans: Vec<(String, u64, u64)> = chunks
            .iter()
            .map(|c| (c.id(), rate.index_at(c.start_ms), rate.index_at(c.end_ms)))
            .collect();
        let mut used = vec![false; spans.len()];
        for t in &truth.chunks {
            let (ta, tb) = (t.first_frame, t.last_frame + 1);
            let best = spans
                .iter()
                .enumerate()
                .map(|(i, (_, a, b))| (i, tb.min(*b).saturating_sub(ta.max(*a))))
                .filter(|&(_, overlap)| overlap > 0)
                .max_by_key(|&(i, overlap)| (overlap, std::cmp::Reverse(i)));
            let name = format!("chunk {}", t.chunk_id);
            let Some((i, _)) = best else {
                report.push(name, false, "expected chunk not found");
                continue;
            };
            used[i] = true;
            let (id, a, b) = &spans[i];
            let (da, db) = (a.abs_diff(ta), b.abs_diff(tb));
            let ok = da <= tol.chunk_frames && db <= tol.chunk_frames;
            report.push(
                name,
                ok,
                format!("detected {id} frames [{a}, {b}) vs [{ta}, {tb}); offsets {da}/{db}, tolerance {}", tol.chunk_frames),
            );
            matched.insert(t.chunk_id.clone(), id.clone());
        }
        for (i, (id, a, b)) in spans.iter().enumerate() {
            if !used[i] {
                report.push(format!("chunk {id}"), false, format!("unexpected chunk at frames [{a}, {b})"));
            }
        }
    } else {
        matched.extend(truth.chunks.iter().map(|c| (c.chunk_id.clone(), c.chunk_id.clone())));
    }

    if let Some(traces) = &out.traces {
        let found: HashMap<u64, (u32, u32)> = traces
            .iter()
            .flat_map(|t| t.samples.iter().map(|&[t, x, y]| (t, (x as u32, y as u32))))
            .collect();
        for c in &truth.chunks {
            let expected: Vec<&TruthCursor> =
                truth.cursor.iter().filter(|s| s.chunk_id.as_deref() == Some(&c.chunk_id)).collect();
            if expected.is_empty() {
                continue;
            }
            let errors: Vec<f64> = expected
                .iter()
                .filter_map(|s| {
                    found.get(&s.t_ms).map(|&(x, y)| {
                        ((x as f64 - s.x as f64).powi(2) + (y as f64 - s.y as f64).powi(2)).sqrt()
                    })
                })
                .collect();
            let within = errors.iter().filter(|&&e| e <= tol.cursor_px).count();
            let coverage = within as f64 / expected.len() as f64;
            let mean = if errors.is_empty() { f64::INFINITY } else { errors.iter().sum::<f64>() / errors.len() as f64 };
            report.push(
                format!("cursor {}", c.chunk_id),
                coverage >= tol.cursor_coverage && mean <= tol.cursor_px,
                format!(
                    "{within}/{} frames within {} px (coverage {coverage:.3}), mean error {mean:.3} px",
                    expected.len(),
                    tol.cursor_px
                ),
            );
        }
    }

    if let Some(grounded) = &out.grounded {
        for c in &truth.chunks {
            let expected: Vec<&TruthGesture> = truth.gestures.iter().filter(|g| g.chunk_id == c.chunk_id).collect();
            if expected.is_empty() {
                continue;
            }
            let name = format!("gestures {}", c.chunk_id);
            let detected = matched
                .get(&c.chunk_id)
                .and_then(|id| grounded.iter().find(|g| &g.chunk_id == id));
            let Some(g) = detected else {
                report.push(name, false, "no grounded caption for this chunk");
                continue;
            };
            if g.clusters.len() != expected.len() {
                report.push(name, false, format!("{} clusters, expected {}", g.clusters.len(), expected.len()));
                continue;
            }
            let mut problems = Vec::new();
            for (i, (got, want)) in g.clusters.iter().zip(&expected).enumerate() {
                if got.word_span != want.word_span {
                    problems.push(format!("cluster {i}: span {:?} vs {:?}", got.word_span, want.word_span));
                }
                let dev = got.bbox.iter().zip(&want.bbox).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if dev > tol.bbox {
                    problems.push(format!("cluster {i}: box off by {dev:.4}"));
                }
            }
            let ok = problems.is_empty();
            let detail = if ok {
                format!("{} clusters match spans and boxes within {}", expected.len(), tol.bbox)
            } else {
                problems.join("; ")
            };
            report.push(name, ok, detail);
        }
    }

    if let Some(assigned) = &out.questions {
        for q in &truth.questions {
            let want = q.chunk_id.as_ref().and_then(|id| matched.get(id)).cloned();
            let got: Vec<&QuestionAssignment> =
                assigned.iter().filter(|a| a.question.trim() == q.question.trim()).collect();
            let got_id = got.first().map(|a| a.chunk_id.clone());
            let ok = got.len() <= 1 && got_id == want;
            report.push(
                format!("question {:?}", q.question),
                ok,
                format!("assigned to {got_id:?}, expected {want:?}"),
            );
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FixtureScript {
        FixtureScript {
            video_id: "t".into(),
            width: 64,
            height: 48,
            fps: 10.0,
            duration_ms: 5_000,
            events: vec![ev(0, 5_000, EventKind::StaticBg { seed: 1 })],
            transcript_plan: vec![],
        }
    }

    #[test]
    fn one_static_segment_is_one_chunk() {
        let t = ground_truth(&tiny()).unwrap();
        assert_eq!(t.chunks.len(), 1);
        assert_eq!((t.chunks[0].start_ms, t.chunks[0].end_ms), (0, 5_000));
    }

    #[test]
    fn circle_extent_by_hand() {
        let t = ground_truth(&FixtureScript::bundled()).unwrap();
        assert_eq!(t.gestures[0].bbox_px, [270, 130, 370, 230]);
        assert_eq!(t.gestures[0].word_span, [0, 22]);
        let spans: Vec<[usize; 2]> = t.gestures[2..].iter().map(|g| g.word_span).collect();
        assert_eq!(spans, vec![[0, 15], [15, 30], [30, 45]]);
    }

    #[test]
    fn bundled_truth_layout() {
        let t = ground_truth(&FixtureScript::bundled()).unwrap();
        let spans: Vec<(u64, u64)> = t.chunks.iter().map(|c| (c.start_ms, c.end_ms)).collect();
        assert_eq!(spans, vec![(0, 5_000), (15_000, 18_000), (40_000, 48_000)]);
        let q: Vec<Option<&str>> = t.questions.iter().map(|q| q.chunk_id.as_deref()).collect();
        assert_eq!(q, vec![Some("fixture_0"), Some("fixture_15000"), Some("fixture_40000")]);
    }

    #[test]
    fn samples_lie_in_their_gesture_boxes() {
        for script in [FixtureScript::bundled(), FixtureScript::cursor_with_distractors()] {
            let t = ground_truth(&script).unwrap();
            let mut k = 0;
            for e in &script.events {
                if let EventKind::CursorPath { path, .. } = &e.kind {
                    let rate = script.frame_rate().unwrap();
                    let (a, b) = FixtureScript::frame_span(rate, e.t_start_ms, e.t_end_ms);
                    let g = &t.gestures[k];
                    for j in 0..b - a {
                        let (x, y) = path.position(j, b - a);
                        assert!(x >= g.bbox_px[0] && x <= g.bbox_px[2] && y >= g.bbox_px[1] && y <= g.bbox_px[3]);
                    }
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn rendering_is_pure() {
        let a = FixtureRenderer::new(FixtureScript::bundled()).unwrap();
        let b = FixtureRenderer::new(FixtureScript::bundled()).unwrap();
        for i in [0, 10, 200, 1250, 1799] {
            assert_eq!(a.frame(i), b.frame(i));
        }
        assert_ne!(a.frame(200).data, a.frame(201).data, "bursts change every frame");
    }

    #[test]
    fn cursor_is_brightest_pixel_of_its_dot() {
        let r = FixtureRenderer::new(FixtureScript::bundled()).unwrap();
        let f = r.frame(30);
        let (x, y) = r.cursor_at(30).unwrap();
        assert_eq!((x, y), (320, 230));
        assert_eq!(f.pixel(x, y), &[255, 255, 255]);
        assert_eq!(f.pixel(x + 1, y), &[220, 220, 220]);
    }

    #[test]
    fn invalid_scripts_rejected() {
        let mut s = tiny();
        s.events.push(ev(0, 1_000, line(0.0, 10.0, 30.0, 10.0, vec![])));
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let mut s = tiny();
        s.events[0].t_end_ms = 6_000;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.transcript_plan.push(PlannedSentence {
            text: "Why?".into(),
            t_start_ms: 0,
            t_end_ms: 10,
            has_question_mark: false,
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn render_writes_deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = render_fixture(&tiny(), &dir.path().join("a")).unwrap();
        let b = render_fixture(&tiny(), &dir.path().join("b")).unwrap();
        for i in [0u64, 49] {
            let fa = fs::read(a.frames_dir.join(frame_file_name(i))).unwrap();
            let fb = fs::read(b.frames_dir.join(frame_file_name(i))).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(fs::read(&a.truth_path).unwrap(), fs::read(&b.truth_path).unwrap());
        let m: ManifestEntry =
            serde_json::from_str(fs::read_to_string(&a.manifest_path).unwrap().trim()).unwrap();
        assert_eq!(m.frames_dir, PathBuf::from(FRAMES_DIR));
    }

    fn perfect_outputs(t: &GroundTruth) -> PipelineOutputs {
        PipelineOutputs {
            chunks: Some(
                t.chunks
                    .iter()
                    .map(|c| ChunkRecord {
                        video_id: t.video_id.clone(),
                        start_ms: c.start_ms,
                        end_ms: c.end_ms,
                        n_frames: c.last_frame - c.first_frame + 1,
                        median_frame_path: String::new(),
                        has_cursor: true,
                    })
                    .collect(),
            ),
            traces: Some(vec![TraceRecord {
                chunk_id: "all".into(),
                active: true,
                samples: t.cursor.iter().map(|s| [s.t_ms, s.x as u64, s.y as u64]).collect(),
            }]),
            grounded: None,
            questions: Some(
                t.questions
                    .iter()
                    .filter_map(|q| {
                        q.chunk_id.as_ref().map(|c| QuestionAssignment {
                            question: q.question.clone(),
                            words: [0, 0],
                            t_ms: q.t_ms,
                            chunk_id: c.clone(),
                        })
                    })
                    .collect(),
            ),
        }
    }

    #[test]
    fn truth_verifies_against_itself() {
        let t = ground_truth(&FixtureScript::bundled()).unwrap();
        let r = verify_against_truth(&perfect_outputs(&t), &t, &Tolerances::default()).unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn boundary_off_by_three_frames_fails_only_that_check() {
        let t = ground_truth(&FixtureScript::bundled()).unwrap();
        let mut out = perfect_outputs(&t);
        let chunks = out.chunks.as_mut().unwrap();
        chunks[1].end_ms += 100;
        let r = verify_against_truth(&out, &t, &Tolerances::default()).unwrap();
        let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, vec!["chunk fixture_15000"]);
    }

    #[test]
    fn missing_chunk_is_reported() {
        let t = ground_truth(&FixtureScript::bundled()).unwrap();
        let mut out = perfect_outputs(&t);
        out.chunks.as_mut().unwrap().remove(0);
        let r = verify_against_truth(&out, &t, &Tolerances::default()).unwrap();
        assert!(r.checks.iter().any(|c| !c.passed && c.detail == "expected chunk not found"));
    }
}
