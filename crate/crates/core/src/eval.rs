//! Scoring model answers against harvested VQA sets, the pairwise judge
//! protocol, and red-ellipse visual prompts.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::caption::normalize_tokens;
use crate::cluster::BBox;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::llm::{complete_parsed, CompletionClient, CompletionParams};
use crate::prompts::{self, fill};
use crate::vqa::{QType, VqaPair};

const STOPWORDS_RAW: &str = include_str!("../assets/stopwords.txt");

pub fn stopwords() -> HashSet<&'static str> {
    STOPWORDS_RAW.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

fn content_tokens(text: &str, stop: &HashSet<&str>) -> BTreeSet<String> {
    normalize_tokens(text)
        .into_iter()
        .filter(|t| !stop.contains(t.as_str()))
        .collect()
}

/// Share of the answer's distinct content tokens that appear in the response.
pub fn open_recall(response: &str, answer: &str, stop: &HashSet<&str>) -> Result<f64> {
    let gold = content_tokens(answer, stop);
    if gold.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "answer {answer:?} has no tokens after normalization"
        )));
    }
    let said = content_tokens(response, stop);
    Ok(gold.intersection(&said).count() as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedMode {
    YesNo,
    MultiChoice,
}

pub fn extract_yes_no(text: &str) -> Option<&'static str> {
    match normalize_tokens(text).first().map(String::as_str) {
        Some("yes") => Some("yes"),
        Some("no") => Some("no"),
        _ => None,
    }
}

/// First standalone A to D letter, tolerating brackets and trailing
/// punctuation. Uppercase letters are preferred so the article "a" is not
/// read as a choice when a capital letter is present.
pub fn extract_choice(text: &str) -> Option<char> {
    let letters: Vec<char> = text
        .split_ascii_whitespace()
        .filter_map(|t| {
            let t = t.trim_matches(|c: char| !c.is_alphanumeric());
            let mut it = t.chars();
            match (it.next(), it.next()) {
                (Some(c), None) if "ABCDabcd".contains(c) => Some(c),
                _ => None,
            }
        })
        .collect();
    letters
        .iter()
        .find(|c| c.is_ascii_uppercase())
        .or_else(|| letters.first())
        .map(|c| c.to_ascii_uppercase())
}

pub fn closed_match(response: &str, answer: &str, mode: ClosedMode) -> bool {
    match mode {
        ClosedMode::YesNo => {
            let r = extract_yes_no(response);
            r.is_some() && r == extract_yes_no(answer)
        }
        ClosedMode::MultiChoice => {
            let r = extract_choice(response);
            r.is_some() && r == extract_choice(answer)
        }
    }
}

pub fn closed_accuracy<R: AsRef<str>, A: AsRef<str>>(
    responses: &[R],
    answers: &[A],
    mode: ClosedMode,
) -> Result<f64> {
    if responses.len() != answers.len() {
        return Err(Error::Shape(format!(
            "{} responses for {} answers",
            responses.len(),
            answers.len()
        )));
    }
    if answers.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over zero questions".into()));
    }
    let hits = responses
        .iter()
        .zip(answers)
        .filter(|(r, a)| closed_match(r.as_ref(), a.as_ref(), mode))
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

/// `100 · mean(candidate) / mean(reference)`.
pub fn relative_score(candidate: &[f64], reference: &[f64]) -> Result<f64> {
    if candidate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} candidate scores for {} reference scores",
            candidate.len(),
            reference.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("relative score over zero questions".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let r = mean(reference);
    if r <= 0.0 {
        return Err(Error::UndefinedMetric("reference mean is zero".into()));
    }
    Ok(100.0 * mean(candidate) / r)
}

/// The reference answer is always shown as Assistant 1.
pub fn build_judge_prompt(question: &str, candidate: &str, reference: &str, context: &str) -> String {
    fill(
        prompts::JUDGE,
        &[
            ("context", context),
            ("question", question),
            ("answer_reference", reference),
            ("answer_candidate", candidate),
        ],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub reference: u8,
    pub candidate: u8,
    pub explanation: String,
}

pub fn parse_judge_reply(raw: &str) -> Result<JudgeScores> {
    let text = raw.trim();
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let nums: Vec<&str> = first
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .collect();
    let [r, c] = nums.as_slice() else {
        return Err(Error::llm_format("judge reply must open with two scores", raw));
    };
    let score = |s: &str| -> Result<u8> {
        let v: u8 = s
            .parse()
            .map_err(|_| Error::llm_format(format!("judge score {s:?} is not an integer"), raw))?;
        if (1..=10).contains(&v) {
            Ok(v)
        } else {
            Err(Error::llm_format(format!("judge score {v} outside 1..=10"), raw))
        }
    };
    Ok(JudgeScores {
        reference: score(r)?,
        candidate: score(c)?,
        explanation: rest.trim().to_string(),
    })
}

pub fn judge(
    question: &str,
    candidate: &str,
    reference: &str,
    context: &str,
    client: &dyn CompletionClient,
    params: &CompletionParams,
) -> Result<JudgeScores> {
    let prompt = build_judge_prompt(question, candidate, reference, context);
    complete_parsed(client, &prompt, params, parse_judge_reply)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    OpenRecall,
    ClosedYesNo,
    JudgeReference,
    JudgeCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    pub metric: Metric,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_question: Vec<QuestionScore>,
    pub open_recall_mean: Option<f64>,
    pub closed_accuracy: Option<f64>,
    pub relative_score_pct: Option<f64>,
    pub missing_predictions: Vec<String>,
    pub judge_failures: Vec<String>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "metric,value\nopen_recall,{}\nclosed_accuracy,{}\nrelative_score_pct,{}\n",
            cell(self.open_recall_mean),
            cell(self.closed_accuracy),
            cell(self.relative_score_pct)
        )
    }
}

/// Score predictions against gold pairs. Open questions are scored by
/// recall, closed ones by yes/no accuracy; with a judge client, open
/// questions are also judged against the gold answer as reference.
pub fn evaluate(
    gold: &[VqaPair],
    predictions: &[Prediction],
    judge_client: Option<&dyn CompletionClient>,
    params: &CompletionParams,
) -> Result<EvalReport> {
    let stop = stopwords();
    let by_id: HashMap<&str, &str> = predictions
        .iter()
        .map(|p| (p.id.as_str(), p.response.as_str()))
        .collect();
    let mut report = EvalReport::default();
    let mut recalls = Vec::new();
    let (mut closed_r, mut closed_a) = (Vec::new(), Vec::new());
    let (mut cand, mut refs) = (Vec::new(), Vec::new());
    for g in gold {
        let response = match by_id.get(g.id.as_str()) {
            Some(r) => *r,
            None => {
                report.missing_predictions.push(g.id.clone());
                ""
            }
        };
        match g.qtype {
            QType::Open => {
                let Ok(r) = open_recall(response, &g.answer, &stop) else {
                    log::warn!("skipping {}: answer has no content tokens", g.id);
                    continue;
                };
                recalls.push(r);
                report.per_question.push(QuestionScore {
                    id: g.id.clone(),
                    metric: Metric::OpenRecall,
                    score: r,
                });
                if let Some(client) = judge_client {
                    match judge(&g.question, response, &g.answer, &g.question, client, params) {
                        Ok(s) => {
                            refs.push(s.reference as f64);
                            cand.push(s.candidate as f64);
                            for (metric, score) in [
                                (Metric::JudgeReference, s.reference),
                                (Metric::JudgeCandidate, s.candidate),
                            ] {
                                report.per_question.push(QuestionScore {
                                    id: g.id.clone(),
                                    metric,
                                    score: score as f64,
                                });
                            }
                        }
                        Err(e) => {
                            log::warn!("judge failed on {}: {e}", g.id);
                            report.judge_failures.push(g.id.clone());
                        }
                    }
                }
            }
            QType::Closed => {
                let hit = closed_match(response, &g.answer, ClosedMode::YesNo);
                closed_r.push(response);
                closed_a.push(g.answer.as_str());
                report.per_question.push(QuestionScore {
                    id: g.id.clone(),
                    metric: Metric::ClosedYesNo,
                    score: if hit { 1.0 } else { 0.0 },
                });
            }
        }
    }
    if !recalls.is_empty() {
        report.open_recall_mean = Some(recalls.iter().sum::<f64>() / recalls.len() as f64);
    }
    if !closed_a.is_empty() {
        report.closed_accuracy = Some(closed_accuracy(&closed_r, &closed_a, ClosedMode::YesNo)?);
    }
    if !refs.is_empty() {
        report.relative_score_pct = Some(relative_score(&cand, &refs)?);
    }
    Ok(report)
}

pub const RED: [u8; 3] = [255, 0, 0];

pub fn stroke_thickness(width: u32, height: u32) -> u32 {
    ((0.0005 * width.max(height) as f64).round() as u32).max(2)
}

/// Geometry of the drawn ellipse in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseBand {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub thickness: f64,
}

impl EllipseBand {
    pub fn for_box(bbox: BBox, width: u32, height: u32) -> Result<Self> {
        let [x1, y1, x2, y2] = bbox;
        let ok = bbox.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && x1 <= x2 && y1 <= y2;
        if !ok {
            return Err(Error::Validation(format!("invalid normalized box {bbox:?}")));
        }
        let (w, h) = (width as f64, height as f64);
        let cx = (x1 + x2) / 2.0 * w;
        let cy = (y1 + y2) / 2.0 * h;
        let (mut a, mut b) = ((x2 - x1) / 2.0 * w, (y2 - y1) / 2.0 * h);
        if a <= 0.0 || b <= 0.0 {
            a = 4.0;
            b = 4.0;
        }
        Ok(EllipseBand {
            cx,
            cy,
            a,
            b,
            thickness: stroke_thickness(width, height) as f64,
        })
    }

    /// Whether the pixel with top-left corner `(x, y)` lies on the stroke,
    /// judged at its center.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let outer = (dx / self.a).powi(2) + (dy / self.b).powi(2) <= 1.0;
        if !outer {
            return false;
        }
        let (ia, ib) = (self.a - self.thickness, self.b - self.thickness);
        if ia <= 0.0 || ib <= 0.0 {
            return true;
        }
        (dx / ia).powi(2) + (dy / ib).powi(2) > 1.0
    }
}

/// Draw a red ellipse inscribed in `bbox`. The result is always RGB.
pub fn draw_visual_prompt(image: &Frame, bbox: BBox) -> Result<Frame> {
    let mut out = image.to_rgb();
    let band = EllipseBand::for_box(bbox, out.width, out.height)?;
    let x0 = (band.cx - band.a).floor().max(0.0) as u32;
    let y0 = (band.cy - band.b).floor().max(0.0) as u32;
    let x1 = ((band.cx + band.a).ceil() as u32).min(out.width);
    let y1 = ((band.cy + band.b).ceil() as u32).min(out.height);
    let w = out.width as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if band.contains(x, y) {
                let i = (y as usize * w + x as usize) * 3;
                out.data[i..i + 3].copy_from_slice(&RED);
            }
        }
    }
    Ok(out)
}
