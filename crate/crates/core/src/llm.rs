//! Completion clients.
//!
//! Every generation stage talks to a [`CompletionClient`]. Production runs
//! use [`HttpClient`] against an OpenAI-compatible chat endpoint; tests and
//! offline runs use [`StubClient`], a seeded table-driven responder whose
//! output is a pure function of `(prompt, seed)`.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{section, task_of, Task, EXHAUSTED_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            temperature: 0.7,
            max_tokens: 1024,
        }
    }
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String>;
}

impl<C: CompletionClient + ?Sized> CompletionClient for &C {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String> {
        (**self).complete(prompt, params)
    }
}

impl<C: CompletionClient + ?Sized> CompletionClient for Box<C> {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String> {
        (**self).complete(prompt, params)
    }
}

/// Wraps a closure; handy for scripted replies in tests and examples.
pub struct FnClient<F>(pub F);

impl<F> CompletionClient for FnClient<F>
where
    F: Fn(&str) -> Result<String> + Send + Sync,
{
    fn complete(&self, prompt: &str, _: &CompletionParams) -> Result<String> {
        (self.0)(prompt)
    }
}

/// Call once, retry once on failure.
pub fn complete_with_retry(
    client: &dyn CompletionClient,
    prompt: &str,
    params: &CompletionParams,
) -> Result<String> {
    client.complete(prompt, params).or_else(|e| {
        log::warn!("completion failed ({e}), retrying once");
        client.complete(prompt, params)
    })
}

/// Like [`complete_with_retry`], but the reply must also parse.
pub fn complete_parsed<T>(
    client: &dyn CompletionClient,
    prompt: &str,
    params: &CompletionParams,
    parse: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    let attempt = || client.complete(prompt, params).and_then(|raw| parse(&raw));
    attempt().or_else(|e| {
        log::warn!("completion unusable ({e}), retrying once");
        attempt()
    })
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Offline responder. Replies are drawn from fixed tables indexed by a hash
/// of the prompt and the seed, and always follow the reply format the
/// prompt's task asks for.
#[derive(Debug, Clone, Copy)]
pub struct StubClient {
    pub seed: u64,
}

const STUB_DIAGNOSES: &[&str] = &[
    "basal cell carcinoma",
    "squamous cell carcinoma",
    "melanoma",
    "nodular fasciitis",
    "chronic gastritis",
    "tubular adenoma",
    "granulomatous inflammation",
    "papillary thyroid carcinoma",
];

const STUB_FEATURES: &[&str] = &[
    "nuclear pleomorphism",
    "peripheral palisading",
    "increased mitotic activity",
    "a dense lymphocytic infiltrate",
    "keratin pearls",
    "stromal retraction",
    "glandular crowding",
    "multinucleated giant cells",
];

const STUB_QUESTIONS: &[&str] = &[
    "What cell population dominates the highlighted region?",
    "How would you describe the architecture in this area?",
    "Is there evidence of invasion in the marked region?",
    "What does the staining pattern suggest here?",
    "Which features point toward a neoplastic process?",
    "How are the nuclei arranged at the periphery?",
];

impl StubClient {
    pub fn new(seed: u64) -> Self {
        StubClient { seed }
    }

    fn draw(&self, prompt: &str, salt: u64) -> u64 {
        splitmix64(fnv1a(prompt.as_bytes()) ^ splitmix64(self.seed ^ salt))
    }

    fn pick<'a>(&self, table: &'a [&'a str], prompt: &str, salt: u64) -> &'a str {
        table[(self.draw(prompt, salt) % table.len() as u64) as usize]
    }

    fn caption_snippet(prompt: &str) -> String {
        let caption = section(prompt, "caption").unwrap_or_default();
        let words: Vec<&str> = caption
            .split_ascii_whitespace()
            .filter(|w| !w.starts_with('['))
            .take(8)
            .collect();
        if words.is_empty() {
            "the tissue shown".to_string()
        } else {
            words.join(" ").trim_end_matches([',', '.', ']']).to_string()
        }
    }

    fn reply(&self, prompt: &str) -> Result<String> {
        let task = task_of(prompt)
            .ok_or_else(|| Error::Client("stub client cannot identify the prompt task".into()))?;
        let snippet = Self::caption_snippet(prompt);
        Ok(match task {
            Task::Conversation => {
                let n = 3 + (self.draw(prompt, 1) % 2) as usize;
                (0..n)
                    .map(|i| {
                        format!(
                            "Question: {}\nAnswer: The region shows {}, consistent with {}.",
                            self.pick(STUB_QUESTIONS, prompt, 10 + i as u64),
                            self.pick(STUB_FEATURES, prompt, 20 + i as u64),
                            snippet
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            Task::DetailedDescription => format!(
                "The image shows {snippet}. Notable findings include {} and {}.",
                self.pick(STUB_FEATURES, prompt, 2),
                self.pick(STUB_FEATURES, prompt, 3)
            ),
            Task::ComplexReasoning => format!(
                "Question: {}\nAnswer: Given {}, the most likely interpretation is {}; {} would support it.",
                self.pick(STUB_QUESTIONS, prompt, 4),
                snippet,
                self.pick(STUB_DIAGNOSES, prompt, 5),
                self.pick(STUB_FEATURES, prompt, 6)
            ),
            Task::AbductiveStudent => format!(
                "User: [{{Abduction: The findings could represent {}}}, {{Facts Used: {}}}]",
                self.pick(STUB_DIAGNOSES, prompt, 7),
                snippet
            ),
            Task::AbductiveAssistant => {
                let exhausted = self.draw(prompt, 8) % 4 == 0;
                let feature = self.pick(STUB_FEATURES, prompt, 9);
                if exhausted {
                    format!(
                        "GPT: [{{Comments: This patch alone does not settle the diagnosis.}}, {{Hint: Consider looking for evidence of {feature} in other patches to validate your diagnosis. {EXHAUSTED_SENTINEL}}}]"
                    )
                } else {
                    format!(
                        "GPT: [{{Comments: The reasoning is plausible but incomplete.}}, {{Hint: Look again for {feature}.}}]"
                    )
                }
            }
            Task::CaseContext => {
                let transcript = section(prompt, "transcript").unwrap_or_default();
                let lower = transcript.to_lowercase();
                let diagnosis = STUB_DIAGNOSES
                    .iter()
                    .filter(|d| lower.contains(*d))
                    .max_by_key(|d| d.len())
                    .copied()
                    .unwrap_or_else(|| self.pick(STUB_DIAGNOSES, prompt, 11));
                let facts: Vec<String> = transcript
                    .split_terminator(['.', '?', '!'])
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .take(3)
                    .map(str::to_string)
                    .collect();
                serde_json::json!({
                    "diagnosis": diagnosis,
                    "facts": facts,
                })
                .to_string()
            }
            Task::VqaExtract => {
                let text = section(prompt, "text").unwrap_or_default();
                let pairs: Vec<serde_json::Value> = section(prompt, "questions")
                    .unwrap_or_default()
                    .lines()
                    .map(|l| l.trim().trim_start_matches("- ").trim())
                    .filter(|q| !q.is_empty())
                    .map(|q| {
                        serde_json::json!({
                            "question": q,
                            "answer": sentence_after(&text, q).unwrap_or_else(|| "Not stated.".into()),
                        })
                    })
                    .collect();
                serde_json::Value::Array(pairs).to_string()
            }
            Task::VqaCategory => {
                let q = section(prompt, "question").unwrap_or_default().to_lowercase();
                let deictic = ["this", "here", "image", "seen", "these", "see"];
                if q.split(|c: char| !c.is_alphanumeric())
                    .any(|t| deictic.contains(&t))
                {
                    "image_dependent".into()
                } else {
                    "general_knowledge".into()
                }
            }
            Task::Judge => {
                let reference = 6 + self.draw(prompt, 12) % 5;
                let candidate = 3 + self.draw(prompt, 13) % 8;
                format!(
                    "{reference} {candidate}\nAssistant 1 is more complete; Assistant 2 omits some details."
                )
            }
        })
    }
}

fn sentence_after(text: &str, question: &str) -> Option<String> {
    let at = text.find(question)? + question.len();
    let rest = text[at..].trim_start();
    let end = rest
        .char_indices()
        .find(|&(i, c)| {
            matches!(c, '.' | '?' | '!')
                && rest[i + c.len_utf8()..]
                    .chars()
                    .next()
                    .is_none_or(|n| n.is_ascii_whitespace())
        })
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(rest.len());
    let s = rest[..end].trim();
    (!s.is_empty()).then(|| s.to_string())
}

impl CompletionClient for StubClient {
    fn complete(&self, prompt: &str, _: &CompletionParams) -> Result<String> {
        self.reply(prompt)
    }
}

/// Endpoint settings. The API key itself is only ever read from the
/// environment variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub api_key_env: String,
    pub timeout_s: u64,
    pub max_in_flight: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            temperature: 0.7,
            max_tokens: 1024,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_s: 120,
            max_in_flight: 4,
        }
    }
}

impl ClientConfig {
    pub fn params(&self) -> CompletionParams {
        CompletionParams {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpClient {
    config: ClientConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn from_env(config: ClientConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            Error::Config(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .build()
            .into();
        Ok(HttpClient {
            config,
            api_key,
            agent,
        })
    }

    pub fn request_body(&self, prompt: &str, params: &CompletionParams) -> serde_json::Value {
        request_body(&self.config.model, prompt, params)
    }
}

fn request_body(model: &str, prompt: &str, params: &CompletionParams) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
        "messages": [{"role": "user", "content": prompt}],
    })
}

fn reply_text(body: &serde_json::Value) -> Result<String> {
    body.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Client(format!("response without choices[0].message.content: {body}")))
}

impl CompletionClient for HttpClient {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String> {
        let mut response = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(self.request_body(prompt, params))
            .map_err(|e| Error::Client(e.to_string()))?;
        let body: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Client(e.to_string()))?;
        reply_text(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{fill, Task};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn prompt(task: Task, caption: &str) -> String {
        format!("### task: {}\n### caption\n{caption}\n### end\n", task.name())
    }

    #[test]
    fn stub_is_pure() {
        let a = StubClient::new(3);
        let p = prompt(Task::Conversation, "glands with [0.10, 0.20, 0.30, 0.40] crowding");
        let params = CompletionParams::default();
        assert_eq!(a.complete(&p, &params).unwrap(), a.complete(&p, &params).unwrap());
        let other = (0..16)
            .map(|s| StubClient::new(s).complete(&p, &params).unwrap())
            .collect::<std::collections::BTreeSet<_>>();
        assert!(other.len() > 1, "seed should matter");
    }

    #[test]
    fn stub_rejects_unknown_prompt() {
        assert!(StubClient::new(0)
            .complete("hello", &CompletionParams::default())
            .is_err());
    }

    #[test]
    fn stub_vqa_answers_with_following_sentence() {
        let p = fill(
            "### task: vqa_extract\n### text\n{text}\n### questions\n{questions}\n### end\n",
            &[
                ("text", "Do you know what organ this is? Yes, this is colon. Next."),
                ("questions", "- Do you know what organ this is?"),
            ],
        );
        let reply = StubClient::new(0)
            .complete(&p, &CompletionParams::default())
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
        assert_eq!(v[0]["answer"], "Yes, this is colon.");
    }

    #[test]
    fn retry_happens_once() {
        let calls = AtomicUsize::new(0);
        let flaky = FnClient(|_: &str| {
            if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(Error::Client("timeout".into()))
            } else {
                Ok("fine".to_string())
            }
        });
        assert_eq!(
            complete_with_retry(&flaky, "p", &CompletionParams::default()).unwrap(),
            "fine"
        );
        let dead = FnClient(|_: &str| Err(Error::Client("down".into())));
        assert!(complete_with_retry(&dead, "p", &CompletionParams::default()).is_err());
    }

    #[test]
    fn http_request_shape() {
        let body = request_body("gpt-4", "hi", &CompletionParams { temperature: 0.2, max_tokens: 64 });
        assert_eq!(body["messages"][0]["content"], "hi");
        assert_eq!(body["max_tokens"], 64);
        let reply = serde_json::json!({"choices": [{"message": {"content": "ok"}}]});
        assert_eq!(reply_text(&reply).unwrap(), "ok");
        assert!(matches!(reply_text(&serde_json::json!({})), Err(Error::Client(_))));
    }

    #[test]
    fn http_client_needs_key_in_env() {
        let cfg = ClientConfig {
            api_key_env: "NARRMINE_TEST_KEY_THAT_IS_NOT_SET".into(),
            ..ClientConfig::default()
        };
        assert!(matches!(HttpClient::from_env(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs of the reference SplitMix64 generator seeded with 0
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
    }
}
