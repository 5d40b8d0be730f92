//! Topical-coherence judging through a chat-completions endpoint.
//!
//! A judgement samples the same 1-to-5 rating K times and reports the mean
//! and population standard deviation of the scores that parsed. Replies
//! must be a bare digit; anything else is retried a bounded number of
//! times, then excluded. The transport is pluggable so tests and offline
//! runs use canned replies with zero network involvement.

use serde_json::json;
use std::io::BufRead;
use std::path::Path;
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("invalid judge request: {0}")]
    BadRequest(&'static str),
    #[error("endpoint returned status {status}")]
    Http { status: u16 },
    #[error("transport failed: {0}")]
    Network(String),
    #[error("malformed endpoint reply: {0}")]
    Protocol(String),
    #[error("judge unavailable: {attempts} attempts produced no parseable score")]
    Unavailable { attempts: usize },
    #[error("fixture {path}: {what}")]
    Fixture { path: String, what: String },
}

pub type Result<T> = std::result::Result<T, JudgeError>;

#[derive(Debug, Clone)]
pub struct JudgeRequest {
    pub document: String,
    pub topics: Vec<String>,
    pub summary: String,
    /// Independent ratings per verdict.
    pub samples: usize,
    /// Additional attempts per rating after a reply fails to parse.
    pub max_retries: usize,
    pub model: String,
    pub temperature: f64,
}

impl JudgeRequest {
    pub fn new(document: String, topics: Vec<String>, summary: String) -> JudgeRequest {
        JudgeRequest {
            document,
            topics,
            summary,
            samples: 3,
            max_retries: 3,
            model: "gpt-4o-mini".into(),
            temperature: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.document.is_empty() {
            return Err(JudgeError::BadRequest("document is empty"));
        }
        if self.summary.is_empty() {
            return Err(JudgeError::BadRequest("summary is empty"));
        }
        // No topics is allowed: corpora without topic control are rated
        // for coherence against the article alone. Blank entries are not.
        if self.topics.iter().any(|t| t.is_empty()) {
            return Err(JudgeError::BadRequest("topics must be nonempty"));
        }
        if self.samples == 0 {
            return Err(JudgeError::BadRequest("samples must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeVerdict {
    pub scores: Vec<u8>,
    pub mean: f64,
    /// Population standard deviation over the parsed scores.
    pub std: f64,
    /// Ratings abandoned after every retry failed to parse.
    pub failures: usize,
}

/// Renders the rating instructions: task definition, the five-point
/// rubric, the one-score-only directive, then the document, topics, and
/// summary in labeled slots.
pub fn render_judge_prompt(document: &str, topics: &[String], summary: &str) -> String {
    let topics = topics.join(", ");
    format!(
        "You will be given one summary written for a news article along with the news article.\n\
         \n\
         Your task is to rate the summary on one metric, that is topical coherence.\n\
         \n\
         Please make sure you read and understand these instructions carefully. Please keep this document open while reviewing, and refer to it as needed.\n\
         \n\
         Evaluation Criteria:\n\
         \n\
         Topical Coherence: Ensure the summary focuses on the topics (there can be more than one topic) requested by the user. The summary should reflect the content of the article and not introduce made-up information. It should draw conclusions or summarize only the details presented in the input. The summary should not include any unrelated or extraneous information that is not aligned with the topic or input article.\n\
         \n\
         Evaluation Steps:\n\
         \n\
         1. Read the Input Article: Understand the main topics and points that should be covered in the summary.\n\
         2. Read the topic(s) provided by the user.\n\
         3. Read the Summary: Carefully go through the summary and assess whether it covers the topic in a meaningful and coherent way.\n\
         4. Score the Summary: 1-5 scale:\n\
         - 1: The summary somewhat reflects the topic but contains a significant amount of irrelevant or incorrect information or misses relevant information.\n\
         - 2: The summary is generally on-topic, but may include minor irrelevant details or miss some key points.\n\
         - 3: The summary is mostly on-topic, covering the requested topic well with very few irrelevant details.\n\
         - 4: The summary reflects the requested topic with full coherence and no irrelevant or made-up content.\n\
         - 5: The summary is perfectly on-topic, coherent, and includes all the key points from the input article and is very crisp and to the point.\n\
         5. Just respond with the one score and nothing else.\n\
         \n\
         Example:\n\
         \n\
         - Source Text:\n\
         {document}\n\
         - Topics:\n\
         {topics}\n\
         - Summary:\n\
         {summary}\n\
         - Evaluation Form (scores ONLY):\n\
         - Topical Coherence:"
    )
}

/// Accepts exactly one digit 1-5 after trimming; everything else is a
/// non-answer. The prompt demands "the one score and nothing else", so a
/// lenient parse would silently score junk.
pub fn parse_score(reply: &str) -> Option<u8> {
    match reply.trim() {
        "1" => Some(1),
        "2" => Some(2),
        "3" => Some(3),
        "4" => Some(4),
        "5" => Some(5),
        _ => None,
    }
}

/// Sends one chat-completion body and returns the assistant reply text.
pub trait Transport {
    fn send(&mut self, body: &str) -> Result<String>;
}

/// Canned replies handed out in a cycle; records every request body so
/// tests can assert byte-level determinism. Never touches the network.
#[derive(Debug)]
pub struct MockTransport {
    replies: Vec<String>,
    next: usize,
    pub sent_bodies: Vec<String>,
}

impl MockTransport {
    pub fn new(replies: Vec<String>) -> MockTransport {
        assert!(!replies.is_empty(), "mock needs at least one reply");
        MockTransport { replies, next: 0, sent_bodies: Vec::new() }
    }

    /// One reply per line. Blank lines are kept: an empty reply is a
    /// legitimate thing to simulate.
    pub fn from_fixture(path: &Path) -> Result<MockTransport> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path)
            .map_err(|e| JudgeError::Fixture { path: display.clone(), what: e.to_string() })?;
        let replies: Vec<String> = std::io::BufReader::new(file)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| JudgeError::Fixture { path: display.clone(), what: e.to_string() })?;
        if replies.is_empty() {
            return Err(JudgeError::Fixture { path: display, what: "no replies".into() });
        }
        Ok(MockTransport { replies, next: 0, sent_bodies: Vec::new() })
    }
}

impl Transport for MockTransport {
    fn send(&mut self, body: &str) -> Result<String> {
        self.sent_bodies.push(body.to_string());
        let reply = self.replies[self.next].clone();
        self.next = (self.next + 1) % self.replies.len();
        Ok(reply)
    }
}

/// Live chat-completions client. The API key comes from the environment,
/// never from config files.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

pub const API_KEY_ENV: &str = "ALAB_JUDGE_KEY";

fn completions_url(endpoint: &str) -> String {
    format!("{}/chat/completions", endpoint.trim_end_matches('/'))
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> HttpTransport {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        HttpTransport { agent: config.into(), url: completions_url(endpoint), api_key }
    }

    pub fn from_env(endpoint: &str, timeout: Duration) -> HttpTransport {
        HttpTransport::new(endpoint, std::env::var(API_KEY_ENV).ok(), timeout)
    }
}

impl Transport for HttpTransport {
    fn send(&mut self, body: &str) -> Result<String> {
        let mut request = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send(body).map_err(|e| match e {
            ureq::Error::StatusCode(status) => JudgeError::Http { status },
            other => JudgeError::Network(other.to_string()),
        })?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| JudgeError::Network(e.to_string()))?;
        let parsed: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| JudgeError::Protocol(e.to_string()))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| JudgeError::Protocol("reply missing choices[0].message.content".into()))
    }
}

/// The exact request body for one rating. Fields are emitted in sorted key
/// order with no timestamps or nonces, so identical inputs give identical
/// bytes (record-replay friendly).
fn request_body(request: &JudgeRequest, prompt: &str) -> String {
    json!({
        "model": request.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": request.temperature,
    })
    .to_string()
}

/// Rates one summary K times through the transport. Replies that fail the
/// strict parse are retried up to `max_retries` extra times, then counted
/// as failures and excluded from the statistics. Transport errors abort
/// immediately; they signal configuration problems, not judge noise.
pub fn judge(request: &JudgeRequest, transport: &mut dyn Transport) -> Result<JudgeVerdict> {
    request.validate()?;
    let prompt = render_judge_prompt(&request.document, &request.topics, &request.summary);
    let body = request_body(request, &prompt);

    let mut scores: Vec<u8> = Vec::with_capacity(request.samples);
    let mut failures = 0usize;
    let mut attempts = 0usize;
    for _ in 0..request.samples {
        let mut parsed = None;
        for _ in 0..=request.max_retries {
            attempts += 1;
            let reply = transport.send(&body)?;
            parsed = parse_score(&reply);
            if parsed.is_some() {
                break;
            }
        }
        match parsed {
            Some(score) => scores.push(score),
            None => failures += 1,
        }
    }
    if scores.is_empty() {
        return Err(JudgeError::Unavailable { attempts });
    }
    let n = scores.len() as f64;
    let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = scores.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    Ok(JudgeVerdict { scores, mean, std: var.sqrt(), failures })
}
