//! Zero-shot prompt harness: prompt construction under a token budget, an
//! HTTP chat-completion client with retries, yes/no answer parsing with the
//! "No" default, and answered/unanswered tallying.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emit::write_atomic;
use crate::error::{Error, Result};
use crate::evaluate::{auprc, auroc, MetricsReport, ScoredSet};

/// Placeholder replaced by the (possibly truncated) patient document.
pub const EHR_SLOT: &str = "[textual EHR]";

/// Prompt P1 asks for death directly: yes means mortality.
pub const P1_SCAFFOLD: &str = "You are an extremely helpful healthcare assistant. You answer the question using only 'yes' or 'no' and considering a patient hospital profile: '[textual EHR]'.\nQuestion: Is the patient dead?.\nAnswer (only yes or no): ";

/// Prompt P2 asks for survival: yes means the patient lives.
pub const P2_SCAFFOLD: &str = "Analyze the provided ICU data for a patient. The data covers the first 48 hours of the ICU stay, including vital statistics, lab test results, and treatments administered. Answer only Yes for a prediction of survival or No for a prediction of mortality. The patient ICU data is: '[textual EHR]'. Based on this data, answer.\nQuestion: Will the patient survive in the next 24 hours?.\nAnswer (use only yes or no): ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    P1,
    P2,
}

impl PromptKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Some(PromptKind::P1),
            "p2" => Some(PromptKind::P2),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::P1 => "p1",
            PromptKind::P2 => "p2",
        }
    }

    pub fn scaffold(&self) -> &'static str {
        match self {
            PromptKind::P1 => P1_SCAFFOLD,
            PromptKind::P2 => P2_SCAFFOLD,
        }
    }

    /// Label produced by a "yes" answer: P1 asks about death (yes -> 1), P2
    /// asks about survival (yes -> 0).
    pub fn yes_label(&self) -> u8 {
        match self {
            PromptKind::P1 => 1,
            PromptKind::P2 => 0,
        }
    }

    pub fn no_label(&self) -> u8 {
        1 - self.yes_label()
    }
}

/// Counts tokens in a text. The default proxy counts maximal non-whitespace
/// runs; implement this to plug in a model-exact tokenizer. Counters must be
/// monotone non-decreasing under concatenation for budget truncation to
/// work.
pub trait TokenCounter: Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-run token counting, the default budget proxy.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Token count under the default proxy.
pub fn count_tokens(text: &str) -> usize {
    WhitespaceCounter.count(text)
}

/// Byte offsets at which a whole-token prefix of `text` ends (the end of
/// each whitespace-delimited token), starting with 0 for the empty prefix.
fn token_end_offsets(text: &str) -> Vec<usize> {
    let mut ends = vec![0usize];
    let bytes = text.as_bytes();
    let mut in_token = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if in_token {
                ends.push(i);
                in_token = false;
            }
        } else {
            in_token = true;
        }
    }
    if in_token {
        ends.push(bytes.len());
    }
    ends
}

/// Longest prefix of whole tokens whose count stays within the budget. The
/// result is a literal prefix of the input and never splits inside a token;
/// truncating an already-fitting text returns it unchanged.
pub fn truncate_to_budget<'t>(text: &'t str, budget: usize, counter: &dyn TokenCounter) -> &'t str {
    if counter.count(text) <= budget {
        return text;
    }
    let ends = token_end_offsets(text);
    // Binary search over whole-token prefixes; counts are monotone in the
    // prefix length.
    let (mut lo, mut hi) = (0usize, ends.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if counter.count(&text[..ends[mid]]) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    &text[..ends[lo]]
}

/// Fills the scaffold's EHR slot, truncating only the slot content so the
/// final prompt stays within the budget while the scaffold survives intact.
pub fn build_prompt(
    kind: PromptKind,
    ehr_text: &str,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<String> {
    let scaffold = kind.scaffold();
    let empty = scaffold.replace(EHR_SLOT, "");
    if counter.count(&empty) > budget {
        return Err(Error::Config(format!(
            "prompt {} scaffold alone exceeds the token budget {budget}",
            kind.as_str()
        )));
    }
    let full = scaffold.replace(EHR_SLOT, ehr_text);
    if counter.count(&full) <= budget {
        return Ok(full);
    }
    // Binary search the longest whole-token EHR prefix that keeps the
    // assembled prompt within budget.
    let ends = token_end_offsets(ehr_text);
    let (mut lo, mut hi) = (0usize, ends.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        let candidate = scaffold.replace(EHR_SLOT, &ehr_text[..ends[mid]]);
        if counter.count(&candidate) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(scaffold.replace(EHR_SLOT, &ehr_text[..ends[lo]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerStatus {
    Yes,
    No,
    Unanswered,
}

impl AnswerStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnswerStatus::Yes => "yes",
            AnswerStatus::No => "no",
            AnswerStatus::Unanswered => "unanswered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub status: AnswerStatus,
    pub raw: String,
}

/// Lowercases, strips leading whitespace/punctuation, and classifies the
/// completion by its leading token: "yes", "no", or anything else.
pub fn parse_answer(raw: &str) -> ParsedAnswer {
    let normalized = raw
        .to_lowercase()
        .trim_start_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_string();
    let status = if normalized.starts_with("yes") {
        AnswerStatus::Yes
    } else if normalized.starts_with("no") {
        AnswerStatus::No
    } else {
        AnswerStatus::Unanswered
    };
    ParsedAnswer {
        status,
        raw: raw.to_string(),
    }
}

/// Where the "No" default is applied for unanswered records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnansweredDefault {
    /// Substitute the token "No" and map it through the prompt's semantics
    /// (P1 -> label 0, P2 -> label 1).
    #[default]
    TokenLevel,
    /// Assign the negative class (label 0) directly, regardless of prompt.
    ClassLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolved {
    pub label: u8,
    pub was_unanswered: bool,
}

/// Total mapping from any parsed answer to a label: unanswered records take
/// the default, then the token flows through the prompt's yes/no semantics.
pub fn resolve_prediction(
    status: AnswerStatus,
    kind: PromptKind,
    default: UnansweredDefault,
) -> Resolved {
    match status {
        AnswerStatus::Yes => Resolved {
            label: kind.yes_label(),
            was_unanswered: false,
        },
        AnswerStatus::No => Resolved {
            label: kind.no_label(),
            was_unanswered: false,
        },
        AnswerStatus::Unanswered => Resolved {
            label: match default {
                UnansweredDefault::TokenLevel => kind.no_label(),
                UnansweredDefault::ClassLevel => 0,
            },
            was_unanswered: true,
        },
    }
}

/// Endpoint connection settings (JSON-configurable). When `fixture_path` is
/// set, a scripted fixture replaces the HTTP transport.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    pub endpoint_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub auth_token_env: Option<String>,
    pub max_in_flight: usize,
    pub timeout_seconds: u64,
    pub max_retries: u32,
    /// Base backoff delay in milliseconds; doubles per retry, capped at 5 s.
    pub retry_base_ms: u64,
    pub fixture_path: Option<std::path::PathBuf>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "local-model".into(),
            auth_token_env: None,
            max_in_flight: 4,
            timeout_seconds: 30,
            max_retries: 3,
            retry_base_ms: 100,
            fixture_path: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryError(pub String);

impl std::fmt::Display for QueryError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// A completion source. `index` identifies the record so scripted fixtures
/// stay deterministic under concurrent dispatch.
pub trait EndpointClient: Sync {
    fn complete(&self, index: usize, prompt: &str) -> std::result::Result<String, QueryError>;
}

/// One POST per record against a chat-completion endpoint, with
/// `max_tokens = 2` and `temperature = 0`. Transient failures (network,
/// 429, 5xx) retry with exponential backoff up to `max_retries` times.
pub struct HttpEndpoint {
    cfg: ClientConfig,
    client: reqwest::blocking::Client,
}

impl HttpEndpoint {
    pub fn new(cfg: ClientConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_seconds))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpEndpoint { cfg, client })
    }

    fn post_once(&self, prompt: &str) -> std::result::Result<String, (bool, String)> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": 2,
            "temperature": 0,
        });
        let mut request = self.client.post(&self.cfg.endpoint_url).json(&body);
        if let Some(var) = &self.cfg.auth_token_env {
            if let Ok(token) = std::env::var(var) {
                request = request.bearer_auth(token);
            }
        }
        let response = request
            .send()
            .map_err(|e| (true, format!("transport: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| (true, format!("body read: {e}")))?;
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err((retryable, format!("http {status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| (false, format!("malformed response body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| (false, "response missing choices[0].message.content".into()))
    }
}

impl EndpointClient for HttpEndpoint {
    fn complete(&self, _index: usize, prompt: &str) -> std::result::Result<String, QueryError> {
        let mut attempt = 0u32;
        loop {
            match self.post_once(prompt) {
                Ok(text) => return Ok(text),
                Err((retryable, message)) => {
                    if !retryable || attempt >= self.cfg.max_retries {
                        return Err(QueryError(message));
                    }
                    let delay = Duration::from_millis(self.cfg.retry_base_ms) * 2u32.pow(attempt);
                    std::thread::sleep(delay.min(Duration::from_secs(5)));
                    attempt += 1;
                }
            }
        }
    }
}

/// Scripted completions for offline runs and tests: per-index entries with an
/// optional default. `None` entries simulate endpoint failures.
#[derive(Debug, Clone, Default)]
pub struct FixtureEndpoint {
    completions: HashMap<usize, Option<String>>,
    default: Option<String>,
}

/// On-disk fixture shape: completions keyed by stay_id plus an optional
/// default applied to every other record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureFile {
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub completions: HashMap<String, String>,
}

impl FixtureEndpoint {
    pub fn new(completions: HashMap<usize, Option<String>>, default: Option<String>) -> Self {
        FixtureEndpoint {
            completions,
            default,
        }
    }

    /// Uniform completion for every record.
    pub fn constant(text: &str) -> Self {
        FixtureEndpoint {
            completions: HashMap::new(),
            default: Some(text.to_string()),
        }
    }

    /// Resolves a stay_id-keyed fixture file against the record order.
    pub fn for_records(file: &FixtureFile, stay_ids: &[String]) -> Self {
        let completions = stay_ids
            .iter()
            .enumerate()
            .filter_map(|(i, id)| file.completions.get(id).map(|text| (i, Some(text.clone()))))
            .collect();
        FixtureEndpoint {
            completions,
            default: file.default.clone(),
        }
    }
}

impl EndpointClient for FixtureEndpoint {
    fn complete(&self, index: usize, _prompt: &str) -> std::result::Result<String, QueryError> {
        match self.completions.get(&index) {
            Some(Some(text)) => Ok(text.clone()),
            Some(None) => Err(QueryError("scripted failure".into())),
            None => self
                .default
                .clone()
                .ok_or_else(|| QueryError("no scripted completion".into())),
        }
    }
}

/// Input to the harness: a stay's document text plus its true label.
#[derive(Debug, Clone)]
pub struct HarnessRecord {
    pub stay_id: String,
    pub text: String,
    pub label: u8,
}

/// One line of the per-record audit log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stay_id: String,
    pub prompt_hash: String,
    pub raw: String,
    pub status: AnswerStatus,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarnessTally {
    pub n_answered: usize,
    pub n_unanswered: usize,
    pub predictions: Vec<u8>,
    pub scores: Vec<f64>,
}

#[derive(Debug)]
pub struct HarnessOutcome {
    pub tally: HarnessTally,
    /// None when the true labels are single-class, which leaves both ranking
    /// metrics undefined.
    pub metrics: Option<MetricsReport>,
    pub audit: Vec<AuditEntry>,
}

/// Runs build -> query -> parse -> resolve for every record with at most
/// `max_in_flight` concurrent requests. Per-record failures become
/// UNANSWERED and never abort the batch; the audit log is ordered by record
/// index regardless of completion order.
pub fn run_harness(
    records: &[HarnessRecord],
    kind: PromptKind,
    client: &dyn EndpointClient,
    budget: usize,
    counter: &dyn TokenCounter,
    max_in_flight: usize,
    unanswered_default: UnansweredDefault,
) -> Result<HarnessOutcome> {
    let prompts: Vec<String> = records
        .iter()
        .map(|r| build_prompt(kind, &r.text, budget, counter))
        .collect::<Result<Vec<_>>>()?;

    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..records.len()).collect());
    let results: Vec<Mutex<Option<std::result::Result<String, QueryError>>>> =
        (0..records.len()).map(|_| Mutex::new(None)).collect();

    let workers = max_in_flight.max(1).min(records.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some(index) = next else { break };
                let outcome = client.complete(index, &prompts[index]);
                *results[index].lock().expect("slot lock") = Some(outcome);
            });
        }
    });

    let mut tally = HarnessTally {
        n_answered: 0,
        n_unanswered: 0,
        predictions: Vec::with_capacity(records.len()),
        scores: Vec::with_capacity(records.len()),
    };
    let mut audit = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let outcome = results[index]
            .lock()
            .expect("slot lock")
            .take()
            .expect("worker filled every slot");
        let parsed = match outcome {
            Ok(raw) => parse_answer(&raw),
            Err(e) => {
                log::warn!("record {}: query failed: {e}", record.stay_id);
                ParsedAnswer {
                    status: AnswerStatus::Unanswered,
                    raw: String::new(),
                }
            }
        };
        let resolved = resolve_prediction(parsed.status, kind, unanswered_default);
        if resolved.was_unanswered {
            tally.n_unanswered += 1;
        } else {
            tally.n_answered += 1;
        }
        tally.predictions.push(resolved.label);
        tally.scores.push(f64::from(resolved.label));
        audit.push(AuditEntry {
            stay_id: record.stay_id.clone(),
            prompt_hash: hex_sha256(&prompts[index]),
            raw: parsed.raw,
            status: parsed.status,
            label: resolved.label,
        });
    }
    debug_assert_eq!(tally.n_answered + tally.n_unanswered, records.len());

    // Resolved labels double as degenerate {0, 1} scores for the ranking
    // metrics; undefined cases (single-class truth) are reported as absent.
    let truth: Vec<u8> = records.iter().map(|r| r.label).collect();
    let metrics = ScoredSet::new(tally.scores.clone(), truth)
        .and_then(|set| {
            Ok(MetricsReport {
                auroc: auroc(&set)?,
                auprc: auprc(&set)?,
                n: set.len(),
                n_pos: set.n_positive(),
            })
        })
        .ok();

    Ok(HarnessOutcome {
        tally,
        metrics,
        audit,
    })
}

pub fn hex_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn write_audit_log(entries: &[AuditEntry], path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut bytes, entry)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

pub fn load_fixture(path: &Path) -> Result<FixtureFile> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
