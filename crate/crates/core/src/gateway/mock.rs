//! Deterministic scripted backend.
//!
//! A mock script is a line-delimited file of records, each tagged by `kind`:
//!
//! * `chat`: `{"prompt_sha256", "reply"}` exact reply for one prompt, keyed by
//!   [`chat_key`].
//! * `chat_rule`: ordered fallback rules. A rule applies when the prompt
//!   contains `contains` (if given). With `tags`, the rule finds the dominant
//!   tag (most occurrences, ties to the earlier tag) in the prompt, or in the
//!   `section` that starts at the given marker line, and substitutes it for
//!   `{tag}` in the reply. With `compare: [a, b]` the rule replies `reply` when
//!   sections `a` and `b` share a dominant tag and `reply_no` otherwise.
//!   `{digest}` expands to the first 8 hex digits of the prompt hash.
//! * `completion_table`: a finite-state next-token table. The prompt part of a
//!   prefix ends after the last occurrence of `anchor` (or is the whole
//!   prefix without an anchor); the text after it is the continuation so far
//!   and selects the state. A missing state means end of sequence. Tables are
//!   tried in order and filtered by `prompt_sha256` / `prompt_contains`.
//! * `embedding`: `{"dim", "seed"}` feature hashing of whitespace tokens, see
//!   [`hash_embedding`].
//! * `settings`: `{"eos_token"}`.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    sort_alternatives, Backend, BackendError, ChatMessage, Completion, EndpointKind, FinishReason,
    ModelEndpoint, TokenLogprob, TokenStep,
};
use crate::rng::sha256_hex;

/// Next-token distribution for one state, token → probability.
pub type Distribution = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Chat {
        prompt_sha256: String,
        reply: String,
    },
    ChatRule(ChatRule),
    CompletionTable(CompletionTable),
    Embedding {
        dim: usize,
        seed: u64,
    },
    Settings {
        eos_token: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<(String, String)>,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_no: Option<String>,
}

impl ChatRule {
    pub fn reply(reply: impl Into<String>) -> Self {
        Self {
            reply: reply.into(),
            ..Self::default()
        }
    }

    pub fn when(contains: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            contains: Some(contains.into()),
            reply: reply.into(),
            ..Self::default()
        }
    }

    fn apply(&self, text: &str, digest: &str) -> Option<String> {
        if let Some(needle) = &self.contains {
            if !text.contains(needle.as_str()) {
                return None;
            }
        }
        let fill = |template: &str, tag: Option<&str>| {
            let mut out = template.replace("{digest}", digest);
            if let Some(tag) = tag {
                out = out.replace("{tag}", tag);
            }
            out
        };
        if let Some((a, b)) = &self.compare {
            let ta = dominant_tag(section(text, a)?, &self.tags);
            let tb = dominant_tag(section(text, b)?, &self.tags);
            let same = ta.is_some() && ta == tb;
            return Some(if same {
                fill(&self.reply, ta)
            } else {
                fill(self.reply_no.as_deref().unwrap_or("NO"), None)
            });
        }
        if self.tags.is_empty() {
            return Some(fill(&self.reply, None));
        }
        let scope = match &self.section {
            Some(marker) => section(text, marker)?,
            None => text,
        };
        let tag = dominant_tag(scope, &self.tags)?;
        Some(fill(&self.reply, Some(tag)))
    }
}

/// Lines after the line equal to `marker`, up to the next line starting
/// with `[`.
fn section<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut start = None;
    for line in text.split_inclusive('\n') {
        let next = offset + line.len();
        match start {
            None if line.trim_end() == marker => start = Some(next),
            Some(s) if line.starts_with('[') => return Some(&text[s..offset]),
            _ => {}
        }
        offset = next;
    }
    start.map(|s| &text[s..])
}

fn dominant_tag<'a>(text: &str, tags: &'a [String]) -> Option<&'a str> {
    let mut best: Option<(&str, usize)> = None;
    for tag in tags {
        let n = text.matches(tag.as_str()).count();
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((tag, n));
        }
    }
    best.map(|(t, _)| t)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompletionTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_sha256: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    pub states: BTreeMap<String, Distribution>,
}

impl CompletionTable {
    pub fn new(states: BTreeMap<String, Distribution>) -> Self {
        Self {
            states,
            ..Self::default()
        }
    }

    /// Splits `prefix` into (prompt part, continuation so far) if this table
    /// applies to it.
    fn split<'a>(&self, prefix: &'a str) -> Option<(&'a str, &'a str)> {
        let (prompt, continuation) = match &self.anchor {
            Some(anchor) => {
                let at = prefix.rfind(anchor.as_str())? + anchor.len();
                prefix.split_at(at)
            }
            None => (prefix, ""),
        };
        if !self.prompt_sha256.is_empty() && !self.prompt_sha256.contains(&sha256_hex(prompt)) {
            return None;
        }
        if let Some(needle) = &self.prompt_contains {
            if !prompt.contains(needle.as_str()) {
                return None;
            }
        }
        Some((prompt, continuation))
    }

    fn validate(&self) -> Result<(), String> {
        for (state, dist) in &self.states {
            let mut total = 0.0;
            for (token, &p) in dist {
                if token.is_empty() {
                    return Err(format!("state {state:?}: empty token"));
                }
                if !(p > 0.0 && p <= 1.0) {
                    return Err(format!(
                        "state {state:?}: probability {p} of {token:?} outside (0, 1]"
                    ));
                }
                total += p;
            }
            if total > 1.0 + 1e-6 {
                return Err(format!("state {state:?}: probabilities sum to {total}"));
            }
        }
        Ok(())
    }
}

/// Parsed mock script.
#[derive(Debug, Clone, PartialEq)]
pub struct MockSpec {
    pub chat: BTreeMap<String, String>,
    pub chat_rules: Vec<ChatRule>,
    pub tables: Vec<CompletionTable>,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    pub eos_token: String,
}

impl Default for MockSpec {
    fn default() -> Self {
        Self {
            chat: BTreeMap::new(),
            chat_rules: Vec::new(),
            tables: Vec::new(),
            embedding_dim: 1536,
            embedding_seed: 0,
            eos_token: "<|eot_id|>".to_string(),
        }
    }
}

impl MockSpec {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut spec = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line)
                .map_err(|e| format!("mock script line {}: {e}", i + 1))?;
            match record {
                Record::Chat {
                    prompt_sha256,
                    reply,
                } => {
                    spec.chat.insert(prompt_sha256, reply);
                }
                Record::ChatRule(rule) => spec.chat_rules.push(rule),
                Record::CompletionTable(table) => {
                    table
                        .validate()
                        .map_err(|e| format!("mock script line {}: {e}", i + 1))?;
                    spec.tables.push(table);
                }
                Record::Embedding { dim, seed } => {
                    if dim == 0 {
                        return Err(format!("mock script line {}: dim must be > 0", i + 1));
                    }
                    spec.embedding_dim = dim;
                    spec.embedding_seed = seed;
                }
                Record::Settings { eos_token } => {
                    if let Some(eos) = eos_token {
                        spec.eos_token = eos;
                    }
                }
            }
        }
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self, String> {
        let file = std::fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| format!("{}: {e}", path.display()))?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    /// Serializes back to the line-delimited format.
    pub fn to_jsonl(&self) -> String {
        let mut records = vec![
            Record::Settings {
                eos_token: Some(self.eos_token.clone()),
            },
            Record::Embedding {
                dim: self.embedding_dim,
                seed: self.embedding_seed,
            },
        ];
        records.extend(self.chat.iter().map(|(k, v)| Record::Chat {
            prompt_sha256: k.clone(),
            reply: v.clone(),
        }));
        records.extend(self.chat_rules.iter().cloned().map(Record::ChatRule));
        records.extend(self.tables.iter().cloned().map(Record::CompletionTable));
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn with_chat(mut self, messages: &[ChatMessage], reply: impl Into<String>) -> Self {
        self.chat.insert(chat_key(messages), reply.into());
        self
    }

    pub fn with_rule(mut self, rule: ChatRule) -> Self {
        self.chat_rules.push(rule);
        self
    }

    pub fn with_table(mut self, table: CompletionTable) -> Self {
        self.tables.push(table);
        self
    }

    pub fn with_embedding(mut self, dim: usize, seed: u64) -> Self {
        self.embedding_dim = dim;
        self.embedding_seed = seed;
        self
    }

    fn chat_reply(&self, messages: &[ChatMessage]) -> Option<String> {
        let key = chat_key(messages);
        if let Some(reply) = self.chat.get(&key) {
            return Some(reply.clone());
        }
        let text = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        self.chat_rules
            .iter()
            .find_map(|rule| rule.apply(&text, &key[..8]))
    }

    /// Greedy decoding over the first applicable table.
    pub fn generate(
        &self,
        prefix: &str,
        max_tokens: usize,
        top_k: usize,
        stop: &[String],
    ) -> Option<Completion> {
        let (table, continuation) = self
            .tables
            .iter()
            .find_map(|t| t.split(prefix).map(|(_, c)| (t, c)))?;
        let mut state = continuation.to_string();
        let mut generated = String::new();
        let mut steps = Vec::new();
        while steps.len() < max_tokens {
            let Some(dist) = table.states.get(&state).filter(|d| !d.is_empty()) else {
                return Some(Completion {
                    steps,
                    finish: FinishReason::Eos,
                });
            };
            let mut alternatives: Vec<TokenLogprob> = dist
                .iter()
                .map(|(token, p)| TokenLogprob {
                    token: token.clone(),
                    logprob: p.ln(),
                })
                .collect();
            sort_alternatives(&mut alternatives);
            alternatives.truncate(top_k);
            let best = alternatives[0].clone();
            steps.push(TokenStep {
                token: best.token.clone(),
                logprob: best.logprob,
                alternatives,
            });
            if best.token == self.eos_token {
                return Some(Completion {
                    steps,
                    finish: FinishReason::Eos,
                });
            }
            state.push_str(&best.token);
            generated.push_str(&best.token);
            if stop
                .iter()
                .any(|s| !s.is_empty() && generated.contains(s.as_str()))
            {
                return Some(Completion {
                    steps,
                    finish: FinishReason::Stop,
                });
            }
        }
        Some(Completion {
            steps,
            finish: FinishReason::Length,
        })
    }
}

/// Key of a chat prompt: SHA-256 over `role\ncontent\n` for every message.
pub fn chat_key(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_str().as_bytes());
        hasher.update(b"\n");
        hasher.update(m.content.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Seeded feature hashing: every whitespace token adds ±1 at one coordinate.
/// For token `t`, `h = SHA-256(seed as 8 LE bytes ‖ t)`, the coordinate is the
/// first 8 bytes of `h` (LE u64) modulo `dim`, and the sign is `-` when the low
/// bit of `h[8]` is set. The sum is L2-normalized (zero stays zero).
pub fn hash_embedding(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for token in text.split_whitespace() {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let h = hasher.finalize();
        let mut idx = [0u8; 8];
        idx.copy_from_slice(&h[..8]);
        let i = (u64::from_le_bytes(idx) % dim as u64) as usize;
        v[i] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

type Responder = dyn Fn(&[ChatMessage]) -> Option<String> + Send + Sync;

/// Scripted backend with call counters, concurrency tracking and failure
/// injection.
pub struct MockBackend {
    spec: MockSpec,
    responder: Option<Arc<Responder>>,
    latency: Option<Duration>,
    logprobs: bool,
    calls: [AtomicUsize; 3],
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    failures: Mutex<VecDeque<BackendError>>,
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Self {
        Self {
            spec,
            responder: None,
            latency: None,
            logprobs: true,
            calls: Default::default(),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            failures: Mutex::new(VecDeque::new()),
        }
    }

    /// Programmatic chat replies, consulted before the spec.
    pub fn with_responder(
        mut self,
        f: impl Fn(&[ChatMessage]) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Arc::new(f));
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Simulates a completion server that cannot return logprobs.
    pub fn without_logprobs(mut self) -> Self {
        self.logprobs = false;
        self
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    /// Failures returned (in order) by the next backend calls.
    pub fn inject_failures(&self, errors: Vec<BackendError>) {
        self.failures.lock().expect("mock poisoned").extend(errors);
    }

    /// Backend calls made for one capability.
    pub fn calls(&self, kind: EndpointKind) -> usize {
        self.calls[kind as usize].load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn enter(&self, kind: EndpointKind) -> Result<InFlight<'_>, BackendError> {
        self.calls[kind as usize].fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let guard = InFlight { backend: self };
        if let Some(latency) = self.latency {
            std::thread::sleep(latency);
        }
        if let Some(err) = self.failures.lock().expect("mock poisoned").pop_front() {
            return Err(err);
        }
        Ok(guard)
    }
}

struct InFlight<'a> {
    backend: &'a MockBackend,
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.backend.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Backend for MockBackend {
    fn chat(
        &self,
        _endpoint: &ModelEndpoint,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError> {
        let _guard = self.enter(EndpointKind::Chat)?;
        if let Some(reply) = self.responder.as_ref().and_then(|f| f(messages)) {
            return Ok(reply);
        }
        self.spec
            .chat_reply(messages)
            .ok_or_else(|| BackendError::Permanent {
                status: 404,
                body: format!("mock: no scripted reply for prompt {}", chat_key(messages)),
            })
    }

    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        max_tokens: usize,
    ) -> Result<Completion, BackendError> {
        let _guard = self.enter(EndpointKind::Completion)?;
        if !self.logprobs {
            return Err(BackendError::Capability(
                "mock configured without logprobs".into(),
            ));
        }
        self.spec
            .generate(
                prompt,
                max_tokens,
                endpoint.params.top_k_logprobs,
                &endpoint.params.stop,
            )
            .ok_or_else(|| BackendError::Permanent {
                status: 404,
                body: format!(
                    "mock: no completion table matches prompt {}",
                    &sha256_hex(prompt)[..16]
                ),
            })
    }

    fn embed(
        &self,
        _endpoint: &ModelEndpoint,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, BackendError> {
        let _guard = self.enter(EndpointKind::Embedding)?;
        Ok(texts
            .iter()
            .map(|t| hash_embedding(t, self.spec.embedding_dim, self.spec.embedding_seed))
            .collect())
    }

    fn prompt_tokens(&self, prompt: &str) -> Option<usize> {
        Some(prompt.split_whitespace().count())
    }

    fn supports_logprobs(&self) -> bool {
        self.logprobs
    }
}
