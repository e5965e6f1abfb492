//! HTTP+JSON backend for OpenAI-compatible inference servers.
//!
//! Field mapping:
//!
//! | capability | request | response |
//! |---|---|---|
//! | chat | `POST {base}/chat/completions` `{model, messages[], temperature}` | `choices[0].message.content` |
//! | completion | `POST {base}/completions` `{model, prompt, max_tokens, logprobs: k, temperature: 0}` (+ `stop` when set) | `choices[0].logprobs.{tokens, token_logprobs, top_logprobs}`, `finish_reason` |
//! | embedding | `POST {base}/embeddings` `{model, input[]}` | `data[i].embedding` ordered by `data[i].index` |
//!
//! `GOALGAUGE_API_KEY`, when set, is sent as a bearer token.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    Backend, BackendError, ChatMessage, Completion, FinishReason, ModelEndpoint, TokenLogprob,
    TokenStep,
};

static REQUESTS_SENT: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests issued by any [`HttpBackend`] in this process.
pub fn requests_sent() -> u64 {
    REQUESTS_SENT.load(Ordering::SeqCst)
}

pub struct HttpBackend {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        Self {
            agent: config.into(),
            api_key: std::env::var("GOALGAUGE_API_KEY")
                .ok()
                .filter(|k| !k.is_empty()),
        }
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        REQUESTS_SENT.fetch_add(1, Ordering::SeqCst);
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| BackendError::Transient {
                status: None,
                message: e.to_string(),
            })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient {
                status: Some(status),
                message: format!("reading body: {e}"),
            })?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| BackendError::Other(format!("invalid JSON from {url}: {e}"))),
            429 | 500..=599 => Err(BackendError::Transient {
                status: Some(status),
                message: excerpt(&text),
            }),
            _ => Err(BackendError::Permanent {
                status,
                body: excerpt(&text),
            }),
        }
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(300).collect()
}

fn url(endpoint: &ModelEndpoint, path: &str) -> String {
    format!("{}/{path}", endpoint.base_url.trim_end_matches('/'))
}

fn malformed(what: &str) -> BackendError {
    BackendError::Other(format!("malformed response: missing {what}"))
}

/// Request body for the completions route.
pub fn completion_request(endpoint: &ModelEndpoint, prompt: &str, max_tokens: usize) -> Value {
    let mut body = json!({
        "model": endpoint.model_name,
        "prompt": prompt,
        "max_tokens": max_tokens,
        "logprobs": endpoint.params.top_k_logprobs,
        "temperature": 0,
    });
    if !endpoint.params.stop.is_empty() {
        body["stop"] = json!(endpoint.params.stop);
    }
    body
}

/// Converts a completions response into token steps.
pub fn parse_completion(body: &Value, eos_token: &str) -> Result<Completion, BackendError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| malformed("choices[0]"))?;
    let logprobs = choice
        .get("logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| {
            BackendError::Capability("completion response carries no logprobs".into())
        })?;
    let tokens = logprobs
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.tokens"))?;
    let token_logprobs = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("logprobs.token_logprobs"))?;
    let top = logprobs
        .get("top_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| {
            BackendError::Capability("completion response carries no top_logprobs".into())
        })?;
    if tokens.len() != token_logprobs.len() || tokens.len() != top.len() {
        return Err(BackendError::Other(
            "logprob arrays differ in length".into(),
        ));
    }
    let mut steps = Vec::with_capacity(tokens.len());
    for ((token, lp), alts) in tokens.iter().zip(token_logprobs).zip(top) {
        let token = token
            .as_str()
            .ok_or_else(|| malformed("token text"))?
            .to_string();
        let logprob = lp.as_f64().ok_or_else(|| malformed("token logprob"))?;
        let mut alternatives: Vec<TokenLogprob> = alts
            .as_object()
            .ok_or_else(|| malformed("top_logprobs entry"))?
            .iter()
            .map(|(t, v)| {
                v.as_f64()
                    .map(|logprob| TokenLogprob {
                        token: t.clone(),
                        logprob,
                    })
                    .ok_or_else(|| malformed("top logprob value"))
            })
            .collect::<Result<_, _>>()?;
        if !alternatives.iter().any(|a| a.token == token) {
            alternatives.push(TokenLogprob {
                token: token.clone(),
                logprob,
            });
        }
        super::sort_alternatives(&mut alternatives);
        steps.push(TokenStep {
            token,
            logprob,
            alternatives,
        });
    }
    let finish = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        _ if steps.last().is_some_and(|s| s.token == eos_token) => FinishReason::Eos,
        Some("stop") | None => FinishReason::Eos,
        Some(_) => FinishReason::Stop,
    };
    Ok(Completion { steps, finish })
}

impl Backend for HttpBackend {
    fn chat(
        &self,
        endpoint: &ModelEndpoint,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError> {
        let body = json!({
            "model": endpoint.model_name,
            "messages": messages
                .iter()
                .map(|m| json!({ "role": m.role.as_str(), "content": m.content }))
                .collect::<Vec<_>>(),
            "temperature": endpoint.params.temperature,
        });
        let resp = self.post(&url(endpoint, "chat/completions"), &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed("choices[0].message.content"))
    }

    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        max_tokens: usize,
    ) -> Result<Completion, BackendError> {
        let body = completion_request(endpoint, prompt, max_tokens);
        let resp = self.post(&url(endpoint, "completions"), &body)?;
        parse_completion(&resp, &endpoint.params.eos_token)
    }

    fn embed(
        &self,
        endpoint: &ModelEndpoint,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({ "model": endpoint.model_name, "input": texts });
        let resp = self.post(&url(endpoint, "embeddings"), &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("data"))?;
        let mut rows: Vec<(u64, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let index = row.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
                let v = row
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| malformed("data[].embedding"))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| malformed("embedding value")))
                    .collect::<Result<Vec<f64>, _>>()?;
                Ok((index, v))
            })
            .collect::<Result<_, BackendError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
