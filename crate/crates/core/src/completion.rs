//! Completion labeling: decides whether an interaction's goal was reached.
//!
//! The main strategy continues the serialized conversation with a completion
//! model trained on finished interactions that end in an end tag. If the
//! model's next output is the end tag (or nothing at all), nothing remains to
//! be done and the interaction is labeled complete. Two baselines are
//! provided: an instruction prompt asking for the remaining tasks, and a
//! yes/no judge on a chat endpoint.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::is_affirmative;
use crate::exec::{self, Execution};
use crate::gateway::{FinishReason, Gateway, GatewayError};
use crate::interaction::{
    concat_turns, truncate_interaction, Interaction, InteractionError, TurnFormat,
};
use crate::prompts::{fill, PromptCatalog, INSTRUCT_END_MARKER};

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("unknown strategy {0:?} (expected finetuned_continuation, instruct_prompt or judge)")]
    UnknownStrategy(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no ground-truth label for {id}")]
    MissingLabel { id: String },
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error("{id}: {source}")]
    Gateway {
        id: String,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    FinetunedContinuation,
    InstructPrompt,
    Judge,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FinetunedContinuation => "finetuned_continuation",
            Strategy::InstructPrompt => "instruct_prompt",
            Strategy::Judge => "judge",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = CompletionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "finetuned_continuation" => Ok(Strategy::FinetunedContinuation),
            "instruct_prompt" => Ok(Strategy::InstructPrompt),
            "judge" => Ok(Strategy::Judge),
            other => Err(CompletionError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionVerdict {
    pub source_id: String,
    pub predicted_complete: bool,
    /// Raw model output (the judge's reply for the judge strategy).
    pub continuation: String,
    pub matched_pattern: Option<String>,
    pub strategy: Strategy,
}

pub fn default_patterns() -> Vec<String> {
    vec![
        "<end>".into(),
        "end system".into(),
        INSTRUCT_END_MARKER.into(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionConfig {
    pub strategy: Strategy,
    /// End patterns tried in order.
    pub patterns: Vec<String>,
    /// Patterns must start within this many characters of the normalized text.
    pub match_window: usize,
    /// Require the normalized continuation to equal a pattern exactly.
    pub strict: bool,
    pub max_continuation_tokens: usize,
    /// Whether an immediate end of sequence counts as complete.
    pub empty_is_complete: bool,
    #[serde(skip)]
    pub exec: Execution,
    #[serde(skip)]
    pub prompts: PromptCatalog,
    #[serde(skip)]
    pub format: TurnFormat,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::default(),
            patterns: default_patterns(),
            match_window: 32,
            strict: false,
            max_continuation_tokens: 64,
            empty_is_complete: true,
            exec: Execution::default(),
            prompts: PromptCatalog::default(),
            format: TurnFormat::default(),
        }
    }
}

fn normalize(text: &str) -> String {
    text.trim_start_matches(['\n', '\r']).trim().to_lowercase()
}

/// First pattern that the normalized continuation starts with, where the
/// match must lie inside the first `window` characters. In strict mode the
/// normalized continuation must equal the pattern.
pub fn match_end_tag(
    continuation: &str,
    patterns: &[String],
    window: usize,
    strict: bool,
) -> Option<String> {
    let text = normalize(continuation);
    let head: String = text.chars().take(window).collect();
    patterns
        .iter()
        .find(|p| {
            let p = normalize(p);
            if p.is_empty() {
                return false;
            }
            if strict {
                text == p
            } else {
                p.chars().count() <= window && head.starts_with(&p)
            }
        })
        .cloned()
}

fn gateway_err(id: &str) -> impl FnOnce(GatewayError) -> CompletionError + '_ {
    move |source| CompletionError::Gateway {
        id: id.to_string(),
        source,
    }
}

/// Prompt sent for `strategy`; the judge prompt is a single chat message.
pub fn completion_prompt(
    interaction: &Interaction,
    config: &CompletionConfig,
) -> Result<String, CompletionError> {
    let log = concat_turns(interaction, None, &config.format)?;
    Ok(match config.strategy {
        Strategy::FinetunedContinuation => log,
        Strategy::InstructPrompt => fill(&config.prompts.instruct_completion, &[("log", &log)]),
        Strategy::Judge => fill(&config.prompts.judge, &[("log", &log)]),
    })
}

pub fn label_completion(
    interaction: &Interaction,
    gateway: &Gateway,
    config: &CompletionConfig,
) -> Result<CompletionVerdict, CompletionError> {
    if config.strategy == Strategy::FinetunedContinuation && config.patterns.is_empty() {
        return Err(CompletionError::Precondition(
            "no end patterns configured".into(),
        ));
    }
    let id = interaction.id();
    let prompt = completion_prompt(interaction, config)?;
    let (predicted_complete, continuation, matched_pattern) = match config.strategy {
        Strategy::FinetunedContinuation => {
            let out = gateway
                .complete_with_logprobs(&prompt, Some(config.max_continuation_tokens))
                .map_err(gateway_err(id))?;
            let eos = gateway
                .endpoint(crate::gateway::EndpointKind::Completion)
                .map(|e| e.params.eos_token.clone())
                .unwrap_or_default();
            let text = out.text(&eos);
            let matched =
                match_end_tag(&text, &config.patterns, config.match_window, config.strict);
            let empty = text.trim().is_empty() && out.finish == FinishReason::Eos;
            (
                matched.is_some() || (empty && config.empty_is_complete),
                text,
                matched,
            )
        }
        Strategy::InstructPrompt => {
            let out = gateway
                .complete_with_logprobs(&prompt, Some(config.max_continuation_tokens))
                .map_err(gateway_err(id))?;
            let eos = gateway
                .endpoint(crate::gateway::EndpointKind::Completion)
                .map(|e| e.params.eos_token.clone())
                .unwrap_or_default();
            let text = out.text(&eos);
            let found = text.to_lowercase().contains(INSTRUCT_END_MARKER);
            (found, text, found.then(|| INSTRUCT_END_MARKER.to_string()))
        }
        Strategy::Judge => {
            let reply = gateway.ask(&prompt).map_err(gateway_err(id))?;
            let yes = is_affirmative(&reply);
            (yes, reply, None)
        }
    };
    Ok(CompletionVerdict {
        source_id: id.to_string(),
        predicted_complete,
        continuation,
        matched_pattern,
        strategy: config.strategy,
    })
}

/// Labels every interaction, concurrently when enabled. Output order follows
/// the dataset.
pub fn label_dataset(
    dataset: &[Interaction],
    gateway: &Gateway,
    config: &CompletionConfig,
) -> Result<Vec<CompletionVerdict>, CompletionError> {
    exec::try_map(config.exec, dataset, |it| {
        label_completion(it, gateway, config)
    })
}

/// Full interactions labeled complete plus one truncated copy of each
/// multi-turn interaction labeled incomplete.
pub fn evaluation_set<R: Rng + ?Sized>(dataset: &[Interaction], rng: &mut R) -> Vec<Interaction> {
    let mut out = Vec::with_capacity(dataset.len() * 2);
    for it in dataset {
        out.push(it.clone().with_complete_label(Some(true)));
    }
    for it in dataset {
        if let Ok(t) = truncate_interaction(it, rng) {
            out.push(t);
        }
    }
    out
}

/// Ground-truth labels of a dataset; every interaction must carry one.
pub fn labels_of(dataset: &[Interaction]) -> Result<BTreeMap<String, bool>, CompletionError> {
    dataset
        .iter()
        .map(|it| {
            it.complete_label()
                .map(|l| (it.id().to_string(), l))
                .ok_or_else(|| CompletionError::MissingLabel {
                    id: it.id().to_string(),
                })
        })
        .collect()
}

/// Confusion counts with "complete" as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// Metrics whose denominator was zero; their value is reported as 0.
    pub flags: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ClassificationReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let mut flags = Vec::new();
        let mut get = |v: Option<f64>, name: &str| {
            v.unwrap_or_else(|| {
                flags.push(format!("undefined_{name}"));
                0.0
            })
        };
        let accuracy = get(ratio(tp + tn, tp + fp + fn_ + tn), "accuracy");
        let precision = get(ratio(tp, tp + fp), "precision");
        let recall = get(ratio(tp, tp + fn_), "recall");
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            flags.push("undefined_f1".into());
            0.0
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
            flags,
        }
    }

    /// The same confusion counts with "incomplete" as the positive class.
    pub fn swapped(&self) -> Self {
        Self::from_counts(self.tn, self.fn_, self.fp, self.tp)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn classification_metrics(
    verdicts: &[CompletionVerdict],
    labels: &BTreeMap<String, bool>,
) -> Result<ClassificationReport, CompletionError> {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for v in verdicts {
        let truth = *labels
            .get(&v.source_id)
            .ok_or_else(|| CompletionError::MissingLabel {
                id: v.source_id.clone(),
            })?;
        match (v.predicted_complete, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(ClassificationReport::from_counts(tp, fp, fn_, tn))
}
