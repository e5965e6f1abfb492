//! LLM-only labeling baseline: one sequential pass in which the model either
//! reuses categories it has already produced or invents a new one.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ClusteringError;
use crate::gateway::Gateway;
use crate::interaction::{concat_turns, Interaction, TurnFormat};
use crate::prompts::{fill, PromptCatalog};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineLabels {
    /// Labels chosen per sample id.
    pub labels: BTreeMap<String, Vec<String>>,
    /// Categories in the order the model introduced them.
    pub categories: Vec<String>,
}

impl BaselineLabels {
    /// Samples per category; a sample with several labels counts once for each.
    pub fn category_sizes(&self) -> BTreeMap<&str, usize> {
        let mut sizes = BTreeMap::new();
        for labels in self.labels.values() {
            for l in labels {
                *sizes.entry(l.as_str()).or_insert(0) += 1;
            }
        }
        sizes
    }
}

/// Splits a reply into labels on newlines and commas, dropping bullets,
/// numbering and duplicates.
pub fn parse_labels(reply: &str) -> Vec<String> {
    static BULLET: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]|\d+[.)])\s*").expect("valid regex"));
    let mut out: Vec<String> = Vec::new();
    for part in reply.split(['\n', ',']) {
        let label = BULLET.replace(part, "");
        let label = label.trim().trim_matches('"').trim();
        if !label.is_empty() && !out.iter().any(|l| l == label) {
            out.push(label.to_string());
        }
    }
    out
}

pub fn baseline_llm_labels(
    dataset: &[Interaction],
    gateway: &Gateway,
    prompts: &PromptCatalog,
    format: &TurnFormat,
) -> Result<BaselineLabels, ClusteringError> {
    let mut result = BaselineLabels::default();
    for interaction in dataset {
        let log = concat_turns(interaction, None, format)?;
        let prompt = if result.categories.is_empty() {
            fill(&prompts.baseline_first, &[("log", &log)])
        } else {
            let categories: String = result
                .categories
                .iter()
                .map(|c| format!(" - {c}\n"))
                .collect();
            fill(
                &prompts.baseline_next,
                &[("categories", &categories), ("log", &log)],
            )
        };
        let reply = gateway
            .ask(&prompt)
            .map_err(|source| ClusteringError::Gateway {
                phase: super::Phase::Baseline,
                source,
            })?;
        let labels = parse_labels(&reply);
        if labels.is_empty() {
            return Err(ClusteringError::EmptyLabel {
                id: interaction.id().to_string(),
            });
        }
        for l in &labels {
            if !result.categories.contains(l) {
                result.categories.push(l.clone());
            }
        }
        result.labels.insert(interaction.id().to_string(), labels);
    }
    Ok(result)
}
