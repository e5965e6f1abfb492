//! Response trees: an approximation of the distribution of responses to a
//! prompt, built from the top-k logprobs of greedy generations.
//!
//! Starting from the prompt, the greedy continuation is generated and every
//! step's alternatives are inspected. Alternatives that pass the threshold
//! start new branches: the partial response up to and including the
//! alternative token is appended to the prompt and generated greedily again.
//! Expansion is breadth-first over branches and stops when every branch has
//! reached end of sequence or the node budget runs out.
//!
//! Two readings of the threshold `alpha` are supported:
//!
//! * [`ThresholdMode::PerToken`]: an alternative of rank 2..k branches when its
//!   own token probability is at least `alpha`.
//! * [`ThresholdMode::PathMass`]: an alternative branches when the probability
//!   of the whole path through it is at least `alpha`.
//!
//! In both modes the greedy continuation of every branch is always followed,
//! so the greedy decoding of the prompt is always one of the leaves.

pub mod stats;

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::template::{render_prompt, ChatTemplate, TemplateError};
use crate::gateway::{EndpointKind, FinishReason, Gateway, GatewayError};
use crate::interaction::{Interaction, Role};

pub use stats::{correlate, histogram, tree_stats, Bin, TreeRecord, TreeStats};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("unknown threshold mode {0:?} (expected per_token or path_mass)")]
    UnknownMode(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("histogram of an empty series")]
    EmptySeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    PerToken,
    PathMass,
}

impl ThresholdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdMode::PerToken => "per_token",
            ThresholdMode::PathMass => "path_mass",
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_token" => Ok(ThresholdMode::PerToken),
            "path_mass" => Ok(ThresholdMode::PathMass),
            other => Err(TreeError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub alpha: f64,
    pub mode: ThresholdMode,
    /// Maximum number of nodes below the root.
    pub budget: usize,
    /// Maximum response length in tokens; defaults to the completion
    /// endpoint's `max_output_tokens`.
    pub max_depth: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            mode: ThresholdMode::PerToken,
            budget: 256,
            max_depth: None,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(TreeError::InvalidAlpha(self.alpha));
        }
        if self.budget == 0 {
            return Err(TreeError::Precondition("budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub token: String,
    pub token_logprob: f64,
    pub path_logprob: f64,
    pub depth: usize,
    pub children: Vec<usize>,
    pub leaf: bool,
    /// Leaf created by the node budget or the depth limit rather than by end
    /// of sequence.
    pub cut: bool,
}

/// One line of a tree dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord<'a> {
    pub id: usize,
    pub parent: Option<usize>,
    pub token: &'a str,
    pub token_logprob: f64,
    pub path_logprob: f64,
    pub leaf: bool,
    pub cut: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTree {
    pub root_prompt: String,
    pub alpha: f64,
    pub mode: ThresholdMode,
    pub top_k: usize,
    pub budget: usize,
    pub max_depth: usize,
    /// Node 0 is the root: empty token, log-probability 0.
    pub nodes: Vec<TreeNode>,
    pub leaf_count: usize,
    pub max_branch_logprob: f64,
    pub budget_exhausted: bool,
    /// Some branch stopped at the depth limit.
    pub depth_limited: bool,
    /// Tokens of the greedy decoding, end-of-sequence token included when the
    /// model emitted one.
    pub greedy: Vec<String>,
}

impl ResponseTree {
    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.leaf)
    }

    /// Whether any leaf was cut by budget or depth.
    pub fn is_cut(&self) -> bool {
        self.budget_exhausted || self.depth_limited
    }

    /// Tokens from the root to `node`.
    pub fn path_tokens(&self, mut node: usize) -> Vec<String> {
        let mut out = Vec::new();
        while let Some(parent) = self.nodes[node].parent {
            out.push(self.nodes[node].token.clone());
            node = parent;
        }
        out.reverse();
        out
    }

    /// Token sequence and path log-probability of every leaf, in node order.
    pub fn leaf_paths(&self) -> Vec<(Vec<String>, f64)> {
        self.leaves()
            .map(|n| (self.path_tokens(n.id), n.path_logprob))
            .collect()
    }

    /// Sum of leaf probabilities.
    pub fn leaf_mass(&self) -> f64 {
        self.leaves().map(|n| n.path_logprob.exp()).sum()
    }

    /// Node records, one JSON object per line.
    pub fn dump_jsonl(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let rec = NodeRecord {
                id: n.id,
                parent: n.parent,
                token: &n.token,
                token_logprob: n.token_logprob,
                path_logprob: n.path_logprob,
                leaf: n.leaf,
                cut: n.cut,
            };
            out.push_str(&serde_json::to_string(&rec).expect("node record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Prompt of an interaction's final response: everything before the last
/// assistant message, rendered with an open assistant turn. Interactions
/// that end with a user or tool message are rendered whole.
pub fn tree_prefix(
    interaction: &Interaction,
    template: &ChatTemplate,
) -> Result<String, TreeError> {
    let mut messages = interaction.messages();
    if messages.last().map(|(r, _)| *r) == Some(Role::Assistant) {
        messages.pop();
    }
    Ok(render_prompt(&messages, None, template)?)
}

struct Branch {
    node: usize,
    partial: String,
}

struct Builder {
    nodes: Vec<TreeNode>,
    budget: usize,
    budget_exhausted: bool,
    depth_limited: bool,
}

impl Builder {
    fn full(&self) -> bool {
        self.nodes.len() > self.budget
    }

    fn push(&mut self, parent: usize, token: &str, logprob: f64) -> usize {
        let id = self.nodes.len();
        let p = &self.nodes[parent];
        let node = TreeNode {
            id,
            parent: Some(parent),
            token: token.to_string(),
            token_logprob: logprob,
            path_logprob: p.path_logprob + logprob,
            depth: p.depth + 1,
            children: Vec::new(),
            leaf: false,
            cut: false,
        };
        self.nodes[parent].children.push(id);
        self.nodes.push(node);
        id
    }

    fn end(&mut self, node: usize, cut: bool) {
        self.nodes[node].leaf = true;
        self.nodes[node].cut = cut;
    }
}

/// Builds the response tree of `prefix`, a fully rendered prompt that ends
/// where the response begins.
pub fn build_tree(
    prefix: &str,
    config: &TreeConfig,
    gateway: &Gateway,
) -> Result<ResponseTree, TreeError> {
    config.validate()?;
    let endpoint = gateway
        .endpoint(EndpointKind::Completion)
        .ok_or(GatewayError::NoEndpoint(EndpointKind::Completion))?;
    let top_k = endpoint.params.top_k_logprobs;
    if top_k < 2 {
        return Err(TreeError::Precondition(format!(
            "branching needs at least 2 logprobs per step, endpoint returns {top_k}"
        )));
    }
    let eos = endpoint.params.eos_token.clone();
    let max_depth = config
        .max_depth
        .unwrap_or(endpoint.params.max_output_tokens);
    let min_logprob = config.alpha.ln();

    let mut b = Builder {
        nodes: vec![TreeNode {
            id: 0,
            parent: None,
            token: String::new(),
            token_logprob: 0.0,
            path_logprob: 0.0,
            depth: 0,
            children: Vec::new(),
            leaf: false,
            cut: false,
        }],
        budget: config.budget,
        budget_exhausted: false,
        depth_limited: false,
    };
    let mut greedy = Vec::new();
    let mut queue = VecDeque::from([Branch {
        node: 0,
        partial: String::new(),
    }]);

    while let Some(branch) = queue.pop_front() {
        if b.budget_exhausted {
            b.end(branch.node, true);
            continue;
        }
        let depth = b.nodes[branch.node].depth;
        if depth >= max_depth {
            b.end(branch.node, true);
            b.depth_limited = true;
            continue;
        }
        let prompt = format!("{prefix}{}", branch.partial);
        let completion = gateway.complete_with_logprobs(&prompt, Some(max_depth - depth))?;
        let is_root = branch.node == 0;
        let mut current = branch.node;
        let mut partial = branch.partial;
        let mut ended = false;
        for step in &completion.steps {
            if b.full() {
                b.budget_exhausted = true;
                break;
            }
            let parent = current;
            current = b.push(parent, &step.token, step.logprob);
            if is_root {
                greedy.push(step.token.clone());
            }
            let parent_logprob = b.nodes[parent].path_logprob;
            for (rank, alt) in step.alternatives.iter().enumerate() {
                if alt.token == step.token || rank >= top_k {
                    continue;
                }
                let keep = match config.mode {
                    ThresholdMode::PerToken => alt.logprob >= min_logprob,
                    ThresholdMode::PathMass => parent_logprob + alt.logprob >= min_logprob,
                };
                if !keep {
                    continue;
                }
                if b.full() {
                    b.budget_exhausted = true;
                    break;
                }
                let node = b.push(parent, &alt.token, alt.logprob);
                if alt.token == eos {
                    b.end(node, false);
                } else {
                    queue.push_back(Branch {
                        node,
                        partial: format!("{partial}{}", alt.token),
                    });
                }
            }
            if step.token == eos {
                ended = true;
                break;
            }
            partial.push_str(&step.token);
        }
        if ended {
            b.end(current, false);
        } else if b.budget_exhausted {
            b.end(current, true);
        } else {
            match completion.finish {
                FinishReason::Eos | FinishReason::Stop => b.end(current, false),
                FinishReason::Length => {
                    b.end(current, true);
                    b.depth_limited = true;
                }
            }
        }
    }

    let leaf_count = b.nodes.iter().filter(|n| n.leaf).count();
    let max_branch_logprob = b
        .nodes
        .iter()
        .filter(|n| n.leaf)
        .map(|n| n.path_logprob)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ResponseTree {
        root_prompt: prefix.to_string(),
        alpha: config.alpha,
        mode: config.mode,
        top_k,
        budget: config.budget,
        max_depth,
        nodes: b.nodes,
        leaf_count,
        max_branch_logprob,
        budget_exhausted: b.budget_exhausted,
        depth_limited: b.depth_limited,
        greedy,
    })
}
