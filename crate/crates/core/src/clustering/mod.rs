//! LLM-guided goal clustering.
//!
//! Each interaction is summarized by a chat model and the summaries are
//! embedded. k-means over the embeddings gives `k1` initial clusters, each of
//! which the chat model labels from sampled member and non-member summaries.
//! The merge loop then repeatedly takes the most similar pair of labels and
//! asks the model whether the two clusters should be merged, stopping once
//! every live cluster has failed to merge in a row.

pub mod baseline;
pub mod kmeans;
pub mod stability;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;
use std::time::Instant;

use rand::seq::index::sample;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Execution};
use crate::gateway::{EmbeddingVector, Gateway, GatewayError};
use crate::interaction::{concat_turns, Interaction, InteractionError, TurnFormat};
use crate::prompts::{bullet_list, fill, PromptCatalog};
use crate::rng::{derive_seed, seeded_rng};

pub use baseline::{baseline_llm_labels, BaselineLabels};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use stability::{adjusted_rand_index, assignment_ari, stability_matrix, StabilityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Summarize,
    Embed,
    Kmeans,
    Label,
    Merge,
    Baseline,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Summarize => "summarize",
            Phase::Embed => "embed",
            Phase::Kmeans => "kmeans",
            Phase::Label => "label",
            Phase::Merge => "merge",
            Phase::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Error)]
pub enum ClusteringError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("vector dimension {got} does not match {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label vector of cluster {cluster} has zero norm")]
    ZeroNorm { cluster: usize },
    #[error("the two runs cover different samples ({count} ids in the symmetric difference)")]
    IdMismatch { count: usize },
    #[error("model produced no label for {id}")]
    EmptyLabel { id: String },
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error("{phase}: {source}")]
    Gateway {
        phase: Phase,
        #[source]
        source: GatewayError,
    },
}

impl ClusteringError {
    fn gateway(phase: Phase) -> impl FnOnce(GatewayError) -> Self {
        move |source| ClusteringError::Gateway { phase, source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSummary {
    pub source_id: String,
    pub text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub member_ids: BTreeSet<String>,
    pub label: String,
    pub label_vector: EmbeddingVector,
    pub centroid: EmbeddingVector,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Live clusters in ascending id order.
    pub clusters: Vec<Cluster>,
    /// Cluster id per source id.
    pub assignments: BTreeMap<String, usize>,
}

impl ClusterSet {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn get(&self, id: usize) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    /// Checks that member lists and the assignment map agree and that every
    /// sample is assigned exactly once.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for c in &self.clusters {
            for m in &c.member_ids {
                if !seen.insert(m) {
                    return Err(format!("{m} is a member of more than one cluster"));
                }
                if self.assignments.get(m) != Some(&c.id) {
                    return Err(format!(
                        "{m} is listed in cluster {} but assigned elsewhere",
                        c.id
                    ));
                }
            }
        }
        if seen.len() != self.assignments.len() {
            return Err("assignment map lists samples outside every cluster".into());
        }
        Ok(())
    }
}

/// Label-similarity matrix. Masked entries read as negative infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    entries: Vec<Vec<f64>>,
    masked: Vec<Vec<bool>>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.masked[i][j] {
            f64::NEG_INFINITY
        } else {
            self.entries[i][j]
        }
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.masked[i][j]
    }

    pub fn mask(&mut self, i: usize, j: usize) {
        self.masked[i][j] = true;
        self.masked[j][i] = true;
    }

    /// Masks the whole row and column of `i`.
    pub fn mask_index(&mut self, i: usize) {
        for j in 0..self.len() {
            self.mask(i, j);
        }
    }

    /// Replaces row and column `i` with fresh similarities against the
    /// listed indices, unmasking them.
    fn set_row(&mut self, i: usize, values: &[(usize, f64)]) {
        for &(j, v) in values {
            if j != i {
                self.entries[i][j] = v;
                self.entries[j][i] = v;
                self.masked[i][j] = false;
                self.masked[j][i] = false;
            }
        }
    }

    /// Unmasks every pair of distinct indices in `live`.
    fn unmask_among(&mut self, live: &[usize]) {
        for &a in live {
            for &b in live {
                if a != b {
                    self.masked[a][b] = false;
                }
            }
        }
    }

    /// Largest unmasked entry above the diagonal; ties go to the
    /// lexicographically smallest `(i, j)`.
    pub fn argmax(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                if self.masked[i][j] {
                    continue;
                }
                let v = self.entries[i][j];
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        best
    }

    pub fn is_fully_masked(&self) -> bool {
        self.argmax().is_none()
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    (dot / (a.norm * b.norm)).clamp(-1.0, 1.0)
}

/// Pairwise cosine similarities with the diagonal masked. A zero-norm vector
/// is reported by its index.
pub fn similarity_matrix(vectors: &[EmbeddingVector]) -> Result<SimilarityMatrix, ClusteringError> {
    if let Some(first) = vectors.first() {
        if let Some(v) = vectors.iter().find(|v| v.dim() != first.dim()) {
            return Err(ClusteringError::DimensionMismatch {
                expected: first.dim(),
                got: v.dim(),
            });
        }
    }
    if let Some(i) = vectors.iter().position(|v| v.norm == 0.0) {
        return Err(ClusteringError::ZeroNorm { cluster: i });
    }
    let k = vectors.len();
    let mut entries = vec![vec![0.0; k]; k];
    let mut masked = vec![vec![false; k]; k];
    for i in 0..k {
        masked[i][i] = true;
        entries[i][i] = 1.0;
        for j in i + 1..k {
            let c = cosine(&vectors[i], &vectors[j]);
            entries[i][j] = c;
            entries[j][i] = c;
        }
    }
    Ok(SimilarityMatrix { entries, masked })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k1: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Summaries sampled per list in labeling and merge prompts.
    pub exemplars: usize,
    /// Application context paragraph placed before the summary prompt.
    pub context: Option<String>,
    #[serde(skip)]
    pub exec: Execution,
    #[serde(skip)]
    pub prompts: PromptCatalog,
    #[serde(skip)]
    pub format: TurnFormat,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k1: 8,
            seed: 0,
            max_iter: 100,
            exemplars: 10,
            context: None,
            exec: Execution::default(),
            prompts: PromptCatalog::default(),
            format: TurnFormat::default(),
        }
    }
}

pub fn summary_prompt(
    interaction: &Interaction,
    context: Option<&str>,
    prompts: &PromptCatalog,
    format: &TurnFormat,
) -> Result<String, ClusteringError> {
    let log = concat_turns(interaction, None, format)?;
    let context = context
        .filter(|c| !c.trim().is_empty())
        .map(|c| format!("{}\n", c.trim_end()))
        .unwrap_or_default();
    Ok(fill(
        &prompts.summarize,
        &[("context", &context), ("log", &log)],
    ))
}

pub fn summarize_goal(
    interaction: &Interaction,
    context: Option<&str>,
    gateway: &Gateway,
    prompts: &PromptCatalog,
    format: &TurnFormat,
) -> Result<GoalSummary, ClusteringError> {
    let prompt = summary_prompt(interaction, context, prompts, format)?;
    let text = gateway
        .ask(&prompt)
        .map_err(ClusteringError::gateway(Phase::Summarize))?;
    let text = text.trim().to_string();
    if text.is_empty() {
        return Err(ClusteringError::EmptyLabel {
            id: interaction.id().to_string(),
        });
    }
    let vector = gateway
        .embed(&text)
        .map_err(ClusteringError::gateway(Phase::Embed))?;
    Ok(GoalSummary {
        source_id: interaction.id().to_string(),
        text,
        vector,
    })
}

/// Summarizes and embeds a whole dataset. Summaries are requested
/// concurrently and embedded in one batch; the result is sorted by source id.
pub fn summarize_dataset(
    dataset: &[Interaction],
    config: &ClusteringConfig,
    gateway: &Gateway,
) -> Result<Vec<GoalSummary>, ClusteringError> {
    let texts = exec::try_map(config.exec, dataset, |it| {
        let prompt = summary_prompt(
            it,
            config.context.as_deref(),
            &config.prompts,
            &config.format,
        )?;
        let text = gateway
            .ask(&prompt)
            .map_err(ClusteringError::gateway(Phase::Summarize))?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(ClusteringError::EmptyLabel {
                id: it.id().to_string(),
            });
        }
        Ok(text)
    })?;
    let vectors = gateway
        .embed_batch(&texts)
        .map_err(ClusteringError::gateway(Phase::Embed))?;
    let mut out: Vec<GoalSummary> = dataset
        .iter()
        .zip(texts)
        .zip(vectors)
        .map(|((it, text), vector)| GoalSummary {
            source_id: it.id().to_string(),
            text,
            vector,
        })
        .collect();
    out.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(out)
}

fn sample_texts<'a>(pool: &[&'a GoalSummary], n: usize, seed: u64) -> Vec<&'a str> {
    let mut rng = seeded_rng(seed);
    let mut idx = sample(&mut rng, pool.len(), n.min(pool.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i].text.as_str()).collect()
}

/// The labeling prompt: up to `exemplars` positives and negatives, each
/// sampled without replacement with `seed`.
pub fn describe_prompt(
    positives: &[&GoalSummary],
    negatives: &[&GoalSummary],
    prompts: &PromptCatalog,
    exemplars: usize,
    seed: u64,
) -> String {
    let group = bullet_list(sample_texts(
        positives,
        exemplars,
        derive_seed(seed, "group"),
    ));
    let not_in_group = bullet_list(sample_texts(
        negatives,
        exemplars,
        derive_seed(seed, "not_in_group"),
    ));
    fill(
        &prompts.describe_cluster,
        &[("group", &group), ("not_in_group", &not_in_group)],
    )
}

pub fn describe_cluster(
    positives: &[&GoalSummary],
    negatives: &[&GoalSummary],
    gateway: &Gateway,
    prompts: &PromptCatalog,
    exemplars: usize,
    seed: u64,
) -> Result<String, ClusteringError> {
    if positives.is_empty() {
        return Err(ClusteringError::Precondition(
            "a cluster description needs at least one member".into(),
        ));
    }
    let prompt = describe_prompt(positives, negatives, prompts, exemplars, seed);
    let label = gateway
        .ask(&prompt)
        .map_err(ClusteringError::gateway(Phase::Label))?;
    Ok(label.trim().to_string())
}

pub fn merge_prompt(
    group_1: &[&GoalSummary],
    group_2: &[&GoalSummary],
    unrelated: &[&GoalSummary],
    prompts: &PromptCatalog,
    exemplars: usize,
    seed: u64,
) -> String {
    let g1 = bullet_list(sample_texts(
        group_1,
        exemplars,
        derive_seed(seed, "group_1"),
    ));
    let g2 = bullet_list(sample_texts(
        group_2,
        exemplars,
        derive_seed(seed, "group_2"),
    ));
    let other = bullet_list(sample_texts(
        unrelated,
        exemplars,
        derive_seed(seed, "not_in_group"),
    ));
    fill(
        &prompts.merge,
        &[("group_1", &g1), ("group_2", &g2), ("not_in_group", &other)],
    )
}

/// Whether a merge reply starts with an affirmative word. Anything else,
/// including an empty reply, counts as a refusal.
pub fn is_affirmative(reply: &str) -> bool {
    static YES: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?i)^\s*(yes|true|merge)").expect("valid regex"));
    YES.is_match(reply)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// As many consecutive refusals as there are live clusters.
    FailureLimit,
    /// No unmasked pair left to ask about.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub cluster_a: usize,
    pub cluster_b: usize,
    pub similarity: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStats {
    pub k_initial: usize,
    pub k_final: usize,
    pub queries: usize,
    pub accepts: usize,
    pub rejects: usize,
    /// Empty clusters absorbed without asking the model.
    pub empty_merged: usize,
    /// Consecutive refusals at termination.
    pub final_failures: usize,
    pub termination: Termination,
    pub decisions: Vec<MergeDecision>,
}

type SummaryIndex<'a> = BTreeMap<&'a str, &'a GoalSummary>;

fn index_summaries(summaries: &[GoalSummary]) -> SummaryIndex<'_> {
    summaries
        .iter()
        .map(|s| (s.source_id.as_str(), s))
        .collect()
}

fn members<'a>(
    cluster: &Cluster,
    index: &SummaryIndex<'a>,
) -> Result<Vec<&'a GoalSummary>, ClusteringError> {
    cluster
        .member_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| ClusteringError::Precondition(format!("no summary for member {id}")))
        })
        .collect()
}

fn centroid_of(points: &[&GoalSummary]) -> EmbeddingVector {
    let dim = points[0].vector.dim();
    let mut sum = vec![0.0; dim];
    for p in points {
        for (s, x) in sum.iter_mut().zip(&p.vector.values) {
            *s += x;
        }
    }
    for s in sum.iter_mut() {
        *s /= points.len() as f64;
    }
    EmbeddingVector::new(sum)
}

/// Runs the merge loop. `matrix` must be index-aligned with
/// `clusterset.clusters`.
pub fn merge_pass(
    clusterset: ClusterSet,
    mut matrix: SimilarityMatrix,
    summaries: &[GoalSummary],
    gateway: &Gateway,
    config: &ClusteringConfig,
) -> Result<(ClusterSet, MergeStats), ClusteringError> {
    if matrix.len() != clusterset.clusters.len() {
        return Err(ClusteringError::Precondition(format!(
            "matrix has {} rows for {} clusters",
            matrix.len(),
            clusterset.clusters.len()
        )));
    }
    let index = index_summaries(summaries);
    let k_initial = clusterset.k();
    let mut assignments = clusterset.assignments;
    let mut slots: Vec<Option<Cluster>> = clusterset.clusters.into_iter().map(Some).collect();
    let mut stats = MergeStats {
        k_initial,
        k_final: k_initial,
        queries: 0,
        accepts: 0,
        rejects: 0,
        empty_merged: 0,
        final_failures: 0,
        termination: Termination::Exhausted,
        decisions: Vec::new(),
    };
    for (i, slot) in slots.iter_mut().enumerate() {
        if slot.as_ref().is_some_and(|c| c.member_ids.is_empty()) {
            *slot = None;
            matrix.mask_index(i);
            stats.empty_merged += 1;
        }
    }
    let mut failures = 0;
    loop {
        let live = slots.iter().filter(|s| s.is_some()).count();
        if live > 0 && failures >= live {
            stats.termination = Termination::FailureLimit;
            break;
        }
        let Some((i, j, similarity)) = matrix.argmax() else {
            stats.termination = Termination::Exhausted;
            break;
        };
        stats.queries += 1;
        let (a, b) = (
            slots[i].as_ref().expect("unmasked pair is live"),
            slots[j].as_ref().expect("unmasked pair is live"),
        );
        let group_1 = members(a, &index)?;
        let group_2 = members(b, &index)?;
        let mut unrelated = Vec::new();
        for (l, c) in slots.iter().enumerate() {
            if let Some(c) = c.as_ref().filter(|_| l != i && l != j) {
                unrelated.extend(members(c, &index)?);
            }
        }
        unrelated.sort_by(|x, y| x.source_id.cmp(&y.source_id));
        let seed = derive_seed(config.seed, &format!("merge:{}", stats.queries));
        let prompt = merge_prompt(
            &group_1,
            &group_2,
            &unrelated,
            &config.prompts,
            config.exemplars,
            seed,
        );
        let reply = gateway
            .ask(&prompt)
            .map_err(ClusteringError::gateway(Phase::Merge))?;
        let accepted = is_affirmative(&reply);
        stats.decisions.push(MergeDecision {
            cluster_a: a.id,
            cluster_b: b.id,
            similarity,
            accepted,
        });
        log::debug!(
            "merge query {}: clusters {} and {} (similarity {similarity:.4}) -> {}",
            stats.queries,
            a.id,
            b.id,
            if accepted { "merge" } else { "keep" }
        );
        if !accepted {
            matrix.mask(i, j);
            failures += 1;
            stats.rejects += 1;
            continue;
        }
        let absorbed = slots[j].take().expect("checked live");
        matrix.mask_index(j);
        let mut merged = slots[i].take().expect("checked live");
        for m in &absorbed.member_ids {
            assignments.insert(m.clone(), merged.id);
        }
        merged.member_ids.extend(absorbed.member_ids);
        let positives = members(&merged, &index)?;
        let mut negatives = unrelated;
        negatives.retain(|s| !merged.member_ids.contains(&s.source_id));
        let seed = derive_seed(
            config.seed,
            &format!("describe:{}:merge:{}", merged.id, stats.queries),
        );
        merged.label = describe_cluster(
            &positives,
            &negatives,
            gateway,
            &config.prompts,
            config.exemplars,
            seed,
        )
        .map_err(|e| match e {
            ClusteringError::Gateway { source, .. } => ClusteringError::Gateway {
                phase: Phase::Merge,
                source,
            },
            other => other,
        })?;
        merged.label_vector = gateway
            .embed(&merged.label)
            .map_err(ClusteringError::gateway(Phase::Merge))?;
        if merged.label_vector.norm == 0.0 {
            return Err(ClusteringError::ZeroNorm { cluster: merged.id });
        }
        merged.centroid = centroid_of(&positives);
        let row: Vec<(usize, f64)> = slots
            .iter()
            .enumerate()
            .filter_map(|(l, c)| {
                c.as_ref()
                    .map(|c| (l, cosine(&merged.label_vector, &c.label_vector)))
            })
            .collect();
        matrix.set_row(i, &row);
        // A merge changes the candidate set, so earlier refusals are asked
        // again; the failure count restarts with them.
        let live: Vec<usize> = row.iter().map(|&(l, _)| l).collect();
        matrix.unmask_among(&live);
        slots[i] = Some(merged);
        failures = 0;
        stats.accepts += 1;
    }
    stats.final_failures = failures;
    let clusters: Vec<Cluster> = slots.into_iter().flatten().collect();
    stats.k_final = clusters.len();
    assignments.retain(|_, c| clusters.iter().any(|k| k.id == *c));
    Ok((
        ClusterSet {
            clusters,
            assignments,
        },
        stats,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansSummary {
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
    pub inertia_history: Vec<f64>,
}

/// Deterministic facts about a clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringManifest {
    pub seed: u64,
    pub k1: usize,
    pub k_final: usize,
    /// Logical gateway requests per phase, cache hits included.
    pub llm_calls: BTreeMap<Phase, u64>,
    pub merge_accepts: usize,
    pub merge_rejects: usize,
    pub merge_queries: usize,
    pub termination: Termination,
    /// Clusters left empty by k-means and dropped before labeling.
    pub empty_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringRun {
    pub clusters: ClusterSet,
    pub initial: ClusterSet,
    pub summaries: Vec<GoalSummary>,
    pub kmeans: KMeansSummary,
    pub merge: MergeStats,
    pub manifest: ClusteringManifest,
    /// Wall time per phase in milliseconds; not reproducible.
    pub timings_ms: BTreeMap<Phase, f64>,
}

struct PhaseClock<'a> {
    gateway: &'a Gateway,
    calls: BTreeMap<Phase, u64>,
    timings: BTreeMap<Phase, f64>,
}

impl<'a> PhaseClock<'a> {
    fn run<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let before = self.gateway.stats().requests;
        let start = Instant::now();
        let out = f();
        *self.timings.entry(phase).or_default() += start.elapsed().as_secs_f64() * 1e3;
        *self.calls.entry(phase).or_default() += self.gateway.stats().requests - before;
        out
    }
}

/// Summarize, embed, k-means, label and merge.
pub fn run_clustering(
    dataset: &[Interaction],
    config: &ClusteringConfig,
    gateway: &Gateway,
) -> Result<ClusteringRun, ClusteringError> {
    check_dataset(dataset, config.k1)?;
    let start = Instant::now();
    let before = gateway.stats().requests;
    let summaries = summarize_dataset(dataset, config, gateway)?;
    let calls = gateway.stats().requests - before;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut run = cluster_summaries(summaries, config, gateway)?;
    // Summaries and their embeddings are requested together.
    run.manifest.llm_calls.insert(Phase::Summarize, calls);
    run.timings_ms.insert(Phase::Summarize, elapsed);
    Ok(run)
}

fn check_dataset(dataset: &[Interaction], k1: usize) -> Result<(), ClusteringError> {
    if k1 == 0 {
        return Err(ClusteringError::Precondition(
            "k1 must be at least 1".into(),
        ));
    }
    if k1 > dataset.len() {
        return Err(ClusteringError::Precondition(format!(
            "k1 = {k1} exceeds the dataset size ({})",
            dataset.len()
        )));
    }
    let mut ids = BTreeSet::new();
    for it in dataset {
        if !ids.insert(it.id()) {
            return Err(ClusteringError::Precondition(format!(
                "duplicate id {}",
                it.id()
            )));
        }
    }
    Ok(())
}

/// Everything after summarization. Separate so that repeated runs can share
/// one set of summaries.
pub fn cluster_summaries(
    mut summaries: Vec<GoalSummary>,
    config: &ClusteringConfig,
    gateway: &Gateway,
) -> Result<ClusteringRun, ClusteringError> {
    if config.k1 == 0 || config.k1 > summaries.len() {
        return Err(ClusteringError::Precondition(format!(
            "k1 = {} must be between 1 and the number of summaries ({})",
            config.k1,
            summaries.len()
        )));
    }
    summaries.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let mut clock = PhaseClock {
        gateway,
        calls: BTreeMap::new(),
        timings: BTreeMap::new(),
    };

    let vectors: Vec<Vec<f64>> = summaries.iter().map(|s| s.vector.values.clone()).collect();
    let km_config = KMeansConfig {
        k: config.k1,
        seed: derive_seed(config.seed, "kmeans"),
        max_iter: config.max_iter,
        exec: config.exec,
    };
    let km = clock.run(Phase::Kmeans, || kmeans(&vectors, &km_config))?;

    let mut groups: Vec<BTreeSet<String>> = vec![BTreeSet::new(); config.k1];
    for (s, &a) in summaries.iter().zip(&km.assignments) {
        groups[a].insert(s.source_id.clone());
    }
    let empty_dropped = groups.iter().filter(|g| g.is_empty()).count();
    let live: Vec<(usize, BTreeSet<String>)> = groups
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .collect();

    let index = index_summaries(&summaries);
    let (labels, label_vectors) = clock.run(Phase::Label, || {
        let labels = exec::try_map(config.exec, &live, |(id, group)| {
            let positives: Vec<&GoalSummary> = group.iter().map(|m| index[m.as_str()]).collect();
            let negatives: Vec<&GoalSummary> = summaries
                .iter()
                .filter(|s| !group.contains(&s.source_id))
                .collect();
            let seed = derive_seed(config.seed, &format!("describe:{id}:initial"));
            describe_cluster(
                &positives,
                &negatives,
                gateway,
                &config.prompts,
                config.exemplars,
                seed,
            )
        })?;
        let vectors = gateway
            .embed_batch(&labels)
            .map_err(ClusteringError::gateway(Phase::Label))?;
        Ok::<_, ClusteringError>((labels, vectors))
    })?;

    let clusters: Vec<Cluster> = live
        .into_iter()
        .zip(labels)
        .zip(label_vectors)
        .map(|(((id, member_ids), label), label_vector)| Cluster {
            id,
            member_ids,
            label,
            label_vector,
            centroid: EmbeddingVector::new(km.centroids[id].clone()),
        })
        .collect();
    let assignments = clusters
        .iter()
        .flat_map(|c| c.member_ids.iter().map(move |m| (m.clone(), c.id)))
        .collect();
    let initial = ClusterSet {
        clusters,
        assignments,
    };
    let matrix = similarity_matrix(
        &initial
            .clusters
            .iter()
            .map(|c| c.label_vector.clone())
            .collect::<Vec<_>>(),
    )
    .map_err(|e| match e {
        ClusteringError::ZeroNorm { cluster } => ClusteringError::ZeroNorm {
            cluster: initial.clusters[cluster].id,
        },
        other => other,
    })?;

    let (clusters, merge) = clock.run(Phase::Merge, || {
        merge_pass(initial.clone(), matrix, &summaries, gateway, config)
    })?;

    let manifest = ClusteringManifest {
        seed: config.seed,
        k1: config.k1,
        k_final: clusters.k(),
        llm_calls: clock.calls.clone(),
        merge_accepts: merge.accepts,
        merge_rejects: merge.rejects,
        merge_queries: merge.queries,
        termination: merge.termination,
        empty_dropped,
    };
    Ok(ClusteringRun {
        clusters,
        initial,
        summaries,
        kmeans: KMeansSummary {
            iterations: km.iterations,
            converged: km.converged,
            reseeds: km.reseeds,
            inertia_history: km.inertia_history,
        },
        merge,
        manifest,
        timings_ms: clock.timings,
    })
}

/// Nearest centroid by Euclidean distance; ties go to the lowest cluster id.
pub fn assign_unseen(
    summary: &GoalSummary,
    clusterset: &ClusterSet,
) -> Result<(usize, f64), ClusteringError> {
    let mut best: Option<(usize, f64)> = None;
    let mut clusters: Vec<&Cluster> = clusterset.clusters.iter().collect();
    clusters.sort_by_key(|c| c.id);
    for c in clusters {
        if c.centroid.dim() != summary.vector.dim() {
            return Err(ClusteringError::DimensionMismatch {
                expected: c.centroid.dim(),
                got: summary.vector.dim(),
            });
        }
        let d = kmeans::squared_distance(&summary.vector.values, &c.centroid.values).sqrt();
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((c.id, d));
        }
    }
    best.ok_or_else(|| ClusteringError::Precondition("cluster set is empty".into()))
}
