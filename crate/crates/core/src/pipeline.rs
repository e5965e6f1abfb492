//! Config-driven batch runs.
//!
//! Artifacts are first written with a `.partial` suffix and renamed once every
//! selected metric has succeeded; a failed run leaves its `.partial` files
//! behind for inspection. `manifest.json` lists every artifact with its
//! SHA-256 and holds only reproducible facts, so identical configs give
//! identical manifests. Wall times and cache statistics go to
//! `run_stats.json`, which is not part of the artifact list.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::clustering::{
    self, baseline_llm_labels, cluster_summaries, stability::best_alignment_trace,
    summarize_dataset, ClusteringConfig, ClusteringRun, GoalSummary,
};
use crate::completion::{self, CompletionConfig};
use crate::config::{ConfigError, EvaluationSet, RunConfig};
use crate::gateway::http::HttpBackend;
use crate::gateway::mock::{MockBackend, MockSpec};
use crate::gateway::{Backend, CacheMode, EndpointKind, Gateway, GatewayStats, ResponseCache};
use crate::interaction::{
    export_sft_pairs, ingest_dataset, write_dataset, Interaction, TurnFormat,
};
use crate::prompts::PromptCatalog;
use crate::report::{render_report, write_atomic, Report, ReportFormat, StabilitySummary};
use crate::rng::{derive_seed, seeded_rng, sha256_hex};
use crate::rtree::{build_tree, tree_prefix, tree_stats, ResponseTree, TreeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Ingest,
    ExportSft,
    Cluster,
    Stability,
    Baseline,
    Completion,
    Rtree,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Ingest,
        Metric::ExportSft,
        Metric::Cluster,
        Metric::Stability,
        Metric::Baseline,
        Metric::Completion,
        Metric::Rtree,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ingest => "ingest",
            Metric::ExportSft => "export-sft",
            Metric::Cluster => "cluster",
            Metric::Stability => "stability",
            Metric::Baseline => "baseline",
            Metric::Completion => "completion",
            Metric::Rtree => "rtree",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{metric}: {message}")]
    Phase {
        metric: &'static str,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }

    fn phase(metric: Metric) -> impl FnOnce(String) -> Self {
        move |message| PipelineError::Phase {
            metric: metric.as_str(),
            message,
        }
    }
}

fn fail<E: std::fmt::Display>(metric: Metric) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::phase(metric)(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Reproducible record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<Metric>,
    pub inputs: Vec<FileEntry>,
    /// Logical gateway requests per metric, cache hits included.
    pub llm_calls: BTreeMap<String, u64>,
    pub results: BTreeMap<String, Value>,
    pub notes: Vec<String>,
    pub artifacts: Vec<FileEntry>,
}

impl RunManifest {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("manifest serializes"))
    }
}

/// Non-reproducible facts about a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub wall_ms: BTreeMap<String, f64>,
    pub clustering_phase_ms: BTreeMap<String, f64>,
    pub requests: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
    pub retries: u64,
}

struct ArtifactWriter {
    dir: PathBuf,
    files: BTreeMap<String, FileEntry>,
}

impl ArtifactWriter {
    fn partial_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.partial"))
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), PipelineError> {
        let path = self.partial_path(name);
        write_atomic(&path, contents).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        self.files.insert(
            name.to_string(),
            FileEntry {
                path: name.to_string(),
                sha256: sha256_hex(contents),
                bytes: contents.len() as u64,
            },
        );
        Ok(())
    }

    fn report(&mut self, report: &Report<'_>, metric: Metric) -> Result<(), PipelineError> {
        for f in render_report(report, ReportFormat::Jsonl).map_err(fail(metric))? {
            self.write(&f.name, f.contents.as_bytes())?;
        }
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), PipelineError> {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn commit(&self) -> Result<Vec<FileEntry>, PipelineError> {
        for name in self.files.keys() {
            let from = self.partial_path(name);
            let to = self.dir.join(name);
            std::fs::rename(&from, &to).map_err(|source| PipelineError::Io {
                path: to.display().to_string(),
                source,
            })?;
        }
        Ok(self.files.values().cloned().collect())
    }
}

/// Builds the gateway for the configured endpoints. Mock endpoints sharing a
/// script share one backend.
pub fn build_gateway(config: &RunConfig) -> Result<Gateway, PipelineError> {
    let cache_dir = config
        .cache_dir
        .as_ref()
        .map(|d| config.resolve(d))
        .or_else(|| std::env::var_os("GOALGAUGE_CACHE_DIR").map(PathBuf::from));
    let cache = match (&cache_dir, config.no_cache) {
        (Some(dir), false) => {
            ResponseCache::persistent(dir).map_err(|source| PipelineError::Io {
                path: dir.display().to_string(),
                source,
            })?
        }
        _ => ResponseCache::in_memory(),
    };
    let mut gateway = Gateway::new()
        .with_cache(Arc::new(cache))
        .with_cache_mode(if config.no_cache {
            CacheMode::Off
        } else {
            CacheMode::ReadWrite
        })
        .with_retry(config.retry.clone());
    let mut mocks: HashMap<PathBuf, Arc<MockBackend>> = HashMap::new();
    for kind in [
        EndpointKind::Chat,
        EndpointKind::Completion,
        EndpointKind::Embedding,
    ] {
        let Some(ep) = config.endpoints.get(kind) else {
            continue;
        };
        let endpoint = ep.to_endpoint(kind);
        let backend: Arc<dyn Backend> = match ep.mock_script() {
            Some(script) => {
                let path = config.resolve(Path::new(script));
                if let Some(b) = mocks.get(&path) {
                    b.clone()
                } else {
                    let spec = MockSpec::from_path(&path).map_err(|m| {
                        ConfigError::invalid(format!("endpoints.{kind}.base_url"), m)
                    })?;
                    let b = Arc::new(MockBackend::new(spec));
                    mocks.insert(path, b.clone());
                    b
                }
            }
            None => Arc::new(HttpBackend::new(std::time::Duration::from_millis(
                endpoint.timeout_ms,
            ))),
        };
        gateway = gateway
            .with_route(endpoint, backend)
            .map_err(|e| ConfigError::invalid(format!("endpoints.{kind}"), e.to_string()))?;
    }
    Ok(gateway)
}

fn require(config: &RunConfig, kind: EndpointKind, metric: Metric) -> Result<(), PipelineError> {
    if config.endpoints.get(kind).is_none() {
        return Err(ConfigError::invalid(
            format!("endpoints.{kind}"),
            format!("required by {}", metric.as_str()),
        )
        .into());
    }
    Ok(())
}

fn load_datasets(config: &RunConfig) -> Result<(Vec<Interaction>, Vec<FileEntry>), PipelineError> {
    let mut all = Vec::new();
    let mut inputs = Vec::new();
    for p in &config.datasets {
        let path = config.resolve(p);
        let bytes = std::fs::read(&path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        inputs.push(FileEntry {
            path: p.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        all.extend(ingest_dataset(&path).map_err(fail(Metric::Ingest))?);
    }
    let mut seen = std::collections::BTreeSet::new();
    for it in &all {
        if !seen.insert(it.id()) {
            return Err(PipelineError::phase(Metric::Ingest)(format!(
                "id {} appears in more than one dataset",
                it.id()
            )));
        }
    }
    Ok((all, inputs))
}

struct Context<'a> {
    config: &'a RunConfig,
    gateway: Gateway,
    dataset: Vec<Interaction>,
    format: TurnFormat,
    prompts: PromptCatalog,
    writer: ArtifactWriter,
    results: BTreeMap<String, Value>,
    notes: Vec<String>,
    stats: RunStats,
    summaries: Option<Vec<GoalSummary>>,
    clustering: Option<ClusteringRun>,
}

impl Context<'_> {
    fn clustering_config(&self) -> Result<ClusteringConfig, PipelineError> {
        let context = match &self.config.cluster.context_path {
            Some(p) => {
                let path = self.config.resolve(p);
                Some(
                    std::fs::read_to_string(&path).map_err(|source| PipelineError::Io {
                        path: path.display().to_string(),
                        source,
                    })?,
                )
            }
            None => None,
        };
        Ok(ClusteringConfig {
            k1: self.config.cluster.k1,
            seed: self.config.seed,
            max_iter: self.config.cluster.max_iter,
            exemplars: self.config.cluster.exemplars,
            context,
            exec: self.config.execution,
            prompts: self.prompts.clone(),
            format: self.format.clone(),
        })
    }

    fn summaries(&mut self, metric: Metric) -> Result<Vec<GoalSummary>, PipelineError> {
        if let Some(s) = &self.summaries {
            return Ok(s.clone());
        }
        let cfg = self.clustering_config()?;
        if cfg.k1 > self.dataset.len() {
            return Err(ConfigError::invalid(
                "cluster.k1",
                format!(
                    "k1 = {} exceeds the dataset size ({})",
                    cfg.k1,
                    self.dataset.len()
                ),
            )
            .into());
        }
        let s = summarize_dataset(&self.dataset, &cfg, &self.gateway).map_err(fail(metric))?;
        self.writer.report(&Report::Summaries(&s), metric)?;
        self.summaries = Some(s.clone());
        Ok(s)
    }

    fn cluster_run(&mut self, metric: Metric) -> Result<ClusteringRun, PipelineError> {
        if let Some(run) = &self.clustering {
            return Ok(run.clone());
        }
        let summaries = self.summaries(metric)?;
        let cfg = self.clustering_config()?;
        let run = cluster_summaries(summaries, &cfg, &self.gateway).map_err(fail(metric))?;
        for (phase, ms) in &run.timings_ms {
            self.stats
                .clustering_phase_ms
                .insert(phase.to_string(), *ms);
        }
        self.clustering = Some(run.clone());
        Ok(run)
    }

    fn run_metric(&mut self, metric: Metric) -> Result<(), PipelineError> {
        match metric {
            Metric::Ingest => {
                let mut buf = Vec::new();
                write_dataset(&self.dataset, &mut buf).map_err(fail(metric))?;
                self.writer.write("dataset.jsonl", &buf)?;
                let mut turns: BTreeMap<usize, usize> = BTreeMap::new();
                for it in &self.dataset {
                    *turns.entry(it.n_turns()).or_default() += 1;
                }
                self.results.insert(
                    "ingest".into(),
                    json!({ "interactions": self.dataset.len(), "n_turns": turns }),
                );
            }
            Metric::ExportSft => {
                let pairs = export_sft_pairs(&self.dataset, &self.config.sft.end_tag, &self.format)
                    .map_err(fail(metric))?;
                self.writer.report(&Report::Sft(&pairs), metric)?;
                self.results
                    .insert("export-sft".into(), json!({ "pairs": pairs.len() }));
            }
            Metric::Cluster => {
                require(self.config, EndpointKind::Chat, metric)?;
                require(self.config, EndpointKind::Embedding, metric)?;
                let run = self.cluster_run(metric)?;
                self.writer
                    .report(&Report::Clusters(&run.clusters), metric)?;
                let initial = render_report(&Report::Clusters(&run.initial), ReportFormat::Jsonl)
                    .map_err(fail(metric))?;
                self.writer
                    .write("clusters_initial.jsonl", initial[0].contents.as_bytes())?;
                let decisions: String = run
                    .merge
                    .decisions
                    .iter()
                    .map(|d| serde_json::to_string(d).expect("decision serializes") + "\n")
                    .collect();
                self.writer
                    .write("merge_decisions.jsonl", decisions.as_bytes())?;
                self.writer.json("cluster_manifest.json", &run.manifest)?;
                self.writer.json("kmeans.json", &run.kmeans)?;
                self.results.insert(
                    "cluster".into(),
                    json!({
                        "k1": run.manifest.k1,
                        "k_final": run.manifest.k_final,
                        "merge_accepts": run.manifest.merge_accepts,
                        "merge_rejects": run.manifest.merge_rejects,
                        "termination": run.manifest.termination,
                    }),
                );
            }
            Metric::Stability => {
                require(self.config, EndpointKind::Chat, metric)?;
                require(self.config, EndpointKind::Embedding, metric)?;
                let run_a = self.cluster_run(metric)?;
                let summaries = self.summaries(metric)?;
                let cfg = self.clustering_config()?;
                // The second run asks the model again instead of replaying
                // the first run's answers; only the summaries are shared.
                let fresh = self.gateway.view(CacheMode::WriteOnly);
                let run_b = cluster_summaries(summaries, &cfg, &fresh).map_err(fail(metric))?;
                let matrix = clustering::stability_matrix(&run_a.clusters, &run_b.clusters)
                    .map_err(fail(metric))?;
                let ari = clustering::assignment_ari(
                    &run_a.clusters.assignments,
                    &run_b.clusters.assignments,
                )
                .map_err(fail(metric))?;
                let (_, _, raw) = clustering::stability::contingency(
                    &run_a.clusters.assignments,
                    &run_b.clusters.assignments,
                )
                .map_err(fail(metric))?;
                let summary = StabilitySummary {
                    ari,
                    trace: matrix.trace(),
                    best_trace: best_alignment_trace(&raw),
                    total: matrix.total(),
                    k_run_a: run_a.clusters.k(),
                    k_run_b: run_b.clusters.k(),
                };
                self.writer.report(
                    &Report::Stability {
                        matrix: &matrix,
                        summary: &summary,
                    },
                    metric,
                )?;
                let b = render_report(&Report::Clusters(&run_b.clusters), ReportFormat::Jsonl)
                    .map_err(fail(metric))?;
                self.writer
                    .write("clusters_run_b.jsonl", b[0].contents.as_bytes())?;
                self.results.insert(
                    "stability".into(),
                    json!({ "ari": ari, "trace": summary.trace }),
                );
            }
            Metric::Baseline => {
                require(self.config, EndpointKind::Chat, metric)?;
                let labels =
                    baseline_llm_labels(&self.dataset, &self.gateway, &self.prompts, &self.format)
                        .map_err(fail(metric))?;
                self.writer.report(&Report::Baseline(&labels), metric)?;
                self.results.insert(
                    "baseline".into(),
                    json!({ "categories": labels.categories.len() }),
                );
            }
            Metric::Completion => {
                let strategy = self.config.strategy()?;
                let kind = match strategy {
                    completion::Strategy::Judge => EndpointKind::Chat,
                    _ => EndpointKind::Completion,
                };
                require(self.config, kind, metric)?;
                let c = &self.config.completion;
                let cfg = CompletionConfig {
                    strategy,
                    patterns: c.patterns.clone(),
                    match_window: c.match_window,
                    strict: c.strict,
                    max_continuation_tokens: c.max_continuation_tokens,
                    empty_is_complete: c.empty_is_complete,
                    exec: self.config.execution,
                    prompts: self.prompts.clone(),
                    format: self.format.clone(),
                };
                let eval = match c.evaluation {
                    EvaluationSet::Truncate => {
                        let mut rng = seeded_rng(derive_seed(self.config.seed, "truncate"));
                        completion::evaluation_set(&self.dataset, &mut rng)
                    }
                    EvaluationSet::Labels => self.dataset.clone(),
                };
                let labels = completion::labels_of(&eval).map_err(fail(metric))?;
                let verdicts =
                    completion::label_dataset(&eval, &self.gateway, &cfg).map_err(fail(metric))?;
                let report =
                    completion::classification_metrics(&verdicts, &labels).map_err(fail(metric))?;
                self.writer.report(&Report::Verdicts(&verdicts), metric)?;
                self.writer
                    .report(&Report::Classification(&report), metric)?;
                self.results.insert(
                    "completion".into(),
                    serde_json::to_value(&report).expect("report serializes"),
                );
            }
            Metric::Rtree => {
                require(self.config, EndpointKind::Completion, metric)?;
                let r = &self.config.rtree;
                let cfg = TreeConfig {
                    alpha: r.alpha,
                    mode: self.config.mode()?,
                    budget: r.budget,
                    max_depth: r.max_depth,
                };
                let prefixes: Vec<(String, String)> = self
                    .dataset
                    .iter()
                    .map(|it| Ok((it.id().to_string(), tree_prefix(it, &r.template)?)))
                    .collect::<Result<_, crate::rtree::TreeError>>()
                    .map_err(fail(metric))?;
                let gateway = &self.gateway;
                let trees: Vec<ResponseTree> =
                    crate::exec::try_map(self.config.execution, &prefixes, |(_, p)| {
                        build_tree(p, &cfg, gateway)
                    })
                    .map_err(fail(metric))?;
                let mut index = Vec::new();
                for (i, ((id, prefix), tree)) in prefixes.iter().zip(&trees).enumerate() {
                    let name = format!("rtree/trees/{i:05}.jsonl");
                    self.writer.write(&name, tree.dump_jsonl().as_bytes())?;
                    index.push(json!({
                        "source_id": id,
                        "file": name,
                        "leaf_count": tree.leaf_count,
                        "max_branch_logprob": tree.max_branch_logprob,
                        "budget_exhausted": tree.budget_exhausted,
                        "depth_limited": tree.depth_limited,
                        "interaction_length_chars": prefix.chars().count(),
                    }));
                }
                let top_k = trees.first().map(|t| t.top_k).unwrap_or_default();
                self.writer.json(
                    "rtree/manifest.json",
                    &json!({
                        "alpha": cfg.alpha,
                        "mode": cfg.mode,
                        "k": top_k,
                        "budget": cfg.budget,
                        "budget_exhausted": trees.iter().filter(|t| t.budget_exhausted).count(),
                        "trees": index,
                    }),
                )?;
                let triples: Vec<(String, ResponseTree, usize)> = prefixes
                    .into_iter()
                    .zip(trees)
                    .map(|((id, p), t)| (id, t, p.chars().count()))
                    .collect();
                let stats = tree_stats(&triples, r.bins, r.include_cut).map_err(fail(metric))?;
                self.writer.report(&Report::TreeStats(&stats), metric)?;
                self.notes.push(format!(
                    "response trees see only the top {top_k} alternatives per step"
                ));
                self.results.insert(
                    "rtree".into(),
                    json!({ "trees": triples.len(), "excluded": stats.excluded.len() }),
                );
            }
        }
        Ok(())
    }
}

/// Runs the selected metrics and writes their artifacts plus
/// `manifest.json` and `run_stats.json` into the output directory.
pub fn run_pipeline(config: &RunConfig, metrics: &[Metric]) -> Result<RunManifest, PipelineError> {
    config.validate()?;
    let mut metrics = metrics.to_vec();
    metrics.sort();
    metrics.dedup();
    if metrics.is_empty() {
        return Err(PipelineError::phase(Metric::Ingest)(
            "no metric selected".into(),
        ));
    }
    let format = match &config.turn_template {
        Some(t) => TurnFormat::new(t.clone())
            .map_err(|e| ConfigError::invalid("turn_template", e.to_string()))?,
        None => TurnFormat::default(),
    };
    let prompts = PromptCatalog::load(
        config
            .prompts_dir
            .as_ref()
            .map(|d| config.resolve(d))
            .as_deref(),
    )
    .map_err(|e| ConfigError::invalid("prompts_dir", e.to_string()))?;
    let gateway = build_gateway(config)?;
    let out = config.output_path();
    std::fs::create_dir_all(&out).map_err(|source| PipelineError::Io {
        path: out.display().to_string(),
        source,
    })?;
    let (dataset, inputs) = load_datasets(config)?;
    log::info!("loaded {} interactions", dataset.len());

    let mut ctx = Context {
        config,
        gateway,
        dataset,
        format,
        prompts,
        writer: ArtifactWriter {
            dir: out.clone(),
            files: BTreeMap::new(),
        },
        results: BTreeMap::new(),
        notes: Vec::new(),
        stats: RunStats::default(),
        summaries: None,
        clustering: None,
    };
    let mut llm_calls = BTreeMap::new();
    for &metric in &metrics {
        let start = Instant::now();
        let before = ctx.gateway.stats().requests;
        log::info!("running {}", metric.as_str());
        ctx.run_metric(metric)?;
        llm_calls.insert(
            metric.as_str().to_string(),
            ctx.gateway.stats().requests - before,
        );
        ctx.stats.wall_ms.insert(
            metric.as_str().to_string(),
            start.elapsed().as_secs_f64() * 1e3,
        );
    }
    let artifacts = ctx.writer.commit()?;
    let manifest = RunManifest {
        tool_version: crate::TOOL_VERSION.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        metrics,
        inputs,
        llm_calls,
        results: ctx.results,
        notes: ctx.notes,
        artifacts,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let GatewayStats {
        requests,
        cache_hits,
        backend_calls,
        retries,
    } = ctx.gateway.stats();
    ctx.stats.requests = requests;
    ctx.stats.cache_hits = cache_hits;
    ctx.stats.backend_calls = backend_calls;
    ctx.stats.retries = retries;
    write_json(&out.join("run_stats.json"), &ctx.stats)?;
    Ok(manifest)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })
}
