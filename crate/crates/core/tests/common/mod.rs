//! Planted-topic mock world shared by the integration tests.
//!
//! Every interaction talks about exactly one topic word. The scripted chat
//! model summarizes an interaction by repeating its topic, labels a group by
//! its dominant topic and answers YES to a merge question iff both groups
//! share a dominant topic. Completions emit the end tag only after a final
//! answer containing `Finished.`, and response trees come from small
//! per-topic token tables.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use goalgauge::gateway::mock::{hash_embedding, ChatRule, CompletionTable, MockBackend, MockSpec};
use goalgauge::gateway::{EndpointKind, Gateway, ModelEndpoint};
use goalgauge::{Interaction, Role};

pub const TOPICS: [&str; 3] = ["recipes", "taxes", "poetry"];
pub const EMBED_DIM: usize = 64;
pub const EOS: &str = "<|eot_id|>";
const RTREE_ANCHOR: &str = "assistant<|end_header_id|>\n\n";

/// `per_topic` interactions per planted topic, each with 2 to 4 pairs.
pub fn planted_dataset(per_topic: usize) -> Vec<Interaction> {
    let mut out = Vec::new();
    for topic in TOPICS {
        for i in 0..per_topic {
            let pairs = 2 + i % 3;
            let mut messages = Vec::new();
            for t in 1..=pairs {
                messages.push((Role::User, format!("Question {t} about {topic}, case {i}.")));
                let reply = if t == pairs {
                    format!("Final {topic} answer for case {i}. Finished.")
                } else {
                    format!("Partial {topic} answer {t} for case {i}.")
                };
                messages.push((Role::Assistant, reply));
            }
            let meta = BTreeMap::from([("topic".to_string(), topic.to_string())]);
            out.push(Interaction::new(format!("{topic}-{i:03}"), messages, None, meta).unwrap());
        }
    }
    out
}

/// Planted topic of an interaction id.
pub fn topic_of(id: &str) -> usize {
    let base = id.split(':').next().unwrap();
    TOPICS.iter().position(|t| base.starts_with(t)).unwrap()
}

fn tags() -> Vec<String> {
    TOPICS.iter().map(|t| t.to_string()).collect()
}

fn dist(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(t, p)| (t.to_string(), *p)).collect()
}

fn topic_tree(topic: &str, shape: usize) -> CompletionTable {
    let states: BTreeMap<String, BTreeMap<String, f64>> = match shape {
        0 => BTreeMap::from([
            (String::new(), dist(&[("Sure", 0.9), ("No", 0.1)])),
            ("Sure".into(), dist(&[(EOS, 1.0)])),
            ("No".into(), dist(&[(EOS, 1.0)])),
        ]),
        1 => BTreeMap::from([
            (
                String::new(),
                dist(&[("Sure", 0.5), ("Maybe", 0.3), ("No", 0.2)]),
            ),
            ("Sure".into(), dist(&[("!", 0.6), (EOS, 0.4)])),
            ("Sure!".into(), dist(&[(EOS, 1.0)])),
            ("Maybe".into(), dist(&[(EOS, 1.0)])),
            ("No".into(), dist(&[(EOS, 1.0)])),
        ]),
        _ => BTreeMap::from([
            (String::new(), dist(&[("A", 0.4), ("B", 0.35), ("C", 0.25)])),
            ("A".into(), dist(&[("x", 0.5), ("y", 0.5)])),
            ("B".into(), dist(&[("x", 0.7), ("y", 0.3)])),
            ("C".into(), dist(&[(EOS, 1.0)])),
        ]),
    };
    let mut table = CompletionTable::new(states);
    table.name = Some(format!("tree-{topic}"));
    table.anchor = Some(RTREE_ANCHOR.into());
    table.prompt_contains = Some(topic.into());
    table
}

/// The scripted backend of the planted world.
pub fn planted_spec() -> MockSpec {
    let mut spec = MockSpec::default().with_embedding(EMBED_DIM, 0);
    spec = spec
        .with_rule(ChatRule {
            contains: Some("[GROUP 1]".into()),
            tags: tags(),
            compare: Some(("[GROUP 1]".into(), "[GROUP 2]".into())),
            reply: "YES. Tasks about {tag}".into(),
            reply_no: Some("NO".into()),
            ..ChatRule::default()
        })
        .with_rule(ChatRule {
            contains: Some("Please summarize the [GROUP]".into()),
            tags: tags(),
            section: Some("[GROUP]".into()),
            reply: "Tasks about {tag}".into(),
            ..ChatRule::default()
        })
        .with_rule(ChatRule {
            contains: Some("three to five words".into()),
            tags: tags(),
            reply: "{tag} help".into(),
            ..ChatRule::default()
        })
        .with_rule(ChatRule {
            contains: Some("[CHAT LOG]".into()),
            tags: vec!["Finished.".into()],
            reply: "YES".into(),
            ..ChatRule::default()
        })
        .with_rule(ChatRule::when("[CHAT LOG]", "NO"))
        .with_rule(ChatRule {
            contains: Some("high-level intent".into()),
            tags: tags(),
            reply: "The user's **high-level intent** is {tag} {tag} {tag} {tag} ({digest})".into(),
            ..ChatRule::default()
        });
    for (i, topic) in TOPICS.iter().enumerate() {
        spec = spec.with_table(topic_tree(topic, i));
    }
    let mut done = CompletionTable::new(BTreeMap::from([(
        String::new(),
        dist(&[("<end>", 0.95), ("TURN", 0.05)]),
    )]));
    done.name = Some("complete".into());
    done.anchor = Some("Finished.\n\n".into());
    let mut open = CompletionTable::new(BTreeMap::from([(
        String::new(),
        dist(&[("TURN", 0.8), ("<end>", 0.2)]),
    )]));
    open.name = Some("incomplete".into());
    open.anchor = Some("\n\n".into());
    spec.with_table(done).with_table(open)
}

/// Hash coordinates of the topic words must be distinct, otherwise topics
/// share an embedding axis and the world is no longer separable.
pub fn topic_axes_distinct() -> bool {
    let axes: Vec<usize> = TOPICS
        .iter()
        .map(|t| {
            let v = hash_embedding(t, EMBED_DIM, 0);
            v.iter().position(|x| *x != 0.0).unwrap()
        })
        .collect();
    axes.iter().enumerate().all(|(i, a)| !axes[..i].contains(a))
}

pub fn endpoint(kind: EndpointKind) -> ModelEndpoint {
    let mut ep = ModelEndpoint::new(kind, "mock://planted", "planted");
    ep.params.max_output_tokens = 16;
    ep
}

/// Gateway with all three capabilities routed to one planted backend.
pub fn planted_gateway() -> (Gateway, Arc<MockBackend>) {
    let backend = Arc::new(MockBackend::new(planted_spec()));
    let mut gw = Gateway::new();
    for kind in [
        EndpointKind::Chat,
        EndpointKind::Completion,
        EndpointKind::Embedding,
    ] {
        gw = gw.with_route(endpoint(kind), backend.clone()).unwrap();
    }
    (gw, backend)
}

/// Writes dataset, mock script and a run config into `dir` and returns the
/// config path.
pub fn write_planted_config(dir: &Path, per_topic: usize, extra: &str) -> PathBuf {
    let mut data = Vec::new();
    goalgauge::interaction::write_dataset(&planted_dataset(per_topic), &mut data).unwrap();
    std::fs::write(dir.join("dataset.jsonl"), data).unwrap();
    std::fs::write(dir.join("mock.jsonl"), planted_spec().to_jsonl()).unwrap();
    let config = format!(
        r#"version = 1
seed = 7
datasets = ["dataset.jsonl"]
output_dir = "out"
{extra}
[endpoints.chat]
base_url = "mock://mock.jsonl"

[endpoints.completion]
base_url = "mock://mock.jsonl"
max_output_tokens = 16

[endpoints.embedding]
base_url = "mock://mock.jsonl"

[cluster]
k1 = 6
exemplars = 5

[rtree]
alpha = 0.1
"#
    );
    let path = dir.join("goalgauge.toml");
    std::fs::write(&path, config).unwrap();
    path
}

/// Random next-token table over single-letter tokens, at most `max_tokens`
/// distinct tokens per state (the end token counts as one) and at most
/// `max_depth` generated tokens. States past the depth are absent, which
/// ends the sequence.
pub fn random_table<R: rand::Rng>(
    rng: &mut R,
    max_tokens: usize,
    max_depth: usize,
) -> BTreeMap<String, BTreeMap<String, f64>> {
    const LETTERS: [&str; 4] = ["a", "b", "c", "d"];
    let depth = rng.random_range(1..=max_depth);
    let mut states = BTreeMap::new();
    let mut frontier = vec![String::new()];
    for level in 0..depth {
        let mut next = Vec::new();
        for state in frontier {
            let width = rng.random_range(1..=max_tokens);
            let mut pool: Vec<&str> = LETTERS[..max_tokens.min(4)].to_vec();
            if level > 0 {
                pool.push(EOS);
            }
            let mut tokens = Vec::new();
            while tokens.len() < width.min(pool.len()) {
                let t = pool.remove(rng.random_range(0..pool.len()));
                tokens.push(t);
            }
            let weights: Vec<f64> = tokens.iter().map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let d: BTreeMap<String, f64> = tokens
                .iter()
                .zip(&weights)
                .map(|(t, w)| (t.to_string(), w / total))
                .collect();
            for t in &tokens {
                if *t != EOS && level + 1 < depth && rng.random_bool(0.85) {
                    next.push(format!("{state}{t}"));
                }
            }
            states.insert(state, d);
        }
        frontier = next;
    }
    states
}

/// Leaf sequences by direct recursion over the table: the most likely token
/// is always followed, any other token among the first `top_k` is followed
/// when it clears the threshold, and the end token or a missing state ends
/// a sequence.
pub fn oracle_leaves(
    states: &BTreeMap<String, BTreeMap<String, f64>>,
    alpha: f64,
    path_mass: bool,
    top_k: usize,
) -> std::collections::BTreeSet<Vec<String>> {
    fn visit(
        states: &BTreeMap<String, BTreeMap<String, f64>>,
        state: &str,
        seq: Vec<String>,
        logprob: f64,
        cfg: (f64, bool, usize),
        out: &mut std::collections::BTreeSet<Vec<String>>,
    ) {
        let (alpha, path_mass, top_k) = cfg;
        let Some(d) = states.get(state).filter(|d| !d.is_empty()) else {
            out.insert(seq);
            return;
        };
        let mut ranked: Vec<(&String, f64)> = d.iter().map(|(t, p)| (t, *p)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        for (rank, (token, p)) in ranked.into_iter().enumerate() {
            let keep = rank == 0
                || (rank < top_k
                    && if path_mass {
                        logprob + p.ln() >= alpha.ln()
                    } else {
                        p.ln() >= alpha.ln()
                    });
            if !keep {
                continue;
            }
            let mut next = seq.clone();
            next.push(token.clone());
            if token == EOS {
                out.insert(next);
            } else {
                visit(
                    states,
                    &format!("{state}{token}"),
                    next,
                    logprob + p.ln(),
                    cfg,
                    out,
                );
            }
        }
    }
    let mut out = std::collections::BTreeSet::new();
    visit(
        states,
        "",
        Vec::new(),
        0.0,
        (alpha, path_mass, top_k),
        &mut out,
    );
    out
}

/// Completion-only gateway over one table, prompts anchored at `A:`.
pub fn table_gateway(states: BTreeMap<String, BTreeMap<String, f64>>, top_k: usize) -> Gateway {
    let mut table = CompletionTable::new(states);
    table.anchor = Some("A:".into());
    let mut ep = ModelEndpoint::new(EndpointKind::Completion, "mock://table", "table");
    ep.params.top_k_logprobs = top_k;
    ep.params.max_output_tokens = 16;
    Gateway::new()
        .with_route(
            ep,
            Arc::new(MockBackend::new(MockSpec::default().with_table(table))),
        )
        .unwrap()
}
