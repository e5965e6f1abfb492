//! Multi-turn interaction data model, JSONL ingestion, truncation and SFT
//! pair export.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Default end tag appended to final responses in SFT targets.
pub const DEFAULT_END_TAG: &str = "<end>";

/// Default per-message layout used when flattening a conversation.
pub const DEFAULT_TURN_TEMPLATE: &str = "TURN {turn}, STEP {step}, {role} chat:\n{content}\n\n";

#[derive(Debug, Error)]
pub enum InteractionError {
    #[error("invalid interaction {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("upto={upto} out of range 1..={n_turns}")]
    Range { upto: usize, n_turns: usize },
    #[error("cannot truncate single-turn interaction")]
    SingleTurn,
    #[error("interactions do not end in an assistant response: {}", ids.join(", "))]
    MissingFinalResponse { ids: Vec<String> },
    #[error("invalid turn template: {0}")]
    Template(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: line {line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}: duplicate id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        file: String,
        id: String,
        first_line: usize,
        second_line: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    System,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::System => "system",
            Role::Tool => "tool",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    /// 1-based position of the message within its interaction.
    pub step_index: usize,
}

/// One multi-turn interaction. Immutable once constructed; all invariants are
/// checked by [`Interaction::new`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    id: String,
    turns: Vec<Turn>,
    n_turns: usize,
    complete_label: Option<bool>,
    metadata: BTreeMap<String, String>,
}

impl Interaction {
    pub fn new(
        id: impl Into<String>,
        messages: Vec<(Role, String)>,
        complete_label: Option<bool>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self, InteractionError> {
        let id = id.into();
        let invalid = |reason: String| InteractionError::Invalid {
            id: id.clone(),
            reason,
        };
        let mut turns = Vec::with_capacity(messages.len());
        for (i, (role, content)) in messages.into_iter().enumerate() {
            if content.is_empty() && role != Role::Tool {
                return Err(invalid(format!(
                    "step {} ({role}) has empty content",
                    i + 1
                )));
            }
            turns.push(Turn {
                role,
                content,
                step_index: i + 1,
            });
        }
        // Only user prompts open a prompt/response pair; system and tool
        // messages ride along with the pair they sit in.
        let n_turns = turns.iter().filter(|t| t.role == Role::User).count();
        if n_turns == 0 {
            return Err(invalid("no user prompt".into()));
        }
        Ok(Self {
            id,
            turns,
            n_turns,
            complete_label,
            metadata,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// Number of user prompts (prompt/response pairs).
    pub fn n_turns(&self) -> usize {
        self.n_turns
    }

    pub fn complete_label(&self) -> Option<bool> {
        self.complete_label
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn with_complete_label(mut self, label: Option<bool>) -> Self {
        self.complete_label = label;
        self
    }

    /// Number of messages that belong to the first `upto` prompt/response
    /// pairs: everything before the `upto + 1`-th user message.
    fn message_cutoff(&self, upto: usize) -> usize {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::User)
            .nth(upto)
            .map(|(i, _)| i)
            .unwrap_or(self.turns.len())
    }

    /// The first `upto` pairs as a new interaction (same id and metadata).
    fn prefix(&self, upto: usize) -> Self {
        let cut = self.message_cutoff(upto);
        Self {
            id: self.id.clone(),
            turns: self.turns[..cut].to_vec(),
            n_turns: upto,
            complete_label: self.complete_label,
            metadata: self.metadata.clone(),
        }
    }

    /// Plain (role, content) view of the messages, for chat-template rendering.
    pub fn messages(&self) -> Vec<(Role, String)> {
        self.turns
            .iter()
            .map(|t| (t.role, t.content.clone()))
            .collect()
    }

    /// Flattens the conversation with the default [`TurnFormat`].
    pub fn concat(&self, upto: Option<usize>) -> Result<String, InteractionError> {
        concat_turns(self, upto, &TurnFormat::default())
    }

    /// Total characters of all message contents.
    pub fn content_chars(&self) -> usize {
        self.turns.iter().map(|t| t.content.chars().count()).sum()
    }
}

/// Layout of one serialized message. The template must contain `{content}`
/// exactly once and may use `{turn}`, `{step}` and `{role}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnFormat {
    template: String,
}

impl Default for TurnFormat {
    fn default() -> Self {
        Self {
            template: DEFAULT_TURN_TEMPLATE.to_string(),
        }
    }
}

impl TurnFormat {
    pub fn new(template: impl Into<String>) -> Result<Self, InteractionError> {
        let template = template.into();
        if template.matches("{content}").count() != 1 {
            return Err(InteractionError::Template(
                "template must contain {content} exactly once".into(),
            ));
        }
        Ok(Self { template })
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    fn fill(part: &str, turn: usize, step: usize, role: Role) -> String {
        part.replace("{turn}", &turn.to_string())
            .replace("{step}", &step.to_string())
            .replace("{role}", role.as_str())
    }

    fn parts(&self) -> (&str, &str) {
        // `new` guarantees the placeholder exists.
        self.template
            .split_once("{content}")
            .expect("template holds {content}")
    }

    pub fn header(&self, turn: usize, step: usize, role: Role) -> String {
        Self::fill(self.parts().0, turn, step, role)
    }

    pub fn render(&self, turn: usize, step: usize, role: Role, content: &str) -> String {
        let (head, tail) = self.parts();
        let mut out = Self::fill(head, turn, step, role);
        out.push_str(content);
        out.push_str(&Self::fill(tail, turn, step, role));
        out
    }
}

/// Turn numbers for each message: a new turn opens on every user or system
/// message (and on the very first message).
fn turn_numbers(turns: &[Turn]) -> Vec<usize> {
    let mut turn = 0;
    turns
        .iter()
        .map(|t| {
            if turn == 0 || matches!(t.role, Role::User | Role::System) {
                turn += 1;
            }
            turn
        })
        .collect()
}

/// Serializes the first `upto` prompt/response pairs (default: all).
pub fn concat_turns(
    interaction: &Interaction,
    upto: Option<usize>,
    format: &TurnFormat,
) -> Result<String, InteractionError> {
    let n = interaction.n_turns();
    let upto = upto.unwrap_or(n);
    if upto == 0 || upto > n {
        return Err(InteractionError::Range { upto, n_turns: n });
    }
    let cut = interaction.message_cutoff(upto);
    let numbers = turn_numbers(interaction.turns());
    let mut out = String::new();
    for (t, turn) in interaction.turns()[..cut].iter().zip(numbers) {
        out.push_str(&format.render(turn, t.step_index, t.role, &t.content));
    }
    Ok(out)
}

/// Truncates to `k` pairs with `k` uniform on `1..n`; the result is labeled
/// incomplete and its id gets a `:trunc` suffix.
pub fn truncate_interaction<R: Rng + ?Sized>(
    interaction: &Interaction,
    rng: &mut R,
) -> Result<Interaction, InteractionError> {
    let n = interaction.n_turns();
    if n < 2 {
        return Err(InteractionError::SingleTurn);
    }
    let k = rng.random_range(1..n);
    let mut out = interaction.prefix(k);
    out.id = format!("{}:trunc", interaction.id);
    out.complete_label = Some(false);
    Ok(out)
}

/// Supervised fine-tuning record: conversation up to the final response, and
/// the final response followed by the end tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftPair {
    pub input: String,
    pub target: String,
    pub source_id: String,
}

/// Builds one SFT pair per interaction. The input ends with the header of the
/// final assistant message so the target is exactly what follows it.
pub fn export_sft_pairs(
    dataset: &[Interaction],
    end_tag: &str,
    format: &TurnFormat,
) -> Result<Vec<SftPair>, InteractionError> {
    let bad: Vec<String> = dataset
        .iter()
        .filter(|x| x.turns().last().map(|t| t.role) != Some(Role::Assistant))
        .map(|x| x.id().to_string())
        .collect();
    if !bad.is_empty() {
        return Err(InteractionError::MissingFinalResponse { ids: bad });
    }
    dataset
        .iter()
        .map(|x| {
            let turns = x.turns();
            let numbers = turn_numbers(turns);
            let last = turns.len() - 1;
            let mut input = String::new();
            for (t, turn) in turns[..last].iter().zip(&numbers) {
                input.push_str(&format.render(*turn, t.step_index, t.role, &t.content));
            }
            let final_turn = &turns[last];
            input.push_str(&format.header(numbers[last], final_turn.step_index, final_turn.role));
            Ok(SftPair {
                input,
                target: format!("{}{}", final_turn.content, end_tag),
                source_id: x.id().to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordTurn {
    role: Role,
    content: String,
}

#[derive(Debug, Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    turns: Vec<RecordTurn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    complete: Option<bool>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    metadata: &'a BTreeMap<String, String>,
}

fn parse_record(value: Value, default_id: String) -> Result<Interaction, String> {
    let Value::Object(mut obj) = value else {
        return Err("record is not a JSON object".into());
    };
    let id = match obj.remove("id") {
        None | Some(Value::Null) => default_id,
        Some(Value::String(s)) => s,
        Some(_) => return Err("field id must be a string".into()),
    };
    let turns = obj.remove("turns").ok_or("missing field turns")?;
    let turns: Vec<RecordTurn> =
        serde_json::from_value(turns).map_err(|e| format!("invalid turns: {e}"))?;
    let complete = match obj.remove("complete") {
        None | Some(Value::Null) => None,
        Some(Value::Bool(b)) => Some(b),
        Some(_) => return Err("field complete must be a boolean".into()),
    };
    let metadata = match obj.remove("metadata") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(Value::Object(m)) => m
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    Value::String(s) => s,
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect(),
        Some(_) => return Err("field metadata must be an object".into()),
    };
    let messages = turns.into_iter().map(|t| (t.role, t.content)).collect();
    Interaction::new(id, messages, complete, metadata).map_err(|e| e.to_string())
}

/// Parses line-delimited interaction records. Blank lines are skipped; ids
/// default to `<name>:<line>`.
pub fn read_dataset<R: Read>(reader: R, name: &str) -> Result<Vec<Interaction>, IngestError> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| IngestError::Io {
            file: name.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| IngestError::Malformed {
            file: name.to_string(),
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let interaction = parse_record(value, format!("{name}:{line_no}")).map_err(malformed)?;
        if let Some(&first_line) = seen.get(interaction.id()) {
            return Err(IngestError::DuplicateId {
                file: name.to_string(),
                id: interaction.id().to_string(),
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(interaction.id().to_string(), line_no);
        out.push(interaction);
    }
    Ok(out)
}

/// Reads a dataset file; ids default to `<file name>:<line>`.
pub fn ingest_dataset(path: &Path) -> Result<Vec<Interaction>, IngestError> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        file: path.display().to_string(),
        source,
    })?;
    read_dataset(file, &name)
}

/// Writes interactions in the ingestion format (one JSON object per line).
pub fn write_dataset<W: Write>(dataset: &[Interaction], mut writer: W) -> std::io::Result<()> {
    for x in dataset {
        let record = RecordOut {
            id: x.id(),
            turns: x
                .turns()
                .iter()
                .map(|t| RecordTurn {
                    role: t.role,
                    content: t.content.clone(),
                })
                .collect(),
            complete: x.complete_label(),
            metadata: x.metadata(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
