//! Prompt catalog. Defaults are compiled in from `prompts/*.txt`; any of them
//! can be replaced by a file of the same name in an override directory.
//!
//! Placeholders are `{name}` and are substituted in a single pass, so text
//! inserted into a prompt is never re-expanded.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("prompt {name} lacks placeholder {{{placeholder}}}")]
    MissingPlaceholder { name: String, placeholder: String },
}

/// Goal summary for clustering.
pub const SUMMARIZE: &str = include_str!("../prompts/summarize.txt");
/// Cluster description from [GROUP] / [NOT IN GROUP] exemplars.
pub const DESCRIBE_CLUSTER: &str = include_str!("../prompts/describe_cluster.txt");
/// Merge question over two groups and unrelated exemplars.
pub const MERGE: &str = include_str!("../prompts/merge.txt");
/// LLM-only baseline, first sample.
pub const BASELINE_FIRST: &str = include_str!("../prompts/baseline_first.txt");
/// LLM-only baseline, once categories exist.
pub const BASELINE_NEXT: &str = include_str!("../prompts/baseline_next.txt");
/// Completion check for instruction-following models.
pub const INSTRUCT_COMPLETION: &str = include_str!("../prompts/instruct_completion.txt");
/// Yes/no completeness judge. Not taken from any published prompt.
pub const JUDGE: &str = include_str!("../prompts/judge.txt");

/// Marker the instruct-completion prompt asks for when nothing remains.
pub const INSTRUCT_END_MARKER: &str = "<end of system logs>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCatalog {
    pub summarize: String,
    pub describe_cluster: String,
    pub merge: String,
    pub baseline_first: String,
    pub baseline_next: String,
    pub instruct_completion: String,
    pub judge: String,
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self {
            summarize: SUMMARIZE.into(),
            describe_cluster: DESCRIBE_CLUSTER.into(),
            merge: MERGE.into(),
            baseline_first: BASELINE_FIRST.into(),
            baseline_next: BASELINE_NEXT.into(),
            instruct_completion: INSTRUCT_COMPLETION.into(),
            judge: JUDGE.into(),
        }
    }
}

const REQUIRED: [(&str, &[&str]); 7] = [
    ("summarize", &["context", "log"]),
    ("describe_cluster", &["group", "not_in_group"]),
    ("merge", &["group_1", "group_2", "not_in_group"]),
    ("baseline_first", &["log"]),
    ("baseline_next", &["categories", "log"]),
    ("instruct_completion", &["log"]),
    ("judge", &["log"]),
];

impl PromptCatalog {
    /// Defaults, with `<dir>/<name>.txt` taking precedence where present.
    pub fn load(dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut catalog = Self::default();
        if let Some(dir) = dir {
            for (name, _) in REQUIRED {
                let path = dir.join(format!("{name}.txt"));
                if path.exists() {
                    let text =
                        std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                            name: name.to_string(),
                            source,
                        })?;
                    *catalog.slot(name) = text;
                }
            }
        }
        catalog.validate()?;
        Ok(catalog)
    }

    fn slot(&mut self, name: &str) -> &mut String {
        match name {
            "summarize" => &mut self.summarize,
            "describe_cluster" => &mut self.describe_cluster,
            "merge" => &mut self.merge,
            "baseline_first" => &mut self.baseline_first,
            "baseline_next" => &mut self.baseline_next,
            "instruct_completion" => &mut self.instruct_completion,
            "judge" => &mut self.judge,
            _ => unreachable!("unknown prompt {name}"),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let mut copy = self.clone();
        for (name, placeholders) in REQUIRED {
            let text = copy.slot(name);
            for p in placeholders {
                if !text.contains(&format!("{{{p}}}")) {
                    return Err(PromptError::MissingPlaceholder {
                        name: name.to_string(),
                        placeholder: p.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Single-pass `{key}` substitution; unknown placeholders are left as is.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Bullet list used inside the clustering prompts.
pub fn bullet_list<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    items
        .into_iter()
        .map(|s| format!("- {}\n", s.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}
