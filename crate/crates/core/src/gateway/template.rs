//! Chat-template rendering for completion endpoints, including prompts that
//! end inside a partial assistant response.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interaction::Role;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("conversation is empty")]
    Empty,
    #[error("template has no header for role {0}")]
    UnknownRole(Role),
}

/// Special-token layout of a chat template. Each message renders as
/// `header_start + name + header_end + content + end_of_turn`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatTemplate {
    pub begin: String,
    pub header_start: String,
    pub header_end: String,
    pub end_of_turn: String,
    /// Header name per role; roles without an entry are rejected.
    pub role_names: BTreeMap<Role, String>,
    /// System message inserted when the conversation has none.
    pub default_system: Option<String>,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self::llama3()
    }
}

impl ChatTemplate {
    pub fn llama3() -> Self {
        Self {
            begin: "<|begin_of_text|>".into(),
            header_start: "<|start_header_id|>".into(),
            header_end: "<|end_header_id|>\n\n".into(),
            end_of_turn: "<|eot_id|>".into(),
            role_names: BTreeMap::from([
                (Role::System, "system".to_string()),
                (Role::User, "user".to_string()),
                (Role::Assistant, "assistant".to_string()),
                (Role::Tool, "ipython".to_string()),
            ]),
            default_system: None,
        }
    }

    fn header(&self, role: Role) -> Result<String, TemplateError> {
        let name = self
            .role_names
            .get(&role)
            .ok_or(TemplateError::UnknownRole(role))?;
        Ok(format!("{}{}{}", self.header_start, name, self.header_end))
    }

    /// The text that opens an assistant turn; the response starts right after it.
    pub fn assistant_header(&self) -> Result<String, TemplateError> {
        self.header(Role::Assistant)
    }
}

/// Renders `conversation` and opens an assistant turn. With a partial
/// response, the prompt ends with that text and no end-of-turn token, so a
/// completion model continues mid-response.
pub fn render_prompt(
    conversation: &[(Role, String)],
    partial_response: Option<&str>,
    template: &ChatTemplate,
) -> Result<String, TemplateError> {
    if conversation.is_empty() {
        return Err(TemplateError::Empty);
    }
    let mut out = template.begin.clone();
    if let Some(system) = &template.default_system {
        if !conversation.iter().any(|(r, _)| *r == Role::System) {
            out.push_str(&template.header(Role::System)?);
            out.push_str(system);
            out.push_str(&template.end_of_turn);
        }
    }
    for (role, content) in conversation {
        out.push_str(&template.header(*role)?);
        out.push_str(content);
        out.push_str(&template.end_of_turn);
    }
    out.push_str(&template.assistant_header()?);
    if let Some(partial) = partial_response {
        out.push_str(partial);
    }
    Ok(out)
}
