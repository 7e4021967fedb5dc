use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Marker replaced by the space-joined prefix words.
pub const PLACEHOLDER: &str = "{prefix}";

const SYSTEM_1: &str = "You are next word prediction model, given a phrase you output the next word.\n\
You always output a single word without spaces or punctuation.\n\
Only respond with the next word, without any additional text or explanation.\n\
If you are unsure, provide your best guess.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub template_id: u8,
    #[serde(default)]
    pub system_text: Option<String>,
    pub user_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
}

impl PromptTemplate {
    pub fn new(template_id: u8, system_text: Option<&str>, user_text: &str) -> Result<Self, ConfigError> {
        let t = Self {
            template_id,
            system_text: system_text.map(str::to_owned),
            user_text: user_text.to_owned(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let found = self.user_text.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(ConfigError::Placeholder {
                template_id: self.template_id,
                placeholder: PLACEHOLDER,
                found,
            });
        }
        Ok(())
    }

    pub fn render(&self, prefix: &[String]) -> RenderedPrompt {
        debug_assert!(!prefix.is_empty());
        let joined = prefix.join(" ");
        // Split once so braces inside the prefix are never re-expanded.
        let (head, tail) = self
            .user_text
            .split_once(PLACEHOLDER)
            .expect("validated template has a placeholder");
        let mut user = String::with_capacity(head.len() + joined.len() + tail.len());
        user.push_str(head);
        user.push_str(&joined);
        user.push_str(tail);
        RenderedPrompt {
            system: self.system_text.clone(),
            user,
        }
    }
}

/// The five default prompt variants.
pub fn default_templates() -> Vec<PromptTemplate> {
    let t = |id, sys: Option<&str>, user: &str| PromptTemplate::new(id, sys, user).expect("built-in template");
    vec![
        t(1, Some(SYSTEM_1), "\"{prefix}\""),
        t(2, None, "Output only one next continuation word for this phrase \"{prefix}\""),
        t(
            3,
            None,
            "Text: \"{prefix}\"\nWhat is the precise next word that comes immediately after the text above? Reply with strictly one word.",
        ),
        t(
            4,
            None,
            "Context: \"{prefix}\"\nInstruction: Provide the immediate next word. Limit your output strictly to exactly one word.",
        ),
        t(5, None, "[BEGIN PREFIX]\n{prefix}\n[END PREFIX]\nReturn the next word only."),
    ]
}

/// Validate a template set: ids unique, each has one placeholder.
pub fn validate_templates(templates: &[PromptTemplate]) -> Result<(), ConfigError> {
    if templates.is_empty() {
        return Err(ConfigError::invalid("templates", "at least one template is required"));
    }
    let mut ids: Vec<u8> = templates.iter().map(|t| t.template_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(ConfigError::invalid("templates", "duplicate template_id"));
    }
    templates.iter().try_for_each(PromptTemplate::validate)
}
