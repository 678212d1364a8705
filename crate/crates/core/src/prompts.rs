//! Prompt templates with `{{name}}` placeholders.
//!
//! Built-in templates are compiled in; a directory of `<name>.txt` files can
//! override any of them.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template `{template}` has no value for `{{{{{placeholder}}}}}`")]
    MissingValue { template: String, placeholder: String },
    #[error("unterminated placeholder in template `{0}`")]
    Unterminated(String),
    #[error("cannot read override {path}: {message}")]
    Io { path: String, message: String },
}

const BUILTIN: &[(&str, &str)] = &[
    ("actions", include_str!("../prompts/actions.txt")),
    ("correction", include_str!("../prompts/correction.txt")),
    ("editing", include_str!("../prompts/editing.txt")),
    ("editing_apply_error", include_str!("../prompts/editing_apply_error.txt")),
    ("editing_feedback", include_str!("../prompts/editing_feedback.txt")),
    ("model_select", include_str!("../prompts/model_select.txt")),
    ("ranking", include_str!("../prompts/ranking.txt")),
    ("ranking_correction", include_str!("../prompts/ranking_correction.txt")),
    ("relevance", include_str!("../prompts/relevance.txt")),
    ("selection", include_str!("../prompts/selection.txt")),
    ("selection_feedback", include_str!("../prompts/selection_feedback.txt")),
    ("testing", include_str!("../prompts/testing.txt")),
    ("testing_feedback", include_str!("../prompts/testing_feedback.txt")),
];

#[derive(Debug, Clone)]
pub struct Prompts {
    templates: BTreeMap<String, String>,
}

impl Default for Prompts {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Prompts {
    pub fn builtin() -> Self {
        Self {
            templates: BUILTIN
                .iter()
                .map(|(name, text)| (name.to_string(), text.to_string()))
                .collect(),
        }
    }

    /// Built-in templates with any `<name>.txt` in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut prompts = Self::builtin();
        for (name, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => {
                    prompts.templates.insert(name.to_string(), text);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => {
                    return Err(PromptError::Io {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(prompts)
    }

    /// Substitutes every placeholder in one pass; substituted values are
    /// never rescanned, so file contents containing `{{` pass through.
    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| PromptError::UnknownTemplate(name.to_string()))?;
        let mut out = String::with_capacity(template.len());
        let mut rest = template.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| PromptError::Unterminated(name.to_string()))?;
            let key = after[..end].trim();
            let value = values
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingValue {
                    template: name.to_string(),
                    placeholder: key.to_string(),
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}
