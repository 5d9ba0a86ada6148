//! Editable prompt templates.
//!
//! Each (role, task kind) row has one template file at
//! `prompts/<role>/<task_kind>.toml`; the reviewer template lives at
//! `prompts/review.toml`. Defaults are compiled in and any file present in a
//! template directory overrides its default.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{AgentError, Role, TaskKind};

/// Placeholders a template may use.
pub const PLACEHOLDERS: &[&str] = &["language", "class_name", "document", "role"];

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

const DEFAULT_QUESTION: &str = "Follow the instructions. The {document} must satisfy the requirements.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub task: String,
    pub instruction: String,
    pub example: String,
    #[serde(default = "default_question")]
    pub question: String,
}

fn default_question() -> String {
    DEFAULT_QUESTION.to_string()
}

impl Template {
    fn parse(body: &str, origin: &str) -> Result<Self, AgentError> {
        let mut t: Template = toml::from_str(body)
            .map_err(|e| AgentError::Template(format!("{origin}: {e}")))?;
        t.example = t.example.trim().to_string();
        for field in [&t.task, &t.instruction, &t.example, &t.question] {
            if field.trim().is_empty() {
                return Err(AgentError::Template(format!("{origin}: empty field")));
            }
            for cap in PLACEHOLDER.captures_iter(field) {
                if !PLACEHOLDERS.contains(&&cap[1]) {
                    return Err(AgentError::Template(format!(
                        "{origin}: unknown placeholder {{{}}}",
                        &cap[1]
                    )));
                }
            }
        }
        Ok(t)
    }
}

/// Substitutes known placeholders in `text`.
pub(crate) fn fill(text: &str, vars: &BTreeMap<&str, String>) -> String {
    PLACEHOLDER
        .replace_all(text, |c: &regex::Captures| {
            vars.get(&c[1]).cloned().unwrap_or_else(|| c[0].to_string())
        })
        .into_owned()
}

/// True when `text` still holds a `{placeholder}` this crate knows about.
pub fn has_unreplaced(text: &str) -> bool {
    PLACEHOLDER.captures_iter(text).any(|c| PLACEHOLDERS.contains(&&c[1]))
}

/// The full set of templates plus the corpus language name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub language: String,
    rows: BTreeMap<TaskKind, Template>,
    review: Template,
}

macro_rules! default_file {
    ($path:literal) => {
        ($path, include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/prompts/", $path)))
    };
}

const DEFAULT_FILES: &[(&str, &str)] = &[
    default_file!("requirement_engineer/write_requirements.toml"),
    default_file!("architect/write_design.toml"),
    default_file!("developer/implement_code.toml"),
    default_file!("developer/fix_code.toml"),
    default_file!("tester/design_tests.toml"),
    default_file!("tester/write_test_script.toml"),
    default_file!("tester/write_test_report.toml"),
    default_file!("review.toml"),
];

fn relative_path(kind: TaskKind) -> String {
    format!("{}/{}.toml", kind.role().slug(), kind.slug())
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::defaults()
    }
}

impl TemplateSet {
    /// Built-in templates (Python corpus).
    pub fn defaults() -> Self {
        let lookup = |rel: &str| {
            DEFAULT_FILES
                .iter()
                .find(|(p, _)| *p == rel)
                .map(|(p, body)| Template::parse(body, p).expect("built-in template is valid"))
                .expect("built-in template present")
        };
        let rows = TaskKind::ALL.iter().map(|k| (*k, lookup(&relative_path(*k)))).collect();
        TemplateSet { language: "Python".into(), rows, review: lookup("review.toml") }
    }

    /// Defaults overridden by whatever template files exist under `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, AgentError> {
        let dir = dir.as_ref();
        let mut set = Self::defaults();
        for kind in TaskKind::ALL {
            let rel = relative_path(kind);
            let path = dir.join(&rel);
            if path.is_file() {
                let body = fs::read_to_string(&path)
                    .map_err(|e| AgentError::Template(format!("{}: {e}", path.display())))?;
                set.rows.insert(kind, Template::parse(&body, &rel)?);
            }
        }
        let review = dir.join("review.toml");
        if review.is_file() {
            let body = fs::read_to_string(&review)
                .map_err(|e| AgentError::Template(format!("{}: {e}", review.display())))?;
            set.review = Template::parse(&body, "review.toml")?;
        }
        Ok(set)
    }

    /// Writes the built-in template files into `dir` for editing.
    pub fn export_defaults(dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        for (rel, body) in DEFAULT_FILES {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, body)?;
        }
        Ok(())
    }

    pub fn with_language(mut self, language: impl Into<String>) -> Self {
        self.language = language.into();
        self
    }

    /// Fingerprint of the language name and every template in effect.
    pub fn digest(&self) -> String {
        let rows: BTreeMap<String, &Template> = self.rows.iter().map(|(k, t)| (relative_path(*k), t)).collect();
        let value = serde_json::json!({ "language": self.language, "rows": rows, "review": self.review });
        crate::digest::fingerprint(&value).expect("templates serialize")
    }

    pub fn row(&self, kind: TaskKind) -> &Template {
        &self.rows[&kind]
    }

    pub fn review(&self) -> &Template {
        &self.review
    }

    pub(crate) fn vars(&self, role: Role, class_name: &str, document: &str) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("language", self.language.clone()),
            ("class_name", class_name.to_string()),
            ("document", document.to_string()),
            ("role", role.display_name().to_string()),
        ])
    }
}
