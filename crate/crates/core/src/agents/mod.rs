//! Agent roles, the five-field prompt envelope, and code extraction.

mod extract;
pub mod templates;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactDocument, DocumentKind};
use crate::corpus::{baseline_prompt_payload, TaskSpec};

pub use extract::{extract_block, extract_code};
pub use templates::TemplateSet;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("context mismatch for {role} / {what}: {reason}")]
    ContextMismatch { role: Role, what: String, reason: String },
    #[error("no code could be extracted: {0}")]
    CodeExtraction(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("malformed prompt envelope: {0}")]
    MalformedEnvelope(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    RequirementEngineer,
    Architect,
    Developer,
    Tester,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::RequirementEngineer, Role::Architect, Role::Developer, Role::Tester];

    pub fn display_name(self) -> &'static str {
        match self {
            Role::RequirementEngineer => "Requirement Engineer",
            Role::Architect => "Architect",
            Role::Developer => "Developer",
            Role::Tester => "Tester",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Role::RequirementEngineer => "requirement_engineer",
            Role::Architect => "architect",
            Role::Developer => "developer",
            Role::Tester => "tester",
        }
    }

    pub fn task_kinds(self) -> &'static [TaskKind] {
        match self {
            Role::RequirementEngineer => &[TaskKind::WriteRequirements],
            Role::Architect => &[TaskKind::WriteDesign],
            Role::Developer => &[TaskKind::ImplementCode, TaskKind::FixCode],
            Role::Tester => &[TaskKind::DesignTests, TaskKind::WriteTestScript, TaskKind::WriteTestReport],
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// One row of the role/task table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    WriteRequirements,
    WriteDesign,
    ImplementCode,
    FixCode,
    DesignTests,
    WriteTestScript,
    WriteTestReport,
}

/// Documents a row accepts as context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextRule {
    /// The raw task description only.
    TaskDescription,
    /// At most one upstream document of the listed kinds; the raw task
    /// description stands in when none is given.
    Upstream(&'static [DocumentKind]),
    /// Exactly these documents, in any order.
    Exactly(&'static [DocumentKind]),
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::WriteRequirements,
        TaskKind::WriteDesign,
        TaskKind::ImplementCode,
        TaskKind::FixCode,
        TaskKind::DesignTests,
        TaskKind::WriteTestScript,
        TaskKind::WriteTestReport,
    ];

    pub fn role(self) -> Role {
        match self {
            TaskKind::WriteRequirements => Role::RequirementEngineer,
            TaskKind::WriteDesign => Role::Architect,
            TaskKind::ImplementCode | TaskKind::FixCode => Role::Developer,
            TaskKind::DesignTests | TaskKind::WriteTestScript | TaskKind::WriteTestReport => Role::Tester,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::WriteRequirements => "write_requirements",
            TaskKind::WriteDesign => "write_design",
            TaskKind::ImplementCode => "implement_code",
            TaskKind::FixCode => "fix_code",
            TaskKind::DesignTests => "design_tests",
            TaskKind::WriteTestScript => "write_test_script",
            TaskKind::WriteTestReport => "write_test_report",
        }
    }

    pub fn output(self) -> DocumentKind {
        match self {
            TaskKind::WriteRequirements => DocumentKind::Requirement,
            TaskKind::WriteDesign => DocumentKind::Design,
            TaskKind::ImplementCode | TaskKind::FixCode => DocumentKind::Code,
            TaskKind::DesignTests => DocumentKind::TestCases,
            TaskKind::WriteTestScript => DocumentKind::TestScript,
            TaskKind::WriteTestReport => DocumentKind::TestReport,
        }
    }

    pub fn context_rule(self) -> ContextRule {
        use DocumentKind::*;
        match self {
            TaskKind::WriteRequirements | TaskKind::DesignTests => ContextRule::TaskDescription,
            TaskKind::WriteDesign => ContextRule::Upstream(&[Requirement]),
            TaskKind::ImplementCode => ContextRule::Upstream(&[Design, Requirement]),
            TaskKind::FixCode => ContextRule::Exactly(&[TestReport, Code]),
            TaskKind::WriteTestScript => ContextRule::Exactly(&[TestCases]),
            TaskKind::WriteTestReport => ContextRule::Exactly(&[TestResults]),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Roles that critique a document of `kind` during self-refinement.
pub fn default_reviewers(kind: DocumentKind) -> &'static [Role] {
    match kind {
        DocumentKind::Requirement => &[Role::Architect, Role::Tester],
        DocumentKind::Design => &[Role::Developer, Role::Tester],
        DocumentKind::Code => &[Role::Architect, Role::Tester],
        DocumentKind::TestCases => &[Role::Architect, Role::Developer],
        DocumentKind::TestScript | DocumentKind::TestReport | DocumentKind::TestResults => &[],
    }
}

/// The unified five-field prompt. Field order is fixed by declaration
/// order, which serde preserves when serializing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEnvelope {
    #[serde(rename = "Role")]
    pub role_text: String,
    #[serde(rename = "Instruction")]
    pub instruction_text: String,
    #[serde(rename = "Example")]
    pub example_text: String,
    #[serde(rename = "Context")]
    pub context_text: String,
    #[serde(rename = "Question")]
    pub question_text: String,
}

impl PromptEnvelope {
    pub const FIELD_NAMES: [&'static str; 5] = ["Role", "Instruction", "Example", "Context", "Question"];

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("envelope serializes")
    }

    pub fn parse(json: &str) -> Result<Self, AgentError> {
        let env: PromptEnvelope =
            serde_json::from_str(json).map_err(|e| AgentError::MalformedEnvelope(e.to_string()))?;
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let fields = [
            &self.role_text,
            &self.instruction_text,
            &self.example_text,
            &self.context_text,
            &self.question_text,
        ];
        for (name, value) in Self::FIELD_NAMES.iter().zip(fields) {
            if value.trim().is_empty() {
                return Err(AgentError::MalformedEnvelope(format!("field {name} is empty")));
            }
        }
        Ok(())
    }
}

/// Sampling parameters forwarded to the model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(default = "GenerationParams::default_temperature")]
    pub temperature: f64,
    #[serde(default = "GenerationParams::default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "GenerationParams::default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationParams {
    pub const DEFAULT_TEMPERATURE: f64 = 0.8;

    fn default_temperature() -> f64 {
        Self::DEFAULT_TEMPERATURE
    }
    fn default_max_output_tokens() -> u32 {
        4096
    }
    fn default_retry_limit() -> u32 {
        3
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(AgentError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(AgentError::InvalidParams("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: Self::DEFAULT_TEMPERATURE,
            max_output_tokens: Self::default_max_output_tokens(),
            retry_limit: Self::default_retry_limit(),
            seed: None,
        }
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn role_frame(role: Role, task: &str) -> String {
    format!("You are a {} delegated for {}", role.display_name(), lowercase_first(task))
}

fn section(title: &str, body: &str) -> String {
    format!("### {title}\n{}", body.trim_end())
}

fn check_context(role: Role, kind: TaskKind, docs: &[ArtifactDocument]) -> Result<(), AgentError> {
    let mismatch = |reason: String| AgentError::ContextMismatch { role, what: kind.slug().into(), reason };
    if kind.role() != role {
        return Err(mismatch(format!("{kind} belongs to the {}", kind.role())));
    }
    match kind.context_rule() {
        ContextRule::TaskDescription if !docs.is_empty() => {
            Err(mismatch("expects only the task description".into()))
        }
        ContextRule::TaskDescription => Ok(()),
        ContextRule::Upstream(kinds) => match docs {
            [] => Ok(()),
            [doc] if kinds.contains(&doc.kind) => Ok(()),
            _ => Err(mismatch(format!("expects at most one of {kinds:?}"))),
        },
        ContextRule::Exactly(kinds) => {
            let mut got: Vec<DocumentKind> = docs.iter().map(|d| d.kind).collect();
            let mut want = kinds.to_vec();
            got.sort();
            want.sort();
            if got == want {
                Ok(())
            } else {
                Err(mismatch(format!("expects exactly {kinds:?}, got {got:?}")))
            }
        }
    }
}

fn context_text(docs: &[ArtifactDocument], task: &TaskSpec) -> String {
    match docs {
        [] => baseline_prompt_payload(task),
        [one] => one.content.clone(),
        many => many
            .iter()
            .map(|d| section(d.kind.display_name(), &d.content))
            .collect::<Vec<_>>()
            .join("\n\n"),
    }
}

/// Renders the producer prompt for one role/task row.
pub fn render_prompt(
    templates: &TemplateSet,
    role: Role,
    kind: TaskKind,
    context_docs: &[ArtifactDocument],
    task: &TaskSpec,
) -> Result<PromptEnvelope, AgentError> {
    check_context(role, kind, context_docs)?;
    let template = templates.row(kind);
    let vars = templates.vars(role, &task.class_name, kind.output().display_name());
    let fill = |s: &str| templates::fill(s, &vars);
    Ok(PromptEnvelope {
        role_text: role_frame(role, &fill(&template.task)),
        instruction_text: format!("According to the Context, {}", fill(&template.instruction)),
        example_text: fill(&template.example),
        context_text: context_text(context_docs, task),
        question_text: fill(&template.question),
    })
}

/// A reviewer's critique of a draft.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub reviewer: Role,
    pub notes: String,
}

/// Producer prompt for regenerating `draft` after review: the row's normal
/// prompt with the current draft and every critique appended to the context.
pub fn render_revision_prompt(
    templates: &TemplateSet,
    role: Role,
    kind: TaskKind,
    context_docs: &[ArtifactDocument],
    task: &TaskSpec,
    draft: &ArtifactDocument,
    critiques: &[Critique],
) -> Result<PromptEnvelope, AgentError> {
    let mut env = render_prompt(templates, role, kind, context_docs, task)?;
    let mut ctx = env.context_text;
    ctx.push_str("\n\n");
    ctx.push_str(&section(&format!("Current {}", draft.kind.display_name()), &draft.content));
    for c in critiques {
        ctx.push_str("\n\n");
        ctx.push_str(&section(&format!("Feedback from {}", c.reviewer), &c.notes));
    }
    env.context_text = ctx;
    Ok(env)
}

/// Renders the prompt asking `reviewer` to critique `document` against its
/// upstream context (the raw task description when `upstream` is empty).
pub fn render_feedback_prompt(
    templates: &TemplateSet,
    reviewer: Role,
    document: &ArtifactDocument,
    upstream: &[ArtifactDocument],
    task: &TaskSpec,
) -> Result<PromptEnvelope, AgentError> {
    if !default_reviewers(document.kind).contains(&reviewer) {
        return Err(AgentError::ContextMismatch {
            role: reviewer,
            what: format!("review of {}", document.kind),
            reason: format!("not a configured reviewer for the {}", document.kind.display_name()),
        });
    }
    let template = templates.review();
    let vars = templates.vars(reviewer, &task.class_name, document.kind.display_name());
    let fill = |s: &str| templates::fill(s, &vars);
    let upstream_text = context_text(upstream, task);
    Ok(PromptEnvelope {
        role_text: role_frame(reviewer, &fill(&template.task)),
        instruction_text: format!("According to the Context, {}", fill(&template.instruction)),
        example_text: fill(&template.example),
        context_text: format!(
            "{}\n\n{}",
            section(&format!("{} under review", document.kind.display_name()), &document.content),
            section("Upstream context", &upstream_text)
        ),
        question_text: fill(&template.question),
    })
}

/// What an envelope asks for, recovered from its role frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// A producer prompt (first draft or revision) for this row.
    Produce(TaskKind),
    /// A critique of a document of this kind by this reviewer.
    Review(Role, DocumentKind),
}

/// Identifies `env` by re-rendering every role frame `templates` can
/// produce for `class_name`.
pub fn classify_envelope(templates: &TemplateSet, env: &PromptEnvelope, class_name: &str) -> Option<Purpose> {
    for kind in TaskKind::ALL {
        let vars = templates.vars(kind.role(), class_name, kind.output().display_name());
        if env.role_text == role_frame(kind.role(), &templates::fill(&templates.row(kind).task, &vars)) {
            return Some(Purpose::Produce(kind));
        }
    }
    for role in Role::ALL {
        for doc in [DocumentKind::Requirement, DocumentKind::Design, DocumentKind::Code, DocumentKind::TestCases] {
            let vars = templates.vars(role, class_name, doc.display_name());
            if env.role_text == role_frame(role, &templates::fill(&templates.review().task, &vars)) {
                return Some(Purpose::Review(role, doc));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::templates::has_unreplaced;
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec {
            task_id: "calc".into(),
            class_name: "Calculator".into(),
            skeleton: "class Calculator:\n    def add(self, a, b):\n        pass\n".into(),
            description: "Adds numbers.".into(),
            methods: vec![],
            ground_truth: String::new(),
            test_suite: String::new(),
            test_map: BTreeMap::new(),
            test_count: 0,
        }
    }

    fn doc(kind: DocumentKind, role: Role, body: &str) -> ArtifactDocument {
        ArtifactDocument::new(kind, role, body)
    }

    #[test]
    fn seven_rows() {
        let pairs: Vec<(Role, TaskKind)> =
            Role::ALL.iter().flat_map(|r| r.task_kinds().iter().map(move |k| (*r, *k))).collect();
        assert_eq!(pairs.len(), 7);
        for (r, k) in pairs {
            assert_eq!(k.role(), r);
        }
    }

    #[test]
    fn tester_design_tests_asks_for_five_cases() {
        let env = render_prompt(&TemplateSet::defaults(), Role::Tester, TaskKind::DesignTests, &[], &task()).unwrap();
        assert!(env.instruction_text.contains("at least five test cases per method"));
        assert!(env.role_text.starts_with("You are a Tester delegated for "));
        assert_eq!(env.context_text, baseline_prompt_payload(&task()));
    }

    #[test]
    fn developer_context_is_design_verbatim() {
        let design = doc(DocumentKind::Design, Role::Architect, "## Design\nOne class.");
        let env = render_prompt(
            &TemplateSet::defaults(),
            Role::Developer,
            TaskKind::ImplementCode,
            std::slice::from_ref(&design),
            &task(),
        )
        .unwrap();
        assert_eq!(env.context_text, design.content);
        assert!(env.instruction_text.contains("Use a single class structure"));
        assert!(env.role_text.contains("Python code"));
    }

    #[test]
    fn fix_code_needs_report_and_code() {
        let report = doc(DocumentKind::TestReport, Role::Tester, "2 failures");
        let code = doc(DocumentKind::Code, Role::Developer, "class Calculator: pass");
        let t = TemplateSet::defaults();
        let env = render_prompt(&t, Role::Developer, TaskKind::FixCode, &[report.clone(), code.clone()], &task()).unwrap();
        assert!(env.context_text.contains("2 failures"));
        assert!(env.context_text.contains("class Calculator: pass"));
        assert!(env.instruction_text.contains("Revise the code"));
        assert!(env.role_text.contains("fix code while ensuring all requirements are met"));

        let err = render_prompt(&t, Role::Developer, TaskKind::FixCode, &[code], &task());
        assert!(matches!(err, Err(AgentError::ContextMismatch { .. })));
    }

    #[test]
    fn wrong_role_or_context_rejected() {
        let t = TemplateSet::defaults();
        assert!(render_prompt(&t, Role::Tester, TaskKind::ImplementCode, &[], &task()).is_err());
        let code = doc(DocumentKind::Code, Role::Developer, "x");
        assert!(render_prompt(&t, Role::Architect, TaskKind::WriteDesign, &[code], &task()).is_err());
        let req = doc(DocumentKind::Requirement, Role::RequirementEngineer, "r");
        assert!(render_prompt(&t, Role::RequirementEngineer, TaskKind::WriteRequirements, &[req], &task()).is_err());
    }

    #[test]
    fn every_row_renders_without_placeholders() {
        let t = TemplateSet::defaults();
        let d = |k| doc(k, Role::Tester, "body");
        for kind in TaskKind::ALL {
            let ctx: Vec<ArtifactDocument> = match kind.context_rule() {
                ContextRule::TaskDescription | ContextRule::Upstream(_) => vec![],
                ContextRule::Exactly(kinds) => kinds.iter().map(|k| d(*k)).collect(),
            };
            let env = render_prompt(&t, kind.role(), kind, &ctx, &task()).unwrap();
            env.validate().unwrap();
            for field in [&env.role_text, &env.instruction_text, &env.example_text, &env.question_text] {
                assert!(!has_unreplaced(field), "{kind}: {field}");
            }
        }
    }

    #[test]
    fn feedback_prompts() {
        let t = TemplateSet::defaults();
        let req = doc(DocumentKind::Requirement, Role::RequirementEngineer, "REQ BODY");
        let env = render_feedback_prompt(&t, Role::Architect, &req, &[], &task()).unwrap();
        assert!(env.role_text.starts_with("You are a Architect delegated for reviewing the Requirement Document"));
        assert!(env.question_text.contains("revision notes"));

        let code = doc(DocumentKind::Code, Role::Developer, "class Calculator:\n    pass\n");
        let env = render_feedback_prompt(&t, Role::Tester, &code, &[], &task()).unwrap();
        assert!(env.context_text.contains(&code.content));

        let err = render_feedback_prompt(&t, Role::Developer, &req, &[], &task());
        assert!(matches!(err, Err(AgentError::ContextMismatch { role: Role::Developer, .. })));
    }

    #[test]
    fn revision_appends_draft_and_critiques() {
        let t = TemplateSet::defaults();
        let draft = doc(DocumentKind::Requirement, Role::RequirementEngineer, "DRAFT");
        let critiques = [
            Critique { reviewer: Role::Architect, notes: "note A".into() },
            Critique { reviewer: Role::Tester, notes: "note T".into() },
        ];
        let env = render_revision_prompt(&t, Role::RequirementEngineer, TaskKind::WriteRequirements, &[], &task(), &draft, &critiques)
            .unwrap();
        let ctx = &env.context_text;
        let (a, b, c) = (ctx.find("DRAFT").unwrap(), ctx.find("note A").unwrap(), ctx.find("note T").unwrap());
        assert!(a < b && b < c);
    }

    #[test]
    fn envelope_field_order_and_round_trip() {
        let env = render_prompt(&TemplateSet::defaults(), Role::Tester, TaskKind::DesignTests, &[], &task()).unwrap();
        let json = env.to_json();
        let positions: Vec<usize> =
            PromptEnvelope::FIELD_NAMES.iter().map(|f| json.find(&format!("\"{f}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(PromptEnvelope::parse(&json).unwrap(), env);
    }

    #[test]
    fn params_defaults_and_bounds() {
        let p = GenerationParams::default();
        assert_eq!(p.temperature, 0.8);
        p.validate().unwrap();
        let bad = GenerationParams { temperature: 2.5, ..p };
        assert!(bad.validate().is_err());
    }
}
