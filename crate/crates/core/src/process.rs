//! Process variants, activity graphs and the pipeline that drives one task
//! through them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    default_reviewers, extract_block, extract_code, render_feedback_prompt, render_prompt,
    render_revision_prompt, Critique, GenerationParams, PromptEnvelope, Role, TaskKind, TemplateSet,
};
use crate::artifact::{ArtifactDocument, DocumentKind};
use crate::corpus::{payload_hash, Corpus, TaskSpec};
use crate::exec::{self, ExecError, ExecutionRequest, ExecutionResult, RunnerHandle, TestStatus};
use crate::gateway::ModelGateway;

pub const DEFAULT_BUGFIX_CAP: u32 = 3;
pub const DEFAULT_REFINEMENT_ROUNDS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Activity {
    Requirement,
    Design,
    Implementation,
    Testing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String")]
pub enum ProcessVariant {
    RawPrompt,
    WaterfallFull,
    WaterfallNoRequirement,
    WaterfallNoDesign,
    WaterfallNoTesting,
}

impl ProcessVariant {
    pub const ALL: [ProcessVariant; 5] = [
        ProcessVariant::RawPrompt,
        ProcessVariant::WaterfallFull,
        ProcessVariant::WaterfallNoRequirement,
        ProcessVariant::WaterfallNoDesign,
        ProcessVariant::WaterfallNoTesting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProcessVariant::RawPrompt => "RawPrompt",
            ProcessVariant::WaterfallFull => "WaterfallFull",
            ProcessVariant::WaterfallNoRequirement => "WaterfallNoRequirement",
            ProcessVariant::WaterfallNoDesign => "WaterfallNoDesign",
            ProcessVariant::WaterfallNoTesting => "WaterfallNoTesting",
        }
    }

    /// Short form used in run ids and file names.
    pub fn slug(self) -> &'static str {
        match self {
            ProcessVariant::RawPrompt => "raw",
            ProcessVariant::WaterfallFull => "full",
            ProcessVariant::WaterfallNoRequirement => "no-req",
            ProcessVariant::WaterfallNoDesign => "no-design",
            ProcessVariant::WaterfallNoTesting => "no-test",
        }
    }

    pub fn activities(self) -> &'static [Activity] {
        use Activity::*;
        match self {
            ProcessVariant::RawPrompt => &[Implementation],
            ProcessVariant::WaterfallFull => &[Requirement, Design, Implementation, Testing],
            ProcessVariant::WaterfallNoRequirement => &[Design, Implementation, Testing],
            ProcessVariant::WaterfallNoDesign => &[Requirement, Implementation, Testing],
            ProcessVariant::WaterfallNoTesting => &[Requirement, Design, Implementation],
        }
    }
}

impl fmt::Display for ProcessVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for ProcessVariant {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for ProcessVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        ProcessVariant::ALL
            .into_iter()
            .find(|v| {
                let name = v.name().to_ascii_lowercase();
                let slug: String = v.slug().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
                norm == name || norm == slug
            })
            .ok_or_else(|| format!("unknown process variant `{s}`"))
    }
}

/// One document-producing step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityNode {
    pub activity: Activity,
    pub role: Role,
    pub task: TaskKind,
    pub output: DocumentKind,
    /// Documents handed to the producer. Empty means the raw task description.
    pub context: Vec<DocumentKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityGraph {
    pub variant: ProcessVariant,
    pub nodes: Vec<ActivityNode>,
    pub feedback_edges: BTreeMap<DocumentKind, Vec<Role>>,
    pub bugfix_cap: u32,
}

impl ActivityGraph {
    /// Document kinds a completed run of this graph holds.
    pub fn declared_kinds(&self) -> Vec<DocumentKind> {
        self.nodes.iter().map(|n| n.output).collect()
    }

    pub fn node(&self, output: DocumentKind) -> Option<&ActivityNode> {
        self.nodes.iter().find(|n| n.output == output)
    }

    pub fn has_testing(&self) -> bool {
        self.nodes.iter().any(|n| n.activity == Activity::Testing)
    }

    pub fn reviewers(&self, kind: DocumentKind) -> &[Role] {
        self.feedback_edges.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Builds the activity graph of `variant`. A removed activity hands its
/// consumers the most recent upstream document instead, or the raw task
/// description when there is none.
pub fn build_pipeline(variant: ProcessVariant) -> ActivityGraph {
    let activities = variant.activities();
    let mut produced: Vec<DocumentKind> = Vec::new();
    let mut nodes = Vec::new();
    // Latest of `preferred` already produced, in preference order.
    let pick = |produced: &[DocumentKind], preferred: &[DocumentKind]| -> Vec<DocumentKind> {
        preferred.iter().find(|k| produced.contains(k)).map(|k| vec![*k]).unwrap_or_default()
    };
    for &activity in activities {
        let steps: Vec<(TaskKind, Vec<DocumentKind>)> = match activity {
            Activity::Requirement => vec![(TaskKind::WriteRequirements, vec![])],
            Activity::Design => {
                vec![(TaskKind::WriteDesign, pick(&produced, &[DocumentKind::Requirement]))]
            }
            Activity::Implementation => vec![(
                TaskKind::ImplementCode,
                pick(&produced, &[DocumentKind::Design, DocumentKind::Requirement]),
            )],
            Activity::Testing => vec![
                (TaskKind::DesignTests, vec![]),
                (TaskKind::WriteTestScript, vec![DocumentKind::TestCases]),
                (TaskKind::WriteTestReport, vec![DocumentKind::TestResults]),
            ],
        };
        for (task, context) in steps {
            produced.push(task.output());
            nodes.push(ActivityNode { activity, role: task.role(), task, output: task.output(), context });
        }
    }
    let feedback_edges = if variant == ProcessVariant::RawPrompt {
        BTreeMap::new()
    } else {
        nodes
            .iter()
            .filter(|n| !default_reviewers(n.output).is_empty())
            .map(|n| (n.output, default_reviewers(n.output).to_vec()))
            .collect()
    };
    let bugfix_cap = if activities.contains(&Activity::Testing) { DEFAULT_BUGFIX_CAP } else { 0 };
    ActivityGraph { variant, nodes, feedback_edges, bugfix_cap }
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub run_id: String,
    pub task_id: String,
    pub variant: ProcessVariant,
    pub model_id: String,
}

/// Maps characters outside `[A-Za-z0-9._-]` to `_`.
pub fn id_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

impl RunDescriptor {
    pub fn new(task_id: &str, variant: ProcessVariant, model_id: &str) -> Self {
        Self {
            run_id: format!("{}__{}__{}", id_safe(task_id), variant.slug(), id_safe(model_id)),
            task_id: task_id.to_string(),
            variant,
            model_id: model_id.to_string(),
        }
    }
}

/// Cartesian product of tasks, variants and models, task-major, then
/// variant, then model.
pub fn ablation_grid(models: &[String], variants: &[ProcessVariant], corpus: &Corpus) -> Vec<RunDescriptor> {
    let mut out = Vec::with_capacity(corpus.len() * variants.len() * models.len());
    for task in &corpus.tasks {
        for &v in variants {
            for m in models {
                out.push(RunDescriptor::new(&task.task_id, v, m));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    GatewayFailed,
    Unparseable,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One prompt and the response it got.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    /// E.g. `design`, `review:code:architect`, `fix:2`.
    pub stage: String,
    pub role: Role,
    pub prompt: PromptEnvelope,
    pub response: String,
    pub latency_ms: u64,
}

/// A deviation from the plain activity flow, logged instead of silently
/// patching artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intervention {
    pub cycle: u32,
    pub stage: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedCase {
    pub group: String,
    pub case: String,
    pub status: TestStatus,
    pub exception_type: Option<String>,
    pub traceback: String,
}

/// Timing-free digest of one in-pipeline script execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRun {
    pub cycle: u32,
    pub passed: u32,
    pub failed: u32,
    pub errored: u32,
    pub timed_out: bool,
    pub collection_error: Option<String>,
    pub script_fault: bool,
    pub failures: Vec<FailedCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executor_error: Option<String>,
}

static SANDBOX_PATH: LazyLock<Regex> = LazyLock::new(|| {
    let names = format!("{}|{}", regex::escape(exec::CODE_FILE), regex::escape(exec::TESTS_FILE));
    Regex::new(&format!(r#"[^\s"'()]*/({names})"#)).unwrap()
});
static FILE_FRAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"File "([^"]+)""#).unwrap());

/// Replaces sandbox-specific directories with bare file names.
fn scrub_paths(text: &str) -> String {
    SANDBOX_PATH.replace_all(text, "$1").into_owned()
}

/// A collection error whose innermost frame lies in the test script means
/// the script itself is broken, not the code under test.
pub fn is_script_fault(result: &ExecutionResult) -> bool {
    let Some(c) = &result.collection_error else { return false };
    FILE_FRAME
        .captures_iter(&c.traceback)
        .last()
        .and_then(|m| m.get(1))
        .is_some_and(|f| f.as_str().ends_with(exec::TESTS_FILE))
}

impl ScriptRun {
    pub fn from_result(cycle: u32, result: &ExecutionResult) -> Self {
        let count = |s| result.per_test.iter().filter(|o| o.status == s).count() as u32;
        ScriptRun {
            cycle,
            passed: count(TestStatus::Pass),
            failed: count(TestStatus::Fail),
            errored: count(TestStatus::Error),
            timed_out: result.timed_out,
            collection_error: result
                .collection_error
                .as_ref()
                .map(|c| format!("{}\n{}", c.exception_type, scrub_paths(c.traceback.trim_end()))),
            script_fault: is_script_fault(result),
            failures: result
                .failures()
                .map(|o| FailedCase {
                    group: o.group.clone(),
                    case: o.case.clone(),
                    status: o.status,
                    exception_type: o.exception_type.clone(),
                    traceback: scrub_paths(o.traceback.trim_end()),
                })
                .collect(),
            executor_error: None,
        }
    }

    fn from_error(cycle: u32, err: &ExecError) -> Self {
        ScriptRun {
            cycle,
            passed: 0,
            failed: 0,
            errored: 0,
            timed_out: false,
            collection_error: None,
            script_fault: false,
            failures: Vec::new(),
            executor_error: Some(scrub_paths(&err.to_string())),
        }
    }

    /// The script ran to completion with zero failures.
    pub fn passed_all(&self) -> bool {
        self.executor_error.is_none()
            && !self.timed_out
            && self.collection_error.is_none()
            && self.failed == 0
            && self.errored == 0
    }

    /// Plain-text rendering handed to the Tester as the Test Execution Results.
    pub fn render(&self) -> String {
        let mut s = format!(
            "Executed {} test cases: {} passed, {} failed, {} errors.\n",
            self.passed + self.failed + self.errored,
            self.passed,
            self.failed,
            self.errored
        );
        if self.timed_out {
            s.push_str(&format!("The run was stopped: {}.\n", exec::TIME_LIMIT_EXCEEDED));
        }
        if let Some(e) = &self.executor_error {
            s.push_str(&format!("The test runner failed: {e}\n"));
        }
        if let Some(c) = &self.collection_error {
            s.push_str(&format!("Collection failed before any test ran:\n{c}\n"));
        }
        for f in &self.failures {
            s.push_str(&format!(
                "\n{}.{}: {:?} {}\n{}\n",
                f.group,
                f.case,
                f.status,
                f.exception_type.as_deref().unwrap_or(""),
                f.traceback
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub task_id: String,
    pub variant: ProcessVariant,
    pub model_id: String,
    /// Hash of the task's baseline payload, for audit.
    pub payload_hash: String,
    /// Every revision of every document in production order.
    pub documents: Vec<ArtifactDocument>,
    pub transcript: Vec<Exchange>,
    pub script_runs: Vec<ScriptRun>,
    pub interventions: Vec<Intervention>,
    pub final_code: String,
    pub bugfix_cycles_used: u32,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
}

impl RunRecord {
    /// Latest revision of `kind`.
    pub fn latest(&self, kind: DocumentKind) -> Option<&ArtifactDocument> {
        self.documents.iter().rev().find(|d| d.kind == kind)
    }

    /// Distinct document kinds present, in first-appearance order.
    pub fn kinds(&self) -> Vec<DocumentKind> {
        let mut out = Vec::new();
        for d in &self.documents {
            if !out.contains(&d.kind) {
                out.push(d.kind);
            }
        }
        out
    }
}

/// Runs the Tester's script against the current code during the Testing activity.
pub trait ScriptExecutor: Send + Sync {
    fn run_script(&self, code: &str, script: &str) -> Result<ExecutionResult, ExecError>;
}

impl<F> ScriptExecutor for F
where
    F: Fn(&str, &str) -> Result<ExecutionResult, ExecError> + Send + Sync,
{
    fn run_script(&self, code: &str, script: &str) -> Result<ExecutionResult, ExecError> {
        self(code, script)
    }
}

/// Executes scripts through a protocol runner.
#[derive(Debug, Clone)]
pub struct RunnerExecutor {
    pub runner: RunnerHandle,
    pub timeout_s: f64,
}

impl ScriptExecutor for RunnerExecutor {
    fn run_script(&self, code: &str, script: &str) -> Result<ExecutionResult, ExecError> {
        exec::execute_tests(&ExecutionRequest::new(code, script).with_timeout(self.timeout_s), &self.runner)
    }
}

/// For graphs without a Testing activity.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoExecutor;

impl ScriptExecutor for NoExecutor {
    fn run_script(&self, _: &str, _: &str) -> Result<ExecutionResult, ExecError> {
        Err(ExecError::InvalidRequest("no script executor configured".into()))
    }
}

/// Everything a pipeline run needs besides the task and the graph.
pub struct Pipeline<'a> {
    pub templates: &'a TemplateSet,
    pub gateway: &'a dyn ModelGateway,
    pub executor: &'a dyn ScriptExecutor,
    pub params: GenerationParams,
    /// Review-then-revise rounds per reviewed document.
    pub refinement_rounds: u32,
}

enum Stop {
    Gateway(StageFailure),
    Unparseable(StageFailure),
}

struct Run<'p, 'a> {
    p: &'p Pipeline<'a>,
    task: &'p TaskSpec,
    model_id: &'p str,
    rec: RunRecord,
}

impl Run<'_, '_> {
    fn latest(&self, kind: DocumentKind) -> Option<ArtifactDocument> {
        self.rec.latest(kind).cloned()
    }

    fn docs(&self, kinds: &[DocumentKind]) -> Vec<ArtifactDocument> {
        kinds.iter().filter_map(|k| self.latest(*k)).collect()
    }

    fn ask(&mut self, stage: &str, role: Role, prompt: PromptEnvelope) -> Result<String, Stop> {
        match self.p.gateway.complete(&prompt, &self.p.params, self.model_id) {
            Ok(r) => {
                let text = r.text.clone();
                self.rec.transcript.push(Exchange {
                    stage: stage.to_string(),
                    role,
                    prompt,
                    response: r.text,
                    latency_ms: r.latency_ms,
                });
                Ok(text)
            }
            Err(e) => Err(Stop::Gateway(StageFailure { stage: stage.to_string(), error: e.to_string() })),
        }
    }

    fn body(&self, kind: DocumentKind, stage: &str, response: &str) -> Result<String, Stop> {
        match kind {
            DocumentKind::Code => extract_code(response)
                .map_err(|e| Stop::Unparseable(StageFailure { stage: stage.to_string(), error: e.to_string() })),
            DocumentKind::TestScript => Ok(extract_block(response)),
            _ => Ok(response.trim().to_string()),
        }
    }

    fn render_error(stage: &str, e: impl fmt::Display) -> Stop {
        // Templates and graphs are validated up front, so this is a bug in the graph.
        Stop::Unparseable(StageFailure { stage: stage.to_string(), error: e.to_string() })
    }

    fn push(&mut self, doc: ArtifactDocument) -> ArtifactDocument {
        self.rec.documents.push(doc.clone());
        doc
    }

    /// Produce the node's document, then run the configured review rounds.
    fn produce(&mut self, node: &ActivityNode, graph: &ActivityGraph) -> Result<(), Stop> {
        let stage = node.output.slug().to_string();
        let ctx = self.docs(&node.context);
        let prompt = render_prompt(self.p.templates, node.role, node.task, &ctx, self.task)
            .map_err(|e| Self::render_error(&stage, e))?;
        let response = self.ask(&stage, node.role, prompt)?;
        let mut doc = self.push(ArtifactDocument::new(node.output, node.role, self.body(node.output, &stage, &response)?));

        let reviewers = graph.reviewers(node.output).to_vec();
        if reviewers.is_empty() {
            return Ok(());
        }
        for round in 0..self.p.refinement_rounds {
            let mut critiques = Vec::new();
            for reviewer in &reviewers {
                let rstage = format!("review:{}:{}:{}", node.output.slug(), reviewer.slug(), round + 1);
                let prompt = render_feedback_prompt(self.p.templates, *reviewer, &doc, &ctx, self.task)
                    .map_err(|e| Self::render_error(&rstage, e))?;
                let notes = self.ask(&rstage, *reviewer, prompt)?;
                critiques.push(Critique { reviewer: *reviewer, notes: notes.trim().to_string() });
            }
            let vstage = format!("revise:{}:{}", node.output.slug(), round + 1);
            let prompt =
                render_revision_prompt(self.p.templates, node.role, node.task, &ctx, self.task, &doc, &critiques)
                    .map_err(|e| Self::render_error(&vstage, e))?;
            let response = self.ask(&vstage, node.role, prompt)?;
            let body = self.body(node.output, &vstage, &response)?;
            doc = self.push(doc.revise(body));
        }
        Ok(())
    }

    fn write_script(&mut self, stage: &str) -> Result<(), Stop> {
        let ctx = self.docs(&[DocumentKind::TestCases]);
        let prompt = render_prompt(self.p.templates, Role::Tester, TaskKind::WriteTestScript, &ctx, self.task)
            .map_err(|e| Self::render_error(stage, e))?;
        let response = self.ask(stage, Role::Tester, prompt)?;
        let body = self.body(DocumentKind::TestScript, stage, &response)?;
        let doc = match self.latest(DocumentKind::TestScript) {
            Some(prev) => prev.revise(body),
            None => ArtifactDocument::new(DocumentKind::TestScript, Role::Tester, body),
        };
        self.push(doc);
        Ok(())
    }

    fn execute(&self, cycle: u32) -> ScriptRun {
        let code = self.latest(DocumentKind::Code).map(|d| d.content).unwrap_or_default();
        let script = self.latest(DocumentKind::TestScript).map(|d| d.content).unwrap_or_default();
        match self.p.executor.run_script(&code, &script) {
            Ok(r) => ScriptRun::from_result(cycle, &r),
            Err(e) => ScriptRun::from_error(cycle, &e),
        }
    }

    /// Testing activity after the test cases exist: script, execute, report,
    /// fix, up to `bugfix_cap` fixes or until the script passes.
    fn test_loop(&mut self, graph: &ActivityGraph) -> Result<(), Stop> {
        self.write_script(DocumentKind::TestScript.slug())?;
        let mut cycle = 0;
        loop {
            let mut run = self.execute(cycle);
            if run.script_fault {
                self.rec.interventions.push(Intervention {
                    cycle,
                    stage: "test_script".into(),
                    detail: format!(
                        "test script failed to load ({}); regenerated once",
                        run.collection_error.as_deref().and_then(|c| c.lines().next()).unwrap_or("unknown")
                    ),
                });
                self.write_script(&format!("regenerate:test_script:{cycle}"))?;
                run = self.execute(cycle);
            }
            if let Some(e) = &run.executor_error {
                self.rec.interventions.push(Intervention {
                    cycle,
                    stage: "execute".into(),
                    detail: format!("script execution failed: {e}"),
                });
            }
            let passed = run.passed_all();
            let results = ArtifactDocument::new(DocumentKind::TestResults, Role::Tester, run.render());
            self.rec.script_runs.push(run);

            let stage = if cycle == 0 { "test_report".to_string() } else { format!("test_report:{cycle}") };
            let prompt =
                render_prompt(self.p.templates, Role::Tester, TaskKind::WriteTestReport, &[results], self.task)
                    .map_err(|e| Self::render_error(&stage, e))?;
            let response = self.ask(&stage, Role::Tester, prompt)?;
            let body = self.body(DocumentKind::TestReport, &stage, &response)?;
            let report = match self.latest(DocumentKind::TestReport) {
                Some(prev) => prev.revise(body),
                None => ArtifactDocument::new(DocumentKind::TestReport, Role::Tester, body),
            };
            self.push(report);

            if passed || cycle >= graph.bugfix_cap {
                return Ok(());
            }
            cycle += 1;
            let stage = format!("fix:{cycle}");
            let ctx = self.docs(&[DocumentKind::TestReport, DocumentKind::Code]);
            let prompt = render_prompt(self.p.templates, Role::Developer, TaskKind::FixCode, &ctx, self.task)
                .map_err(|e| Self::render_error(&stage, e))?;
            let response = self.ask(&stage, Role::Developer, prompt)?;
            let body = self.body(DocumentKind::Code, &stage, &response)?;
            let code = self.latest(DocumentKind::Code).expect("code precedes testing").revise(body);
            self.push(code);
            self.rec.bugfix_cycles_used = cycle;
        }
    }

    fn drive(&mut self, graph: &ActivityGraph) -> Result<(), Stop> {
        for node in &graph.nodes {
            match node.task {
                TaskKind::WriteTestScript => self.test_loop(graph)?,
                // Produced inside the test loop.
                TaskKind::WriteTestReport => {}
                _ => self.produce(node, graph)?,
            }
        }
        Ok(())
    }
}

impl Pipeline<'_> {
    pub fn new<'a>(
        templates: &'a TemplateSet,
        gateway: &'a dyn ModelGateway,
        executor: &'a dyn ScriptExecutor,
        params: GenerationParams,
    ) -> Pipeline<'a> {
        Pipeline { templates, gateway, executor, params, refinement_rounds: DEFAULT_REFINEMENT_ROUNDS }
    }

    pub fn with_refinement_rounds(mut self, rounds: u32) -> Self {
        self.refinement_rounds = rounds;
        self
    }

    /// Drives `task` through `graph`. Gateway and extraction failures end the
    /// run early and are reflected in the record's status.
    pub fn run(&self, task: &TaskSpec, graph: &ActivityGraph, descriptor: &RunDescriptor) -> RunRecord {
        let rec = RunRecord {
            run_id: descriptor.run_id.clone(),
            task_id: task.task_id.clone(),
            variant: graph.variant,
            model_id: descriptor.model_id.clone(),
            payload_hash: payload_hash(task),
            documents: Vec::new(),
            transcript: Vec::new(),
            script_runs: Vec::new(),
            interventions: Vec::new(),
            final_code: String::new(),
            bugfix_cycles_used: 0,
            status: RunStatus::Completed,
            failure: None,
        };
        let mut run = Run { p: self, task, model_id: &descriptor.model_id, rec };
        let outcome = run.drive(graph);
        let mut rec = run.rec;
        rec.final_code = rec.latest(DocumentKind::Code).map(|d| d.content.clone()).unwrap_or_default();
        match outcome {
            Ok(()) => {}
            Err(Stop::Gateway(f)) => {
                tracing::warn!(run_id = %rec.run_id, stage = %f.stage, "gateway failed: {}", f.error);
                rec.status = RunStatus::GatewayFailed;
                rec.failure = Some(f);
            }
            Err(Stop::Unparseable(f)) => {
                tracing::warn!(run_id = %rec.run_id, stage = %f.stage, "unparseable output: {}", f.error);
                rec.status = RunStatus::Unparseable;
                rec.failure = Some(f);
            }
        }
        rec
    }
}

/// Convenience wrapper around [`Pipeline::run`] for a single task.
pub fn run_pipeline(
    task: &TaskSpec,
    graph: &ActivityGraph,
    gateway: &dyn ModelGateway,
    params: &GenerationParams,
    templates: &TemplateSet,
    executor: &dyn ScriptExecutor,
    model_id: &str,
) -> RunRecord {
    let descriptor = RunDescriptor::new(&task.task_id, graph.variant, model_id);
    Pipeline::new(templates, gateway, executor, params.clone()).run(task, graph, &descriptor)
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed run log {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

pub const RUN_LOG: &str = "run.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Descriptor(RunDescriptor),
    Document(ArtifactDocument),
    Exchange(Exchange),
    ScriptRun(ScriptRun),
    Intervention(Intervention),
    Outcome {
        payload_hash: String,
        status: RunStatus,
        bugfix_cycles_used: u32,
        final_code: String,
        failure: Option<StageFailure>,
    },
}

/// Writes `runs/<run_id>/run.jsonl` plus the latest revision of each
/// document as a plain file. Returns the run directory.
pub fn persist_run(runs_root: &Path, rec: &RunRecord, source_ext: &str) -> Result<PathBuf, PersistError> {
    let dir = runs_root.join(&rec.run_id);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PersistError::Io { path, source }
    };
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut lines: Vec<LogLine> = vec![LogLine::Descriptor(RunDescriptor {
        run_id: rec.run_id.clone(),
        task_id: rec.task_id.clone(),
        variant: rec.variant,
        model_id: rec.model_id.clone(),
    })];
    lines.extend(rec.documents.iter().cloned().map(LogLine::Document));
    lines.extend(rec.transcript.iter().cloned().map(LogLine::Exchange));
    lines.extend(rec.script_runs.iter().cloned().map(LogLine::ScriptRun));
    lines.extend(rec.interventions.iter().cloned().map(LogLine::Intervention));
    lines.push(LogLine::Outcome {
        payload_hash: rec.payload_hash.clone(),
        status: rec.status,
        bugfix_cycles_used: rec.bugfix_cycles_used,
        final_code: rec.final_code.clone(),
        failure: rec.failure.clone(),
    });
    // Write to a temporary name first so a killed process never leaves a
    // log that looks complete.
    let tmp = dir.join(format!("{RUN_LOG}.partial"));
    {
        let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
        for l in &lines {
            let mut s = serde_json::to_string(l).expect("log line serializes");
            s.push('\n');
            f.write_all(s.as_bytes()).map_err(io(&tmp))?;
        }
    }
    let log = dir.join(RUN_LOG);
    fs::rename(&tmp, &log).map_err(io(&log))?;

    let mut seen = Vec::new();
    for d in rec.documents.iter().rev() {
        if !seen.contains(&d.kind) {
            seen.push(d.kind);
            let p = dir.join(d.kind.file_name(source_ext));
            fs::write(&p, &d.content).map_err(io(&p))?;
        }
    }
    Ok(dir)
}

/// Reads a record written by [`persist_run`].
pub fn load_run(run_dir: &Path) -> Result<RunRecord, PersistError> {
    let path = run_dir.join(RUN_LOG);
    let text = fs::read_to_string(&path).map_err(|source| PersistError::Io { path: path.clone(), source })?;
    let bad = |reason: String| PersistError::Malformed { path: path.clone(), reason };
    let mut descriptor = None;
    let mut outcome = None;
    let (mut documents, mut transcript, mut script_runs, mut interventions) = (vec![], vec![], vec![], vec![]);
    for (i, line) in text.lines().enumerate() {
        match serde_json::from_str::<LogLine>(line).map_err(|e| bad(format!("line {}: {e}", i + 1)))? {
            LogLine::Descriptor(d) => descriptor = Some(d),
            LogLine::Document(d) => documents.push(d),
            LogLine::Exchange(e) => transcript.push(e),
            LogLine::ScriptRun(s) => script_runs.push(s),
            LogLine::Intervention(x) => interventions.push(x),
            LogLine::Outcome { payload_hash, status, bugfix_cycles_used, final_code, failure } => {
                outcome = Some((payload_hash, status, bugfix_cycles_used, final_code, failure))
            }
        }
    }
    let d = descriptor.ok_or_else(|| bad("missing descriptor line".into()))?;
    let (payload_hash, status, bugfix_cycles_used, final_code, failure) =
        outcome.ok_or_else(|| bad("missing outcome line".into()))?;
    Ok(RunRecord {
        run_id: d.run_id,
        task_id: d.task_id,
        variant: d.variant,
        model_id: d.model_id,
        payload_hash,
        documents,
        transcript,
        script_runs,
        interventions,
        final_code,
        bugfix_cycles_used,
        status,
        failure,
    })
}
