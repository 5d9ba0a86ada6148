//! Deliverables handed between agents.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agents::Role;

/// Kind of document an activity produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    Requirement,
    Design,
    Code,
    TestCases,
    TestScript,
    TestReport,
    /// Structured results of executing a test script. Fed to the Tester when
    /// writing a report; never declared by an activity graph.
    TestResults,
}

impl DocumentKind {
    /// Name used inside prompts ("The [document] must satisfy ...").
    pub fn display_name(self) -> &'static str {
        match self {
            DocumentKind::Requirement => "Requirement Document",
            DocumentKind::Design => "Design Document",
            DocumentKind::Code => "Code Document",
            DocumentKind::TestCases => "Test Case Document",
            DocumentKind::TestScript => "Test Script",
            DocumentKind::TestReport => "Test Report",
            DocumentKind::TestResults => "Test Execution Results",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            DocumentKind::Requirement => "requirement",
            DocumentKind::Design => "design",
            DocumentKind::Code => "code",
            DocumentKind::TestCases => "test_cases",
            DocumentKind::TestScript => "test_script",
            DocumentKind::TestReport => "test_report",
            DocumentKind::TestResults => "test_results",
        }
    }

    /// File name the latest revision is written to under `runs/<run_id>/`.
    pub fn file_name(self, source_ext: &str) -> String {
        match self {
            DocumentKind::Requirement => "requirement.md".into(),
            DocumentKind::Design => "design.md".into(),
            DocumentKind::Code => format!("code.{source_ext}"),
            DocumentKind::TestCases => "testcases.md".into(),
            DocumentKind::TestScript => format!("testscript.{source_ext}"),
            DocumentKind::TestReport => "testreport.md".into(),
            DocumentKind::TestResults => "testresults.json".into(),
        }
    }

    /// Whether the document body is source code extracted from a response.
    pub fn is_source(self) -> bool {
        matches!(self, DocumentKind::Code | DocumentKind::TestScript)
    }
}

impl fmt::Display for DocumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// One revision of a deliverable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactDocument {
    pub kind: DocumentKind,
    /// 0 for the first draft, incremented on every regeneration.
    pub revision: u32,
    pub author: Role,
    pub content: String,
}

impl ArtifactDocument {
    pub fn new(kind: DocumentKind, author: Role, content: impl Into<String>) -> Self {
        Self { kind, revision: 0, author, content: content.into() }
    }

    pub fn revise(&self, content: impl Into<String>) -> Self {
        Self {
            kind: self.kind,
            revision: self.revision + 1,
            author: self.author,
            content: content.into(),
        }
    }
}
