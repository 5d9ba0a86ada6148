//! Line-oriented scanning of Python sources.
//!
//! This is not a parser. It classifies physical lines (blank, comment,
//! documentation string, code) while tracking triple-quoted strings, and
//! pulls out the handful of structural facts the harness needs: top-level
//! classes, their methods, and `unittest` test groups.

use std::sync::LazyLock;

use regex::Regex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    Blank,
    Comment,
    /// Part of a triple-quoted string used as a statement (docstring).
    Doc,
    Code,
}

#[derive(Debug, Clone)]
pub struct SourceLine<'a> {
    /// 1-based line number.
    pub number: usize,
    pub text: &'a str,
    pub kind: LineKind,
    /// The line begins inside a multi-line string literal.
    pub in_string: bool,
}

impl SourceLine<'_> {
    pub fn indent(&self) -> usize {
        self.text.len() - self.text.trim_start().len()
    }
}

static DOC_START: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^[rRbBuUfF]{0,2}("""|''')"#).unwrap());
static CLASS_DEF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^class\s+([A-Za-z_]\w*)\s*(?:\(([^)]*)\)?)?").unwrap());
static FUNC_DEF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:async\s+)?def\s+([A-Za-z_]\w*)\s*\(").unwrap());

/// Scans `s` from a normal (non-string) state. Returns the triple-quote
/// delimiter if the line ends inside an unterminated triple-quoted string.
fn scan_code(s: &str) -> Option<&'static str> {
    let b = s.as_bytes();
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'#' => return None,
            q @ (b'"' | b'\'') => {
                let triple = i + 2 < b.len() && b[i + 1] == q && b[i + 2] == q;
                if triple {
                    let delim = if q == b'"' { "\"\"\"" } else { "'''" };
                    match find_close(&s[i + 3..], delim) {
                        Some(end) => i = i + 3 + end,
                        None => return Some(delim),
                    }
                } else {
                    i += 1;
                    while i < b.len() && b[i] != q {
                        if b[i] == b'\\' {
                            i += 1;
                        }
                        i += 1;
                    }
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    None
}

/// Byte offset just past the closing `delim` in `s`, honouring backslash escapes.
fn find_close(s: &str, delim: &str) -> Option<usize> {
    let b = s.as_bytes();
    let d = delim.as_bytes();
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'\\' {
            i += 2;
            continue;
        }
        if b[i..].starts_with(d) {
            return Some(i + d.len());
        }
        i += 1;
    }
    None
}

/// Classifies every physical line of `src`.
pub fn classify(src: &str) -> Vec<SourceLine<'_>> {
    let mut out = Vec::new();
    // (delimiter, is_docstring)
    let mut open: Option<(&'static str, bool)> = None;
    for (idx, text) in src.lines().enumerate() {
        let number = idx + 1;
        if let Some((delim, doc)) = open {
            let kind = if doc { LineKind::Doc } else { LineKind::Code };
            if let Some(end) = find_close(text, delim) {
                open = scan_code(&text[end..]).map(|d| (d, false));
            }
            out.push(SourceLine { number, text, kind, in_string: true });
            continue;
        }
        let trimmed = text.trim_start();
        let kind = if trimmed.is_empty() {
            LineKind::Blank
        } else if trimmed.starts_with('#') {
            LineKind::Comment
        } else if let Some(m) = DOC_START.captures(trimmed) {
            let delim = if &m[1] == "\"\"\"" { "\"\"\"" } else { "'''" };
            let body_start = m.get(0).unwrap().end();
            match find_close(&trimmed[body_start..], delim) {
                Some(end) => {
                    open = scan_code(&trimmed[body_start + end..]).map(|d| (d, false));
                }
                None => open = Some((delim, true)),
            }
            LineKind::Doc
        } else {
            open = scan_code(trimmed).map(|d| (d, false));
            LineKind::Code
        };
        out.push(SourceLine { number, text, kind, in_string: false });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDecl {
    pub name: String,
    pub bases: String,
    /// 1-based line of the `class` statement.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodDecl {
    pub name: String,
    pub signature: String,
    pub doc: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestGroup {
    pub name: String,
    pub cases: Vec<String>,
}

fn structural(src: &str) -> Vec<SourceLine<'_>> {
    classify(src)
        .into_iter()
        .filter(|l| !l.in_string)
        .collect()
}

/// Class statements at column zero.
pub fn top_level_classes(src: &str) -> Vec<ClassDecl> {
    structural(src)
        .iter()
        .filter(|l| l.kind == LineKind::Code && l.indent() == 0)
        .filter_map(|l| {
            CLASS_DEF.captures(l.text).map(|c| ClassDecl {
                name: c[1].to_string(),
                bases: c.get(2).map(|m| m.as_str().trim().to_string()).unwrap_or_default(),
                line: l.number,
            })
        })
        .collect()
}

/// Methods defined directly in the body of top-level class `class_name`.
pub fn methods_of(src: &str, class_name: &str) -> Vec<MethodDecl> {
    let lines = classify(src);
    let Some(start) = lines.iter().position(|l| {
        !l.in_string
            && l.kind == LineKind::Code
            && l.indent() == 0
            && CLASS_DEF.captures(l.text).is_some_and(|c| &c[1] == class_name)
    }) else {
        return Vec::new();
    };

    let body: Vec<&SourceLine> = lines[start + 1..]
        .iter()
        .take_while(|l| l.in_string || l.kind != LineKind::Code || l.indent() > 0)
        .collect();
    let Some(member_indent) = body
        .iter()
        .find(|l| !l.in_string && matches!(l.kind, LineKind::Code | LineKind::Doc))
        .map(|l| l.indent())
    else {
        return Vec::new();
    };

    let mut methods = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let line = body[i];
        let is_def = !line.in_string
            && line.kind == LineKind::Code
            && line.indent() == member_indent
            && FUNC_DEF.is_match(line.text.trim_start());
        if !is_def {
            i += 1;
            continue;
        }
        let name = FUNC_DEF.captures(line.text.trim_start()).unwrap()[1].to_string();

        // Signature may span lines until the parentheses balance.
        let mut signature = line.text.trim().to_string();
        let mut depth = paren_balance(line.text);
        let mut j = i + 1;
        while depth > 0 && j < body.len() {
            signature.push(' ');
            signature.push_str(body[j].text.trim());
            depth += paren_balance(body[j].text);
            j += 1;
        }
        let signature = signature.trim_end_matches(':').trim().to_string();

        // Leading docstring of the method body.
        let mut doc_lines = Vec::new();
        while j < body.len() && body[j].kind == LineKind::Blank {
            j += 1;
        }
        while j < body.len() && body[j].kind == LineKind::Doc {
            doc_lines.push(body[j].text.trim());
            j += 1;
            if j < body.len() && !body[j].in_string {
                break;
            }
        }
        let doc = doc_lines
            .join("\n")
            .trim_matches(|c| c == '"' || c == '\'')
            .trim()
            .to_string();

        methods.push(MethodDecl { name, signature, doc });
        i = j.max(i + 1);
    }
    methods
}

fn paren_balance(line: &str) -> i32 {
    let code = line.split('#').next().unwrap_or("");
    code.chars().fold(0, |acc, c| match c {
        '(' => acc + 1,
        ')' => acc - 1,
        _ => acc,
    })
}

/// `unittest` test groups: top-level classes deriving from a `TestCase`,
/// with their `test*` methods in source order.
pub fn test_groups(src: &str) -> Vec<TestGroup> {
    top_level_classes(src)
        .into_iter()
        .filter(|c| c.bases.contains("TestCase"))
        .map(|c| {
            let cases = methods_of(src, &c.name)
                .into_iter()
                .map(|m| m.name)
                .filter(|n| n.starts_with("test"))
                .collect();
            TestGroup { name: c.name, cases }
        })
        .collect()
}
