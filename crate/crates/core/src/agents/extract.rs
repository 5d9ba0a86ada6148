use std::sync::LazyLock;

use regex::Regex;

use super::AgentError;

static CLASS_KEYWORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\s*class\s+[A-Za-z_]\w*").unwrap());

/// Interiors of the fenced code blocks in `text`. An unterminated final
/// fence runs to the end of the text.
fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let is_fence = line.trim_start().starts_with("```");
        match (&mut current, is_fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(lines), true) => {
                blocks.push(lines.join("\n"));
                current = None;
            }
            (Some(lines), false) => lines.push(line),
            (None, false) => {}
        }
    }
    if let Some(lines) = current {
        blocks.push(lines.join("\n"));
    }
    blocks
}

/// The largest fenced block (by line count, first wins on ties), or the
/// whole response trimmed when there are no fences.
pub fn extract_block(response: &str) -> String {
    let blocks = fenced_blocks(response);
    let mut best: Option<&String> = None;
    for b in &blocks {
        if best.is_none_or(|cur| b.lines().count() > cur.lines().count()) {
            best = Some(b);
        }
    }
    match best {
        Some(b) => b.trim_matches('\n').to_string(),
        None => response.trim().to_string(),
    }
}

/// Source for a Code Document: [`extract_block`] plus the requirement that a
/// class definition is present.
pub fn extract_code(response: &str) -> Result<String, AgentError> {
    if response.trim().is_empty() {
        return Err(AgentError::CodeExtraction("empty response".into()));
    }
    let code = extract_block(response);
    if CLASS_KEYWORD.is_match(&code) {
        Ok(code)
    } else {
        Err(AgentError::CodeExtraction("no class definition found".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(lines: usize, marker: &str) -> String {
        let mut s = format!("class {marker}:\n");
        for i in 1..lines {
            s.push_str(&format!("    x{i} = {i}\n"));
        }
        s
    }

    #[test]
    fn single_block_interior() {
        let r = "Here you go:\n```python\nclass A:\n    pass\n```\nDone.";
        assert_eq!(extract_code(r).unwrap(), "class A:\n    pass");
    }

    #[test]
    fn longest_block_wins() {
        let small = block(10, "Small");
        let big = block(40, "Big");
        assert_eq!(small.lines().count(), 10);
        assert_eq!(big.lines().count(), 40);
        let r = format!("Intro.\n```python\n{small}```\nMore prose.\n```\n{big}```\nBye.");
        let got = extract_code(&r).unwrap();
        assert!(got.starts_with("class Big:"));
        assert_eq!(got.lines().count(), 40);
    }

    #[test]
    fn prose_without_class_fails() {
        assert!(matches!(
            extract_code("I cannot help with that request."),
            Err(AgentError::CodeExtraction(_))
        ));
        assert!(extract_code("   ").is_err());
    }

    #[test]
    fn unfenced_code_is_used_whole() {
        assert_eq!(extract_code("  class B:\n    pass\n\n").unwrap(), "class B:\n    pass");
    }

    #[test]
    fn unterminated_fence() {
        assert_eq!(extract_block("```py\nclass C:\n    pass"), "class C:\n    pass");
    }
}
