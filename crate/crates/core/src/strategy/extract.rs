//! Pulling a test script out of a free-text completion.

/// Returns the first fenced code block, or failing that the longest run of
/// code-shaped lines. `None` when nothing looks like a script.
pub fn extract_test_script(completion: &str) -> Option<String> {
    if let Some(block) = first_fenced_block(completion) {
        return (!block.trim().is_empty()).then_some(block);
    }
    longest_code_region(completion)
}

fn first_fenced_block(text: &str) -> Option<String> {
    let mut lines = text.lines();
    lines.by_ref().find(|l| l.trim_start().starts_with("```"))?;
    let mut body = Vec::new();
    for line in lines {
        if line.trim_start().starts_with("```") {
            break;
        }
        body.push(line);
    }
    // An unterminated fence runs to the end of the completion.
    Some(body.join("\n"))
}

const STATEMENT_PREFIXES: [&str; 22] = [
    "def ",
    "class ",
    "import ",
    "from ",
    "assert",
    "return",
    "if ",
    "elif ",
    "else:",
    "for ",
    "while ",
    "try:",
    "except",
    "finally:",
    "with ",
    "@",
    "#",
    "self.",
    "raise ",
    "pass",
    "unittest.",
    "print(",
];

/// Lines that make a region count as a test script.
const ANCHOR_PREFIXES: [&str; 5] = ["def ", "assert", "import ", "from ", "class "];

fn is_code_line(line: &str) -> bool {
    if line.trim().is_empty() {
        return false;
    }
    if line.starts_with("    ") || line.starts_with('\t') {
        return true;
    }
    let t = line.trim_start();
    if STATEMENT_PREFIXES.iter().any(|p| t.starts_with(p)) {
        return true;
    }
    is_assignment(t) || is_call(t)
}

fn is_identifier_path(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn is_assignment(t: &str) -> bool {
    match t.find('=') {
        Some(i) if !t[i + 1..].starts_with('=') => {
            let lhs = t[..i].trim_end_matches(['+', '-', '*', '/']).trim();
            lhs.split(',').all(|p| is_identifier_path(p.trim()))
        }
        _ => false,
    }
}

fn is_call(t: &str) -> bool {
    let t = t.trim_end();
    match t.find('(') {
        Some(i) => is_identifier_path(&t[..i]) && t.ends_with(')'),
        None => false,
    }
}

fn longest_code_region(text: &str) -> Option<String> {
    let lines: Vec<&str> = text.lines().collect();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < lines.len() {
        if !is_code_line(lines[i]) {
            i += 1;
            continue;
        }
        let start = i;
        let mut end = i + 1;
        let mut j = i + 1;
        // Blank lines are part of the region only if code follows them.
        while j < lines.len() {
            if is_code_line(lines[j]) {
                end = j + 1;
            } else if !lines[j].trim().is_empty() {
                break;
            }
            j += 1;
        }
        let anchored = lines[start..end]
            .iter()
            .any(|l| ANCHOR_PREFIXES.iter().any(|p| l.trim_start().starts_with(p)));
        let len = end - start;
        if anchored && best.is_none_or(|(s, e)| len > e - s) {
            best = Some((start, end));
        }
        i = end;
    }
    best.map(|(s, e)| lines[s..e].join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_fenced_block_verbatim() {
        let c = "Here you go:\n```python\nimport math\n\nassert math.floor(1.5) == 1\n```\nHope that helps.";
        assert_eq!(
            extract_test_script(c).unwrap(),
            "import math\n\nassert math.floor(1.5) == 1"
        );
    }

    #[test]
    fn first_of_two_blocks() {
        let c = "```python\nassert f(1) == 2\n```\nand also\n```python\nassert f(2) == 3\n```";
        assert_eq!(extract_test_script(c).unwrap(), "assert f(1) == 2");
    }

    #[test]
    fn pure_prose_is_absent() {
        let c = "I would test the function with positive numbers, negative numbers, and zero.\nThat should cover it.";
        assert_eq!(extract_test_script(c), None);
    }

    #[test]
    fn empty_fence_is_absent() {
        assert_eq!(extract_test_script("```python\n```"), None);
    }

    #[test]
    fn unfenced_code_region_with_trailing_prose() {
        let c = "Sure.\nimport unittest\n\ndef test_add():\n    assert add(1, 2) == 3\n\nThis test checks addition.";
        assert_eq!(
            extract_test_script(c).unwrap(),
            "import unittest\n\ndef test_add():\n    assert add(1, 2) == 3"
        );
    }

    #[test]
    fn picks_longest_region() {
        let c = "assert a()\nSome words here.\nfrom m import f\nassert f(1) == 1\nassert f(2) == 4\nThe end.";
        assert_eq!(
            extract_test_script(c).unwrap(),
            "from m import f\nassert f(1) == 1\nassert f(2) == 4"
        );
    }

    #[test]
    fn unterminated_fence_runs_to_end() {
        let c = "```python\nassert g() is None\nassert g(1) == 1";
        assert_eq!(extract_test_script(c).unwrap(), "assert g() is None\nassert g(1) == 1");
    }

    #[test]
    fn prose_sentence_with_parens_is_not_code() {
        assert!(!is_code_line("Call the function (with care) and check."));
        assert!(is_code_line("result = add(1, 2)"));
        assert!(!is_code_line("x == y is the check"));
    }
}
