//! Line classifier for the lines-of-code / lines-of-comments metrics.
//!
//! Blank lines count as neither. For Java, Go, Rust, JavaScript, PHP, Python
//! and Ruby files, a non-blank line is a comment when it starts (after
//! indentation) with the language's line-comment marker, or lies inside a
//! block comment that was opened at the start of a line. A line with code
//! before or after a comment counts as code. Block comments opened mid-line
//! are not tracked. All other text files count every non-blank line as code.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LineCounts {
    pub code: u64,
    pub comments: u64,
}

impl std::ops::AddAssign for LineCounts {
    fn add_assign(&mut self, o: LineCounts) {
        self.code += o.code;
        self.comments += o.comments;
    }
}

struct Rules {
    line: &'static [&'static str],
    block: &'static [(&'static str, &'static str)],
}

const C_LIKE: Rules = Rules {
    line: &["//"],
    block: &[("/*", "*/")],
};
const PHP: Rules = Rules {
    line: &["//", "#"],
    block: &[("/*", "*/")],
};
const PYTHON: Rules = Rules {
    line: &["#"],
    block: &[],
};
const RUBY: Rules = Rules {
    line: &["#"],
    block: &[("=begin", "=end")],
};

fn rules_for(path: &str) -> Option<&'static Rules> {
    let ext = path.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase())?;
    match ext.as_str() {
        "java" | "go" | "rs" | "js" | "mjs" | "cjs" | "jsx" => Some(&C_LIKE),
        "php" => Some(&PHP),
        "py" => Some(&PYTHON),
        "rb" => Some(&RUBY),
        _ => None,
    }
}

/// True when the bytes look like a binary file (a NUL in the first 8 KiB).
pub fn is_binary(bytes: &[u8]) -> bool {
    bytes.iter().take(8192).any(|&b| b == 0)
}

pub fn classify(path: &str, text: &str) -> LineCounts {
    let mut counts = LineCounts::default();
    let rules = rules_for(path);
    let mut in_block: Option<&str> = None;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some(rules) = rules else {
            counts.code += 1;
            continue;
        };
        if let Some(end) = in_block {
            match line.find(end) {
                Some(i) => {
                    in_block = None;
                    if line[i + end.len()..].trim().is_empty() {
                        counts.comments += 1;
                    } else {
                        counts.code += 1;
                    }
                }
                None => counts.comments += 1,
            }
            continue;
        }
        if rules.line.iter().any(|p| line.starts_with(p)) {
            counts.comments += 1;
            continue;
        }
        if let Some((open, close)) = rules.block.iter().find(|(o, _)| line.starts_with(o)) {
            let rest = &line[open.len()..];
            match rest.find(close) {
                Some(i) if rest[i + close.len()..].trim().is_empty() => counts.comments += 1,
                Some(_) => counts.code += 1,
                None => {
                    in_block = Some(close);
                    counts.comments += 1;
                }
            }
            continue;
        }
        counts.code += 1;
    }
    counts
}
