//! Label-driven parsing of loosely formatted model output.
//!
//! Model answers decorate labels with markdown (`**Step Number:** 3`,
//! `### Error Signatures`, `1. Detection Heuristics:`). A line counts as a
//! label line when, after stripping that decoration, it starts with the label
//! (case-insensitively) followed by nothing or a colon.

/// If `line` is a label line for `label`, returns the text after the label.
pub fn match_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let body = strip_decoration(line);
    let head = body.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = body[label.len()..].trim_start_matches(['*', '_', '`', ' ', '\t']);
    if rest.is_empty() {
        return Some("");
    }
    let after_colon = rest.strip_prefix(':').or_else(|| rest.strip_prefix('：'))?;
    Some(after_colon.trim_start_matches(['*', '_', '`', ' ', '\t']).trim_end_matches(['*', '_', '`']).trim())
}

fn strip_decoration(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let before = s;
        s = s.trim_start_matches(['#', '*', '_', '-', '>', '`', '•', ' ', '\t']);
        // Numbering such as "1." "2)" "(3)".
        let digits = s.trim_start_matches('(').trim_start_matches(|c: char| c.is_ascii_digit());
        if digits.len() < s.trim_start_matches('(').len() {
            if let Some(rest) = digits.strip_prefix('.').or_else(|| digits.strip_prefix(')')) {
                s = rest;
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Splits `text` into labelled sections. `labels` maps a key to its accepted
/// spellings; the first spelling that matches wins. Each section runs until
/// the next label line. Returns `(key, body)` pairs in order of appearance;
/// text before the first label is dropped.
pub fn split_sections<'k>(text: &str, labels: &[(&'k str, &[&str])]) -> Vec<(&'k str, String)> {
    let mut out: Vec<(&'k str, String)> = Vec::new();
    for line in text.lines() {
        let hit = labels.iter().find_map(|(key, spellings)| {
            spellings.iter().find_map(|sp| match_label(line, sp).map(|rest| (*key, rest)))
        });
        match hit {
            Some((key, rest)) => out.push((key, rest.to_string())),
            None => {
                if let Some((_, body)) = out.last_mut() {
                    if !body.is_empty() {
                        body.push('\n');
                    }
                    body.push_str(line);
                }
            }
        }
    }
    for (_, body) in &mut out {
        *body = body.trim().to_string();
    }
    out
}

/// First occurrence of `key` with a non-empty body.
pub fn section<'a>(sections: &'a [(&str, String)], key: &str) -> Option<&'a str> {
    sections
        .iter()
        .find(|(k, body)| *k == key && !body.is_empty())
        .map(|(_, b)| b.as_str())
}

/// Leading unsigned integer of `s`, skipping non-digit decoration such as `#`.
pub fn leading_integer(s: &str) -> Option<usize> {
    let start = s.find(|c: char| c.is_ascii_digit())?;
    let prefix = &s[..start];
    if prefix.chars().any(|c| c.is_alphanumeric()) {
        return None;
    }
    let digits: String = s[start..].chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}
