//! Line-oriented CSV plumbing shared by the file formats.
//!
//! Every format here is plain comma-separated text without quoting. Lines
//! starting with `#` are comments, and a first content line whose leading
//! field is not numeric is treated as a header.

use std::io::{self, BufRead};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Bad { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    pub fn bad(line: usize, message: impl Into<String>) -> Self {
        FormatError::Bad { line, message: message.into() }
    }
}

fn looks_numeric(field: &str) -> bool {
    field.trim().bytes().next().is_some_and(|b| b.is_ascii_digit() || b == b'-' || b == b'+' || b == b'.')
}

/// Calls `f(line_number, fields)` for each data line. Comment lines are passed
/// to `on_comment` (without the leading `#`).
pub fn for_each_record<R, F, C>(mut reader: R, mut on_comment: C, mut f: F) -> Result<(), FormatError>
where
    R: BufRead,
    F: FnMut(usize, &[&str]) -> Result<(), FormatError>,
    C: FnMut(&str),
{
    let mut buf = String::new();
    let mut line_no = 0;
    let mut seen_content = false;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let line = buf.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            on_comment(c.trim());
            continue;
        }
        let first = !seen_content;
        seen_content = true;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if first && !looks_numeric(fields[0]) {
            continue;
        }
        f(line_no, &fields)?;
    }
    Ok(())
}

pub fn parse_field<T: std::str::FromStr>(line: usize, fields: &[&str], idx: usize, name: &str) -> Result<T, FormatError> {
    let raw = fields.get(idx).ok_or_else(|| FormatError::bad(line, format!("missing field `{name}`")))?;
    raw.parse().map_err(|_| FormatError::bad(line, format!("bad `{name}` value `{raw}`")))
}

pub fn expect_fields(line: usize, fields: &[&str], n: usize) -> Result<(), FormatError> {
    if fields.len() != n {
        return Err(FormatError::bad(line, format!("expected {n} fields, found {}", fields.len())));
    }
    Ok(())
}

/// `key=value` pairs from a metadata comment such as `# kind a=1 b=2`.
pub fn comment_pairs(comment: &str) -> impl Iterator<Item = (&str, &str)> {
    comment.split_whitespace().filter_map(|tok| tok.split_once('='))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comments_and_header() {
        let text = "# meta a=1\nstation,lane\n1,2\n\n3,4\n";
        let mut rows = Vec::new();
        let mut comments = Vec::new();
        for_each_record(
            text.as_bytes(),
            |c| comments.push(c.to_string()),
            |_, f| {
                rows.push((f[0].to_string(), f[1].to_string()));
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(comments, vec!["meta a=1"]);
        assert_eq!(comment_pairs("meta a=1 b=x").collect::<Vec<_>>(), vec![("a", "1"), ("b", "x")]);
    }
}
