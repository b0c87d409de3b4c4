//! IBUG `.pts` landmark files.
//!
//! ```text
//! version: 1
//! n_points: 3
//! {
//! 1.0 2.0
//! 3.5 4.5
//! 5.0 6.0
//! }
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::shape::Point;

struct Token<'a> {
    text: &'a str,
    line: usize,
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        for tok in line.split_whitespace() {
            tokens.push(Token { text: tok, line: i + 1 });
        }
    }
    tokens
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Reads `key:` followed by its value, accepting `key:value` or `key: value`.
fn header_value<'a>(
    tokens: &[Token<'a>],
    pos: &mut usize,
    key: &str,
    last_line: usize,
) -> Result<(&'a str, usize)> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| err(last_line, format!("missing header '{key}:'")))?;
    let rest = tok
        .text
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(':'))
        .ok_or_else(|| err(tok.line, format!("missing header '{key}:', found '{}'", tok.text)))?;
    *pos += 1;
    if !rest.is_empty() {
        return Ok((rest, tok.line));
    }
    let val = tokens
        .get(*pos)
        .ok_or_else(|| err(tok.line, format!("header '{key}:' has no value")))?;
    *pos += 1;
    Ok((val.text, val.line))
}

/// Parses a complete `.pts` document, returning the points in file order.
pub fn parse_pts(text: &str) -> Result<Vec<Point>> {
    let tokens = tokenize(text);
    let last_line = text.split('\n').count();
    let mut pos = 0usize;

    let (version, vline) = header_value(&tokens, &mut pos, "version", last_line)?;
    version
        .parse::<f64>()
        .map_err(|_| err(vline, format!("non-numeric version '{version}'")))?;

    let (count, cline) = header_value(&tokens, &mut pos, "n_points", last_line)?;
    let n: usize = count
        .parse()
        .map_err(|_| err(cline, format!("n_points must be a non-negative integer, got '{count}'")))?;

    match tokens.get(pos) {
        Some(t) if t.text == "{" => pos += 1,
        Some(t) => return Err(err(t.line, format!("missing opening brace, found '{}'", t.text))),
        None => return Err(err(last_line, "missing opening brace")),
    }

    let mut values = Vec::with_capacity(2 * n);
    let close_line = loop {
        let Some(t) = tokens.get(pos) else {
            return Err(err(last_line, "missing closing brace"));
        };
        pos += 1;
        if t.text == "}" {
            break t.line;
        }
        let v: f64 = t
            .text
            .parse()
            .map_err(|_| err(t.line, format!("non-numeric token '{}'", t.text)))?;
        if !v.is_finite() {
            return Err(err(t.line, format!("non-finite coordinate '{}'", t.text)));
        }
        values.push(v);
    };
    if values.len() != 2 * n {
        return Err(err(
            close_line,
            format!(
                "point count mismatch: header declares {n}, found {} coordinates",
                values.len()
            ),
        ));
    }
    if let Some(t) = tokens.get(pos) {
        return Err(err(t.line, format!("unexpected token '{}' after closing brace", t.text)));
    }
    Ok(values.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect())
}

/// Writes points in the exact grammar; coordinates use the shortest
/// representation that parses back to the same `f64`.
pub fn serialize_pts(points: &[Point]) -> String {
    let mut out = String::with_capacity(32 + points.len() * 24);
    out.push_str("version: 1\n");
    let _ = writeln!(out, "n_points: {}", points.len());
    out.push_str("{\n");
    for p in points {
        let _ = writeln!(out, "{:?} {:?}", p.x, p.y);
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_document() {
        let pts = parse_pts("version: 1\nn_points: 3\n{\n1.0 2.0\n3.5 4.5\n5.0 6.0\n}").unwrap();
        assert_eq!(
            pts,
            vec![Point::new(1.0, 2.0), Point::new(3.5, 4.5), Point::new(5.0, 6.0)]
        );
    }

    #[test]
    fn tolerates_crlf_and_spacing() {
        let doc = "version:1\r\nn_points:   2\r\n{\r\n  1 2   3\r\n4\r\n}\r\n";
        assert_eq!(parse_pts(doc).unwrap(), vec![Point::new(1.0, 2.0), Point::new(3.0, 4.0)]);
    }

    #[test]
    fn count_mismatch_is_reported() {
        let e = parse_pts("version: 1\nn_points: 3\n{\n1.0 2.0\n3.5 4.5\n}").unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 6);
                assert!(msg.contains("point count mismatch"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_documents() {
        let cases = [
            ("n_points: 1\n{\n1 2\n}", "missing header"),
            ("version: 1\n{\n1 2\n}", "missing header"),
            ("version: 1\nn_points: 1\n1 2\n}", "missing opening brace"),
            ("version: 1\nn_points: 1\n{\n1 2\n", "missing closing brace"),
            ("version: 1\nn_points: 1\n{\n1 x\n}", "non-numeric"),
            ("version: 1\nn_points: two\n{\n}", "n_points"),
            ("version: 1\nn_points: 1\n{\n1 2\n}\n5", "unexpected token"),
        ];
        for (doc, needle) in cases {
            match parse_pts(doc) {
                Err(Error::Parse { msg, .. }) => assert!(msg.contains(needle), "{doc:?}: {msg}"),
                other => panic!("{doc:?}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn non_numeric_names_its_line() {
        match parse_pts("version: 1\nn_points: 2\n{\n1 2\n3 abc\n}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn serialize_uses_exact_grammar() {
        let s = serialize_pts(&[Point::new(1.0, 2.5)]);
        assert_eq!(s, "version: 1\nn_points: 1\n{\n1.0 2.5\n}\n");
    }
}
