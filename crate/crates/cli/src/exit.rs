//! Exit codes and the one-line JSON error report.

use std::fmt;

use posekit_core::Error as CoreError;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Bad flags, config or arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code and short kind for a core error.
pub fn classify_core(e: &CoreError) -> (i32, &'static str) {
    match e {
        CoreError::Config(_) => (EXIT_USAGE, "config"),
        CoreError::Contract(_) => (EXIT_USAGE, "contract"),
        CoreError::Split(_) => (EXIT_USAGE, "split"),
        CoreError::IndexOutOfRange { .. } => (EXIT_USAGE, "index"),
        CoreError::Conflict { .. } => (EXIT_USAGE, "conflict"),
        CoreError::Io { .. } => (EXIT_IO, "io"),
        CoreError::Format { .. } => (EXIT_IO, "format"),
        CoreError::Schema(_) => (EXIT_IO, "schema"),
        CoreError::Parse { .. } => (EXIT_IO, "parse"),
        CoreError::InvalidAnnotation(_) => (EXIT_IO, "annotation"),
        CoreError::NotFound(_) => (EXIT_IO, "not_found"),
        CoreError::Divergence { .. } => (EXIT_NUMERIC, "divergence"),
        CoreError::Singular(_) => (EXIT_NUMERIC, "singular"),
        CoreError::ZeroVector => (EXIT_NUMERIC, "zero_vector"),
        CoreError::Infeasible { .. } => (EXIT_NUMERIC, "infeasible"),
        CoreError::NoConsistentClass => (EXIT_NUMERIC, "no_consistent_class"),
    }
}

/// Exit code and kind for any error in the chain; the innermost known
/// cause wins.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    let mut found = None;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            found = Some(classify_core(e));
        } else if cause.is::<UsageError>() {
            found = Some((EXIT_USAGE, "usage"));
        } else if cause.is::<std::io::Error>() {
            found = Some((EXIT_IO, "io"));
        } else if cause.is::<serde_json::Error>() {
            found = Some((EXIT_IO, "format"));
        }
    }
    found.unwrap_or((EXIT_USAGE, "error"))
}

#[derive(Serialize)]
struct Report<'a> {
    error: &'a str,
    code: i32,
    message: String,
}

/// Single-line machine-readable form of `err`.
pub fn error_line(err: &anyhow::Error) -> (i32, String) {
    let (code, kind) = classify(err);
    let report = Report {
        error: kind,
        code,
        message: format!("{err:#}").replace('\n', " "),
    };
    (code, serde_json::to_string(&report).expect("report serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn codes_follow_the_chain() {
        let io = CoreError::Io {
            path: "/x/y".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        let e = anyhow::Error::from(io).context("loading dataset");
        let (code, line) = error_line(&e);
        assert_eq!(code, EXIT_IO);
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "io");
        assert!(v["message"].as_str().unwrap().contains("/x/y"));

        let e: anyhow::Result<()> = Err(CoreError::Divergence { epoch: 1, batch: 2 }.into());
        assert_eq!(classify(&e.context("training").unwrap_err()).0, EXIT_NUMERIC);
        assert_eq!(classify(&UsageError("bad".into()).into()).0, EXIT_USAGE);
    }
}
