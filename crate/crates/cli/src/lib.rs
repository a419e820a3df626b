//! Pipeline driver: world generation, base training, tracing, editing,
//! evaluation and continual editing, each a stage over one output directory.

pub mod config;
pub mod manifest;
pub mod pipeline;

use fairstamp::Error;

pub use config::{Overrides, PipelineConfig};
pub use manifest::RunManifest;
pub use pipeline::{Pipeline, Stage, StageError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Exit status for a failed stage: usage or config problems, bad or missing
/// data, and numeric failures.
pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::Attach(_) | Error::Generation(_) => EXIT_USAGE,
        Error::Divergence(_) | Error::Check(_) | Error::Loss(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn error_kind(code: u8) -> &'static str {
    match code {
        EXIT_USAGE => "usage",
        EXIT_NUMERIC => "numeric",
        _ => "data",
    }
}

/// One JSON object on one line, for the diagnostic stream.
pub fn error_line(stage: Option<Stage>, code: u8, message: &str) -> String {
    serde_json::json!({
        "error": error_kind(code),
        "exit": code,
        "stage": stage.map(Stage::name),
        "message": message.replace('\n', " "),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::Load {
                path: PathBuf::from("a"),
                reason: "gone".into()
            }),
            EXIT_DATA
        );
        assert_eq!(exit_code(&Error::Check("x".into())), EXIT_NUMERIC);
    }

    #[test]
    fn error_line_is_single_line_json() {
        let line = error_line(Some(Stage::Eval), EXIT_DATA, "missing\nfile");
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["stage"], "eval");
        assert_eq!(v["exit"], 2);
        assert_eq!(v["error"], "data");
    }
}
