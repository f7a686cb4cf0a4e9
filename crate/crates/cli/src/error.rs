//! Errors reported as one JSON record on stderr, with the exit code telling
//! validation failures (1) from numerical failures (2).

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    Validation,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub failure: Failure,
    /// Short machine-friendly category such as `config` or `input`.
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            failure: Failure::Validation,
            kind: "config",
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self {
            failure: Failure::Validation,
            kind: "input",
            message: message.into(),
        }
    }

    pub fn numerical(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            failure: Failure::Numerical,
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.failure {
            Failure::Validation => 1,
            Failure::Numerical => 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.failure,
            "kind": self.kind,
            "message": self.message,
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}

impl From<gsfit::Error> for CliError {
    fn from(e: gsfit::Error) -> Self {
        use gsfit::Error as E;
        let kind = match &e {
            E::NonFinite(_) => return Self::numerical("non_finite", e.to_string()),
            E::InvalidArgument(_) => "invalid_argument",
            E::ShapeMismatch(_) => "shape_mismatch",
            E::EmptyInput(_) => "empty_input",
            E::MissingGroundTruth(_) => "missing_ground_truth",
            E::Io { .. } => "io",
            E::Json { .. } | E::Image { .. } | E::Format { .. } => "malformed_file",
        };
        Self {
            failure: Failure::Validation,
            kind,
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_records() {
        let e = CliError::config("bad key");
        assert_eq!(e.exit_code(), 1);
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"], "validation");
        assert_eq!(v["kind"], "config");
        assert_eq!(v["exit_code"], 1);
        let n: CliError = gsfit::Error::NonFinite("loss".into()).into();
        assert_eq!(n.exit_code(), 2);
    }
}
