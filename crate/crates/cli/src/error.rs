use serde::Serialize;

/// Printed to stderr as `{"error": {"kind": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> CliError {
        CliError { kind: kind.to_string(), message: message.into() }
    }

    pub fn schema(message: impl Into<String>) -> CliError {
        CliError::new("SchemaMismatch", message)
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> CliError {
                CliError::new(e.kind(), e.to_string())
            }
        }
    )*};
}

from_core!(
    supdis::loader::LoadError,
    supdis::groundtruth::GroundTruthError,
    supdis::model::ModelError,
    supdis::eval::EvalError,
    supdis::vsa::VsaError,
    supdis::dataset::DatasetError
);
