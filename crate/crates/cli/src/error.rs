use std::fmt::Display;

use serde::Serialize;
use serde_json::{Map, Value};

/// A problem with the configuration or arguments (exit code 2).
#[derive(Debug, Clone, thiserror::Error)]
#[error("{message}")]
pub struct ConfigError {
    pub message: String,
    pub context: Map<String, Value>,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            context: Map::new(),
        }
    }

    pub fn field(name: &str, err: impl Display) -> Self {
        Self::new(err.to_string()).with("field", name)
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.context.insert(key.into(), Value::String(value.to_string()));
        self
    }
}

/// Machine-readable error printed on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub code: &'static str,
    pub message: String,
    pub context: Map<String, Value>,
}

impl ErrorReport {
    pub fn exit_code(&self) -> i32 {
        if self.code == "invalid_config" {
            2
        } else {
            1
        }
    }
}

pub fn report(err: &anyhow::Error, command: &str) -> ErrorReport {
    let (code, message, mut context) = match err.downcast_ref::<ConfigError>() {
        Some(c) => ("invalid_config", c.message.clone(), c.context.clone()),
        None => ("runtime", format!("{err:#}"), Map::new()),
    };
    context.insert("command".into(), Value::String(command.into()));
    ErrorReport { code, message, context }
}
