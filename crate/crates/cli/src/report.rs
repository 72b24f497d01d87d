use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

/// Output of one command. `results` is a JSON object, so keys come out sorted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: String,
    pub inputs_digest: String,
    pub results: Value,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(command: &str, inputs_digest: String) -> Self {
        Self {
            command: command.to_string(),
            inputs_digest,
            results: Value::Object(Default::default()),
            warnings: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("report values serialize");
        if let Value::Object(map) = &mut self.results {
            map.insert(key.to_string(), value);
        }
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Indented `key: value` listing; booleans print as pass/fail.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "command: {}", self.command).unwrap();
        writeln!(out, "inputs_digest: {}", self.inputs_digest).unwrap();
        if let Value::Object(map) = &self.results {
            for (key, value) in map {
                render(&mut out, key, value, 0);
            }
        }
        for w in &self.warnings {
            writeln!(out, "WARNING: {w}").unwrap();
        }
        out
    }
}

fn scalar(value: &Value) -> Option<String> {
    match value {
        Value::Null => Some("n/a".into()),
        Value::Bool(true) => Some("pass".into()),
        Value::Bool(false) => Some("fail".into()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        Value::Array(items) if items.iter().all(|v| matches!(v, Value::Number(_))) => {
            Some(format!(
                "[{}]",
                items
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        }
        _ => None,
    }
}

fn render(out: &mut String, key: &str, value: &Value, depth: usize) {
    let pad = "  ".repeat(depth);
    if let Some(s) = scalar(value) {
        writeln!(out, "{pad}{key}: {s}").unwrap();
        return;
    }
    writeln!(out, "{pad}{key}:").unwrap();
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                render(out, k, v, depth + 1);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                render(out, &format!("[{i}]"), v, depth + 1);
            }
        }
        _ => unreachable!(),
    }
}
