//! Command output: ordered `key=value` lines, or one JSON object.

use serde_json::{Map, Value};

#[derive(Default)]
pub struct Report {
    fields: Vec<(String, Value)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.fields.push((key.into(), value.into()));
    }

    /// Floats go through here so text output keeps non-finite values and the
    /// shortest round-trip form.
    pub fn float(&mut self, key: impl Into<String>, x: f64) {
        let key = key.into();
        match serde_json::Number::from_f64(x) {
            Some(n) => self.fields.push((key, Value::Number(n))),
            None => self.fields.push((key, Value::String(x.to_string()))),
        }
    }

    pub fn render(&self, json: bool) -> String {
        if json {
            let map: Map<String, Value> = self.fields.iter().cloned().collect();
            return format!("{}\n", Value::Object(map));
        }
        let mut out = String::new();
        for (k, v) in &self.fields {
            let text = match v {
                Value::String(s) => s.clone(),
                Value::Null => "none".to_string(),
                Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            out.push_str(k);
            out.push('=');
            out.push_str(&text);
            out.push('\n');
        }
        out
    }
}
